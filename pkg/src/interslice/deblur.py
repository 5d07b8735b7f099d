"""Optional sharpening post-processor for generated images.

A 1-channel UNet generator is trained against the real images at annotated
triplet positions, with a PatchGAN discriminator. Only the image channel of
a pair is ever touched; masks pass through untouched. The stage is off by
default in the pipeline since it trades a small sharpness gain for dataset
diversity.
"""

import datetime
import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .errors import ConfigError, PlanningError, ShapeError, TrainingDivergedError
from .gan import (PatchDiscriminator, TRAIN_RATIOS, adversarial_gen_term,
                  adversarial_gen_term_grad, disc_fake_term, disc_fake_term_grad,
                  disc_real_term, disc_real_term_grad, l1_loss, l1_loss_grad)
from .planning import AssembledDataset
from .phantom import ImageMaskPair


@dataclass
class DeblurConfig:
    widths: tuple = (32, 64, 128)
    disc_widths: tuple = (32, 64)
    lambda_l1: float = 100.0
    lambda_adv: float = 1.0
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    patience: int = 5
    max_epochs: int = 50
    batch_size: int = 4
    prob_eps: float = 1e-7
    seed: int = 0
    dtype: str = "float64"

    def validate(self):
        if self.lambda_l1 <= 0 or self.lambda_adv <= 0:
            raise ConfigError("loss weights must be positive")
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("patience and max_epochs must be >= 1")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["disc_widths"] = list(self.disc_widths)
        d["betas"] = list(self.betas)
        return d

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class DeblurPair:
    input_image: np.ndarray
    target_image: np.ndarray

    def validate(self):
        if self.input_image.shape != self.target_image.shape:
            raise ShapeError(f"deblur pair shapes differ: {self.input_image.shape} "
                             f"vs {self.target_image.shape}")
        if not (np.isfinite(self.input_image).all() and np.isfinite(self.target_image).all()):
            raise ShapeError("deblur pair contains non-finite values")


class UNet1ch(nn.Layer):
    """Small UNet, 1 channel in and out, summed skip connections.

    Output is input + 0.5*tanh(head): a bounded residual correction, so the
    identity mapping is exactly representable and content is preserved by
    default. Callers clip to [0, 1] when materializing images.
    """

    def __init__(self, widths, rng, dtype):
        w0, w1, w2 = widths
        self.stem = nn.Conv2d(1, w0, 3, rng=rng, dtype=dtype, name="dbl.stem")
        self.stem_act = nn.LeakyReLU()
        self.down1 = nn.Conv2d(w0, w1, 3, stride=2, rng=rng, dtype=dtype, name="dbl.down1")
        self.down1_act = nn.LeakyReLU()
        self.down2 = nn.Conv2d(w1, w2, 3, stride=2, rng=rng, dtype=dtype, name="dbl.down2")
        self.down2_act = nn.LeakyReLU()
        self.up1 = nn.ConvTranspose2d(w2, w1, rng=rng, dtype=dtype, name="dbl.up1")
        self.ref1 = nn.Conv2d(w1, w1, 3, rng=rng, dtype=dtype, name="dbl.ref1")
        self.ref1_act = nn.ReLU()
        self.up2 = nn.ConvTranspose2d(w1, w0, rng=rng, dtype=dtype, name="dbl.up2")
        self.ref2 = nn.Conv2d(w0, w0, 3, rng=rng, dtype=dtype, name="dbl.ref2")
        self.ref2_act = nn.ReLU()
        self.head = nn.Conv2d(w0, 1, 3, rng=rng, dtype=dtype, name="dbl.head")
        self.head.w.data[...] = 0.0  # start as the exact identity map
        self._tanh = []

    def params(self):
        out = []
        for layer in (self.stem, self.down1, self.down2, self.up1, self.ref1,
                      self.up2, self.ref2, self.head):
            out.extend(layer.params())
        return out

    def children(self):
        return [self.stem, self.stem_act, self.down1, self.down1_act, self.down2,
                self.down2_act, self.up1, self.ref1, self.ref1_act, self.up2,
                self.ref2, self.ref2_act, self.head]

    def _clear_own(self):
        self._tanh.clear()

    def forward(self, x):
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by 4")
        s0 = self.stem_act.forward(self.stem.forward(x))
        s1 = self.down1_act.forward(self.down1.forward(s0))
        s2 = self.down2_act.forward(self.down2.forward(s1))
        d = self.ref1_act.forward(self.ref1.forward(self.up1.forward(s2) + s1))
        d = self.ref2_act.forward(self.ref2.forward(self.up2.forward(d) + s0))
        th = np.tanh(self.head.forward(d))
        self._tanh.append(th)
        return x + 0.5 * th

    def backward(self, gy):
        th = self._tanh.pop()
        g = self.head.backward(gy * 0.5 * (1.0 - th * th))
        g = self.ref2.backward(self.ref2_act.backward(g))
        g_s0 = g
        g = self.up2.backward(g)
        g = self.ref1.backward(self.ref1_act.backward(g))
        g_s1 = g
        g = self.up1.backward(g)
        g = self.down2.backward(self.down2_act.backward(g))
        g = self.down1.backward(self.down1_act.backward(g + g_s1))
        return self.stem.backward(self.stem_act.backward(g + g_s0)) + gy


def deblur_generator_loss(output, target, fake_probs, lambda_l1=100.0,
                          lambda_adv=1.0, eps=1e-7):
    """lambda_l1 * L1 + lambda_adv * (-E log D(G))."""
    l1 = l1_loss(output, target)
    adv = adversarial_gen_term(fake_probs, eps)
    return lambda_l1 * l1 + lambda_adv * adv, {"l1": l1, "adv": adv}


def deblur_discriminator_loss(real_probs, fake_probs, eps=1e-7):
    """0.5 * (real term + fake term)."""
    real = disc_real_term(real_probs, eps)
    fake = disc_fake_term(fake_probs, eps)
    return 0.5 * (real + fake), {"real": real, "fake": fake}


@dataclass
class DeblurCheckpoint:
    state: dict
    config: DeblurConfig
    meta: dict = field(default_factory=dict)

    def save(self, directory):
        directory.mkdir(parents=True, exist_ok=True)
        np.savez(directory / "params.npz", **self.state)
        with open(directory / "meta.json", "w") as f:
            json.dump({"config": self.config.to_dict(), "meta": self.meta}, f,
                      indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory):
        with open(directory / "meta.json") as f:
            payload = json.load(f)
        c = payload["config"]
        cfg = DeblurConfig(**{**c, "widths": tuple(c["widths"]),
                              "disc_widths": tuple(c["disc_widths"]),
                              "betas": tuple(c["betas"])})
        with np.load(directory / "params.npz") as data:
            state = {k: data[k] for k in data.files}
        return cls(state=state, config=cfg, meta=payload["meta"])

    def build_network(self):
        net = UNet1ch(self.config.widths, np.random.default_rng(self.config.seed),
                      self.config.np_dtype)
        nn.load_state(net.params(), self.state)
        return net


def build_deblur_pairs(checkpoint, triplets):
    """(generated image, real image) at ratios 0, 0.5, 1 of each triplet."""
    gen = checkpoint.build_generator()
    pairs = []
    for left, middle, right in triplets:
        for ratio, real in zip(TRAIN_RATIOS, (left, middle, right)):
            fake = gen.generate(left, right, ratio)
            pair = DeblurPair(input_image=fake.image, target_image=real.image)
            pair.validate()
            pairs.append(pair)
    return pairs


def _pair_tensors(pairs, dtype):
    x = np.stack([p.input_image for p in pairs]).astype(dtype)[:, None]
    y = np.stack([p.target_image for p in pairs]).astype(dtype)[:, None]
    return x, y


def train_deblur(pairs, config, val_pairs=None, log_dir=None, init_state=None):
    """Alternating D/G steps; early stop on stagnant validation L1.

    init_state warm-starts the generator from a previous checkpoint's state.
    """
    config.validate()
    if len(pairs) < 1:
        raise PlanningError("need at least one deblur pair")
    val_pairs = pairs if val_pairs is None else val_pairs
    dtype = config.np_dtype
    rng = np.random.default_rng(config.seed)
    net = UNet1ch(config.widths, rng, dtype)
    if init_state is not None:
        nn.load_state(net.params(), init_state)
    disc = PatchDiscriminator(config.disc_widths, rng, dtype, in_channels=1)
    opt_g = nn.Adam(net.params(), lr=config.lr, betas=config.betas)
    opt_d = nn.Adam(disc.params(), lr=config.lr, betas=config.betas)
    eps = config.prob_eps
    order = np.arange(len(pairs))
    val_x, val_y = _pair_tensors(val_pairs, dtype)
    history = []
    best = None
    stale = 0

    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_dir / "training_log.csv"
        with open(log_path, "w") as f:
            f.write("epoch,loss_G,loss_D,val_l1\n")

    for epoch in range(1, config.max_epochs + 1):
        np.random.default_rng((config.seed, epoch)).shuffle(order)
        g_losses, d_losses = [], []
        for start in range(0, len(order), config.batch_size):
            chunk = [pairs[i] for i in order[start:start + config.batch_size]]
            x, y = _pair_tensors(chunk, dtype)
            out = net.forward(x)

            p_real = disc.forward(y)
            p_fake = disc.forward(out)
            loss_d, _ = deblur_discriminator_loss(p_real, p_fake, eps)
            disc.backward(0.5 * disc_fake_term_grad(p_fake, eps))
            disc.backward(0.5 * disc_real_term_grad(p_real, eps))
            opt_d.step()
            opt_d.zero_grad()

            p_fake2 = disc.forward(out)
            loss_g, _ = deblur_generator_loss(out, y, p_fake2,
                                              config.lambda_l1, config.lambda_adv, eps)
            g_out = disc.backward(config.lambda_adv * adversarial_gen_term_grad(p_fake2, eps))
            g_out = g_out + config.lambda_l1 * l1_loss_grad(out, y)
            net.backward(g_out)
            opt_g.step()
            opt_g.zero_grad()
            disc.net.zero_grad()

            if not (np.isfinite(loss_g) and np.isfinite(loss_d)):
                raise TrainingDivergedError(f"non-finite deblur loss at epoch {epoch}")
            g_losses.append(loss_g)
            d_losses.append(loss_d)

        val_out = net.forward(val_x)
        net.clear_caches()
        val_l1 = l1_loss(val_out, val_y)
        record = {"epoch": epoch, "loss_G": float(np.mean(g_losses)),
                  "loss_D": float(np.mean(d_losses)), "val_l1": float(val_l1)}
        history.append(record)
        if log_dir is not None:
            with open(log_path, "a") as f:
                f.write(f"{epoch},{record['loss_G']!r},{record['loss_D']!r},{val_l1!r}\n")

        if best is None or val_l1 < best["val_l1"]:
            best = {"epoch": epoch, "val_l1": float(val_l1),
                    "state": nn.collect_state(net.params())}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    meta = {
        "epoch": best["epoch"],
        "val_l1": best["val_l1"],
        "epochs_run": history[-1]["epoch"],
        "config_hash": config.hash(),
        "seed": config.seed,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "history": history,
    }
    return DeblurCheckpoint(state=best["state"], config=config, meta=meta)


def deblur_image(checkpoint, image):
    """Same-shape image in [0, 1]; any paired mask is untouched by design."""
    net = checkpoint.build_network()
    x = np.asarray(image, dtype=checkpoint.config.np_dtype)[None, None]
    out = net.forward(x)[0, 0]
    net.clear_caches()
    return np.clip(out.astype(np.float64), 0.0, 1.0)


def deblur_assembled(checkpoint, assembled):
    """Post-process only the generated entries of an interpolated dataset."""
    net = checkpoint.build_network()
    dtype = checkpoint.config.np_dtype
    entries = []
    for pos, pair, source in assembled.entries:
        if source != "generated":
            entries.append((pos, pair, source))
            continue
        x = np.asarray(pair.image, dtype=dtype)[None, None]
        img = np.clip(net.forward(x)[0, 0].astype(np.float64), 0.0, 1.0)
        net.clear_caches()
        entries.append((pos, ImageMaskPair(image=img, mask=pair.mask.copy(),
                                           slice_index=pair.slice_index,
                                           annotated=pair.annotated), source))
    return AssembledDataset(entries=entries, dropped_indices=list(assembled.dropped_indices))
