"""Ratio-conditioned inter-slice generator with a PatchGAN discriminator.

A shared residual encoder turns each endpoint image-mask pair into a feature
pyramid. Features at an arbitrary ratio r in [0, 1] are formed per level as
F_left + (F_right - F_left) * r, so r = 0 reproduces the left pyramid exactly
and r = 1 the right one. A UNet-style decoder with transposed convolutions
consumes the blended pyramid (summed into its skip connections) and emits a
2-channel pair: image squashed via tanh to [0, 1], mask channel via sigmoid
and quantized to the 7-label grid when materialized.

Training follows the pix2pix recipe: per triplet the generator reconstructs
ratios 0, 0.5, 1 against (left, middle, right) with an L1 term per ratio plus
an adversarial term from the patch discriminator; the discriminator averages
one real term and the three fake terms.
"""

import datetime
import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .errors import (ConfigError, FillError, LossAssemblyError, PlanningError,
                     ShapeError, TrainingDivergedError)
from .metrics import FeatureStats, frechet_distance
from .phantom import ImageMaskPair

TRAIN_RATIOS = (0.0, 0.5, 1.0)


@dataclass
class GanConfig:
    widths: tuple = (64, 128, 256, 512)       # feature pyramid channel widths
    disc_widths: tuple = (64, 128, 256, 512)  # PatchGAN stack, strides 2,2,2,1
    lambda_l1: float = 100.0
    lambda_adv: float = 1.0
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    fid_stop_threshold: float = 200.0
    max_epochs: int = 50
    batch_size: int = 4
    prob_eps: float = 1e-7
    seed: int = 0
    dtype: str = "float64"

    def validate(self):
        if self.lambda_l1 <= 0 or self.lambda_adv <= 0:
            raise ConfigError("loss weights must be positive")
        if self.fid_stop_threshold <= 0:
            raise ConfigError("fid_stop_threshold must be positive")
        if len(self.widths) < 2:
            raise ConfigError("need at least two pyramid levels")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")

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


# ---------------------------------------------------------------------------
# image-mask pair <-> 2-channel tensor

def imp_to_tensor(pair, dtype=np.float64):
    return np.stack([pair.image, pair.mask / 6.0]).astype(dtype)


def imps_to_batch(pairs, dtype=np.float64):
    return np.stack([imp_to_tensor(p, dtype) for p in pairs])


def quantize_mask_channel(mask_channel):
    """Continuous mask values snap to the nearest of {0, 1/6, ..., 1}."""
    return np.clip(np.round(mask_channel * 6.0), 0, 6).astype(np.uint8)


def tensor_to_imp(tensor, slice_index=0, annotated=False):
    image = np.asarray(tensor[0], dtype=np.float64)
    mask = quantize_mask_channel(np.asarray(tensor[1], dtype=np.float64))
    return ImageMaskPair(image=image, mask=mask, slice_index=slice_index,
                         annotated=annotated)


# ---------------------------------------------------------------------------
# networks

class PyramidEncoder(nn.Layer):
    """7x7 stride-2 stem followed by residual stages, one pyramid level each."""

    def __init__(self, widths, rng, dtype, in_channels=2):
        self.widths = tuple(widths)
        self.stem = nn.Conv2d(in_channels, widths[0], 7, stride=2, pad=3, rng=rng,
                              dtype=dtype, name="enc.stem")
        self.stem_act = nn.LeakyReLU()
        self.stages = [nn.ResidualBlock(widths[0], widths[0], stride=1, rng=rng,
                                        dtype=dtype, name="enc.res0")]
        for i in range(1, len(widths)):
            self.stages.append(nn.ResidualBlock(widths[i - 1], widths[i], stride=2,
                                                rng=rng, dtype=dtype, name=f"enc.res{i}"))

    def params(self):
        out = self.stem.params()
        for s in self.stages:
            out.extend(s.params())
        return out

    def children(self):
        return [self.stem, self.stem_act] + self.stages

    def forward(self, x):
        if x.shape[2] % (2 ** len(self.widths)) or x.shape[3] % (2 ** len(self.widths)):
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by "
                             f"2^{len(self.widths)}")
        h = self.stem_act.forward(self.stem.forward(x))
        levels = []
        for stage in self.stages:
            h = stage.forward(h)
            levels.append(h)
        return levels

    def backward(self, level_grads):
        g = level_grads[-1]
        for i in range(len(self.stages) - 1, 0, -1):
            g = self.stages[i].backward(g)
            g = g + level_grads[i - 1]
        g = self.stages[0].backward(g)
        return self.stem.backward(self.stem_act.backward(g))


class PyramidDecoder(nn.Layer):
    """Transposed-conv mirror; blended pyramid levels sum into the skips."""

    def __init__(self, widths, rng, dtype):
        self.widths = tuple(widths)
        w = widths
        self.bottom = nn.Conv2d(w[-1], w[-1], 3, rng=rng, dtype=dtype, name="dec.bottom")
        self.bottom_act = nn.ReLU()
        self.ups, self.refines, self.refine_acts = [], [], []
        for l in range(len(w) - 1, 0, -1):
            self.ups.append(nn.ConvTranspose2d(w[l], w[l - 1], rng=rng, dtype=dtype,
                                               name=f"dec.up{l}"))
            self.refines.append(nn.Conv2d(w[l - 1], w[l - 1], 3, rng=rng, dtype=dtype,
                                          name=f"dec.refine{l - 1}"))
            self.refine_acts.append(nn.ReLU())
        head_w = w[0]
        self.head_up = nn.ConvTranspose2d(w[0], head_w, rng=rng, dtype=dtype, name="dec.head_up")
        self.head_act = nn.ReLU()
        # separate full-resolution branches: speckle texture lives in the image
        # branch only, keeping the mask branch's surface flat between levels
        self.img_refine = nn.Conv2d(head_w, head_w, 3, rng=rng, dtype=dtype,
                                    name="dec.img_refine")
        self.img_refine_act = nn.ReLU()
        self.img_head = nn.Conv2d(head_w, 1, 3, rng=rng, dtype=dtype, name="dec.img_head")
        self.mask_refine = nn.Conv2d(head_w, head_w, 3, rng=rng, dtype=dtype,
                                     name="dec.mask_refine")
        self.mask_refine_act = nn.ReLU()
        self.mask_head = nn.Conv2d(head_w, 1, 3, rng=rng, dtype=dtype, name="dec.mask_head")
        self._squash = []

    def params(self):
        out = self.bottom.params()
        for up, ref in zip(self.ups, self.refines):
            out.extend(up.params())
            out.extend(ref.params())
        for layer in (self.head_up, self.img_refine, self.img_head,
                      self.mask_refine, self.mask_head):
            out.extend(layer.params())
        return out

    def children(self):
        return ([self.bottom, self.bottom_act, self.head_up, self.head_act,
                 self.img_refine, self.img_refine_act, self.img_head,
                 self.mask_refine, self.mask_refine_act, self.mask_head]
                + self.ups + self.refines + self.refine_acts)

    def _clear_own(self):
        self._squash.clear()

    def forward(self, levels):
        if len(levels) != len(self.widths):
            raise ShapeError(f"decoder expects {len(self.widths)} levels, got {len(levels)}")
        d = self.bottom_act.forward(self.bottom.forward(levels[-1]))
        for i, (up, ref, act) in enumerate(zip(self.ups, self.refines, self.refine_acts)):
            level = len(self.widths) - 2 - i
            d = up.forward(d)
            if d.shape != levels[level].shape:
                raise ShapeError(f"decoder level {level}: {d.shape} vs {levels[level].shape}")
            d = act.forward(ref.forward(d + levels[level]))
        d = self.head_act.forward(self.head_up.forward(d))
        img_raw = self.img_head.forward(self.img_refine_act.forward(self.img_refine.forward(d)))
        mask_raw = self.mask_head.forward(self.mask_refine_act.forward(self.mask_refine.forward(d)))
        th = np.tanh(img_raw[:, 0])
        sg = nn.sigmoid(mask_raw[:, 0])
        self._squash.append((th, sg))
        return np.stack([(th + 1.0) * 0.5, sg], axis=1)

    def backward(self, g_out):
        th, sg = self._squash.pop()
        g_img = (g_out[:, 0] * 0.5 * (1.0 - th * th))[:, None]
        g_mask = (g_out[:, 1] * sg * (1.0 - sg))[:, None]
        gi = self.img_refine.backward(self.img_refine_act.backward(
            self.img_head.backward(g_img)))
        gm = self.mask_refine.backward(self.mask_refine_act.backward(
            self.mask_head.backward(g_mask)))
        g = self.head_up.backward(self.head_act.backward(gi + gm))
        level_grads = [None] * len(self.widths)
        for i in range(len(self.ups) - 1, -1, -1):
            level = len(self.widths) - 2 - i
            g = self.refines[i].backward(self.refine_acts[i].backward(g))
            level_grads[level] = g
            g = self.ups[i].backward(g)
        level_grads[-1] = self.bottom.backward(self.bottom_act.backward(g))
        return level_grads


def blend_pyramids(left_levels, right_levels, ratio):
    """Per level F_left + (F_right - F_left) * ratio; endpoints are exact."""
    if len(left_levels) != len(right_levels):
        raise ShapeError("pyramids have different depths")
    for a, b in zip(left_levels, right_levels):
        if a.shape != b.shape:
            raise ShapeError(f"pyramid level shapes differ: {a.shape} vs {b.shape}")
    if ratio == 0.0:
        return [a for a in left_levels]
    if ratio == 1.0:
        return [b for b in right_levels]
    return [a + (b - a) * ratio for a, b in zip(left_levels, right_levels)]


class PatchDiscriminator(nn.Layer):
    """Strided conv stack producing a patch probability map in (0, 1)."""

    def __init__(self, widths, rng, dtype, in_channels=2):
        layers = []
        c = in_channels
        strides = [2] * (len(widths) - 1) + [1]
        for i, (w, s) in enumerate(zip(widths, strides)):
            layers.append(nn.Conv2d(c, w, 4, stride=s, pad=1, rng=rng, dtype=dtype,
                                    name=f"disc.conv{i}"))
            layers.append(nn.LeakyReLU())
            c = w
        layers.append(nn.Conv2d(c, 1, 4, stride=1, pad=1, rng=rng, dtype=dtype,
                                name="disc.out"))
        layers.append(nn.Sigmoid())
        self.net = nn.Sequential(*layers)

    def params(self):
        return self.net.params()

    def children(self):
        return [self.net]

    def forward(self, x):
        return self.net.forward(x)

    def backward(self, gy):
        return self.net.backward(gy)


class InterSliceGenerator:
    """Encoder + blend + decoder, with helpers for training-time backprop."""

    def __init__(self, config, rng=None):
        config.validate()
        self.config = config
        rng = rng or np.random.default_rng(config.seed)
        dtype = config.np_dtype
        self.encoder = PyramidEncoder(config.widths, rng, dtype)
        self.decoder = PyramidDecoder(config.widths, rng, dtype)

    def params(self):
        return self.encoder.params() + self.decoder.params()

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def clear_caches(self):
        self.encoder.clear_caches()
        self.decoder.clear_caches()

    def encode(self, batch):
        return self.encoder.forward(batch)

    def forward_ratios(self, left_batch, right_batch, ratios):
        """Encode endpoints once, decode at every ratio; caches stay armed."""
        f_left = self.encoder.forward(left_batch)
        f_right = self.encoder.forward(right_batch)
        outputs = {}
        for r in ratios:
            outputs[r] = self.decoder.forward(blend_pyramids(f_left, f_right, r))
        return outputs

    def backward_ratios(self, output_grads):
        """Backprop through decoder and blend for each ratio, then the shared
        encoder (right pyramid first: its caches are on top of the stack)."""
        ratios = list(output_grads)
        g_left, g_right = None, None
        for r in reversed(ratios):
            level_grads = self.decoder.backward(output_grads[r])
            wl, wr = (1.0 - r), r
            if g_left is None:
                g_left = [wl * g for g in level_grads]
                g_right = [wr * g for g in level_grads]
            else:
                for i, g in enumerate(level_grads):
                    g_left[i] += wl * g
                    g_right[i] += wr * g
        self.encoder.backward(g_right)
        self.encoder.backward(g_left)

    def generate_batch(self, left_batch, right_batch, ratio):
        out = self.forward_ratios(left_batch, right_batch, (ratio,))[ratio]
        self.clear_caches()
        return out

    def generate(self, left, right, ratio):
        if left.image.shape != right.image.shape:
            raise ShapeError("endpoint pairs have different shapes")
        if not 0.0 <= ratio <= 1.0:
            raise ConfigError(f"ratio must lie in [0, 1], got {ratio}")
        dtype = self.config.np_dtype
        batch = self.generate_batch(imps_to_batch([left], dtype),
                                    imps_to_batch([right], dtype), ratio)
        return tensor_to_imp(batch[0])


# ---------------------------------------------------------------------------
# losses

def clamp_probs(p, eps):
    return np.clip(p, eps, 1.0 - eps)


def l1_loss(output, target):
    """Mean absolute per-element difference, averaged over the batch."""
    if output.shape != target.shape:
        raise ShapeError(f"l1 operands differ: {output.shape} vs {target.shape}")
    return float(np.abs(output.astype(np.float64) - target).mean())


def l1_loss_grad(output, target):
    return np.sign(output - target) / output.size


def adversarial_gen_term(fake_probs, eps):
    """-E log D(G(x)) over patches and batch."""
    return float(-np.log(clamp_probs(fake_probs.astype(np.float64), eps)).mean())


def adversarial_gen_term_grad(fake_probs, eps):
    inside = (fake_probs > eps) & (fake_probs < 1.0 - eps)
    g = np.zeros_like(fake_probs)
    g[inside] = -1.0 / (fake_probs[inside] * fake_probs.size)
    return g


def disc_real_term(real_probs, eps):
    """-E log D(y)."""
    return float(-np.log(clamp_probs(real_probs.astype(np.float64), eps)).mean())


def disc_real_term_grad(real_probs, eps):
    inside = (real_probs > eps) & (real_probs < 1.0 - eps)
    g = np.zeros_like(real_probs)
    g[inside] = -1.0 / (real_probs[inside] * real_probs.size)
    return g


def disc_fake_term(fake_probs, eps):
    """-E log(1 - D(G(x)))."""
    return float(-np.log(1.0 - clamp_probs(fake_probs.astype(np.float64), eps)).mean())


def disc_fake_term_grad(fake_probs, eps):
    inside = (fake_probs > eps) & (fake_probs < 1.0 - eps)
    g = np.zeros_like(fake_probs)
    g[inside] = 1.0 / ((1.0 - fake_probs[inside]) * fake_probs.size)
    return g


def _require_ratios(mapping, what):
    missing = [r for r in TRAIN_RATIOS if r not in mapping]
    if missing:
        raise LossAssemblyError(f"{what} missing ratio terms {missing}")


def generator_loss(outputs, targets, fake_probs, lambda_l1=100.0, lambda_adv=1.0,
                   eps=1e-7):
    """lambda_l1 * sum_r L1_r + lambda_adv * sum_r (-E log D(G)_r)."""
    _require_ratios(outputs, "generator outputs")
    _require_ratios(targets, "generator targets")
    _require_ratios(fake_probs, "generator patch scores")
    l1_total = sum(l1_loss(outputs[r], targets[r]) for r in TRAIN_RATIOS)
    adv_total = sum(adversarial_gen_term(fake_probs[r], eps) for r in TRAIN_RATIOS)
    total = lambda_l1 * l1_total + lambda_adv * adv_total
    return total, {"l1": l1_total, "adv": adv_total}


def discriminator_loss(real_probs, fake_probs, eps=1e-7):
    """0.25 * (real term + the three per-ratio fake terms)."""
    _require_ratios(fake_probs, "discriminator fake scores")
    real = disc_real_term(real_probs, eps)
    fakes = {r: disc_fake_term(fake_probs[r], eps) for r in TRAIN_RATIOS}
    total = 0.25 * (real + sum(fakes.values()))
    return total, {"real": real, **{f"fake_{r}": v for r, v in fakes.items()}}


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class GeneratorCheckpoint:
    state: dict
    config: GanConfig
    meta: dict = field(default_factory=dict)

    def save(self, directory):
        directory.mkdir(parents=True, exist_ok=True)
        np.savez(directory / "params.npz", **self.state)
        payload = {"config": self.config.to_dict(), "meta": self.meta}
        with open(directory / "meta.json", "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory):
        with open(directory / "meta.json") as f:
            payload = json.load(f)
        cfg_dict = payload["config"]
        cfg = GanConfig(**{**cfg_dict,
                           "widths": tuple(cfg_dict["widths"]),
                           "disc_widths": tuple(cfg_dict["disc_widths"]),
                           "betas": tuple(cfg_dict["betas"])})
        with np.load(directory / "params.npz") as data:
            state = {k: data[k] for k in data.files}
        return cls(state=state, config=cfg, meta=payload["meta"])

    def build_generator(self):
        gen = InterSliceGenerator(self.config)
        nn.load_state(gen.params(), self.state)
        return gen


# ---------------------------------------------------------------------------
# training

def _triplet_tensors(triplets, dtype):
    lefts = imps_to_batch([t[0] for t in triplets], dtype)
    mids = imps_to_batch([t[1] for t in triplets], dtype)
    rights = imps_to_batch([t[2] for t in triplets], dtype)
    return lefts, mids, rights


def _dump_divergence(log_dir, history, note):
    if log_dir is None:
        return None
    path = log_dir / "divergence_dump.json"
    with open(path, "w") as f:
        json.dump({"note": note, "history": history}, f, indent=2)
    return path


def validation_fid(gen, val_triplets, embedder, batch_size=8):
    """FID of ratio-0.5 generations against the true middle images."""
    dtype = gen.config.np_dtype
    fake_images, real_images = [], []
    for start in range(0, len(val_triplets), batch_size):
        chunk = val_triplets[start:start + batch_size]
        lefts, mids, rights = _triplet_tensors(chunk, dtype)
        out = gen.generate_batch(lefts, rights, 0.5)
        fake_images.append(out[:, 0])
        real_images.append(mids[:, 0])
    fake = np.concatenate(fake_images).astype(np.float64)
    real = np.concatenate(real_images).astype(np.float64)
    stats_f = FeatureStats.from_features(embedder.embed(fake))
    stats_r = FeatureStats.from_features(embedder.embed(real))
    return frechet_distance(stats_r, stats_f)


def train_generator(train_triplets, val_triplets, config, embedder, log_dir=None,
                    epoch_callback=None):
    """Adversarial training with per-epoch validation FID early stopping.

    Returns the checkpoint with the lowest validation FID seen; stops as soon
    as the FID drops below config.fid_stop_threshold or epochs run out.
    epoch_callback(epoch, generator) runs after each epoch's validation, for
    inspection during threshold calibration.
    """
    config.validate()
    if len(train_triplets) < 1:
        raise PlanningError("need at least one training triplet")
    if len(val_triplets) < 2:
        raise PlanningError("need at least two validation triplets for FID")
    dtype = config.np_dtype
    rng = np.random.default_rng(config.seed)
    gen = InterSliceGenerator(config, rng=rng)
    disc = PatchDiscriminator(config.disc_widths, rng, dtype)
    opt_g = nn.Adam(gen.params(), lr=config.lr, betas=config.betas)
    opt_d = nn.Adam(disc.params(), lr=config.lr, betas=config.betas)
    eps = config.prob_eps
    order = np.arange(len(train_triplets))
    history = []
    best = None

    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_dir / "training_log.csv"
        with open(log_path, "w") as f:
            f.write("epoch,loss_G,loss_D,val_fid\n")

    for epoch in range(1, config.max_epochs + 1):
        epoch_rng = np.random.default_rng((config.seed, epoch))
        epoch_rng.shuffle(order)
        g_losses, d_losses = [], []
        for start in range(0, len(order), config.batch_size):
            batch_ids = order[start:start + config.batch_size]
            batch = [train_triplets[i] for i in batch_ids]
            lefts, mids, rights = _triplet_tensors(batch, dtype)
            targets = {0.0: lefts, 0.5: mids, 1.0: rights}

            outs = gen.forward_ratios(lefts, rights, TRAIN_RATIOS)
            fakes = np.concatenate([outs[r] for r in TRAIN_RATIOS])
            reals = np.concatenate([lefts, mids, rights])

            # discriminator step (generator outputs treated as constants)
            p_real = disc.forward(reals)
            p_fake = disc.forward(fakes)
            n = lefts.shape[0]
            fake_maps = {r: p_fake[i * n:(i + 1) * n] for i, r in enumerate(TRAIN_RATIOS)}
            loss_d, _ = discriminator_loss(p_real, fake_maps, eps)
            g_fake = np.concatenate([0.25 * disc_fake_term_grad(fake_maps[r], eps)
                                     for r in TRAIN_RATIOS])
            disc.backward(g_fake)
            disc.backward(0.25 * disc_real_term_grad(p_real, eps))
            opt_d.step()
            opt_d.zero_grad()

            # generator step (fresh discriminator pass over the same fakes)
            p_fake2 = disc.forward(fakes)
            fake_maps2 = {r: p_fake2[i * n:(i + 1) * n] for i, r in enumerate(TRAIN_RATIOS)}
            loss_g, _ = generator_loss(outs, targets, fake_maps2,
                                       config.lambda_l1, config.lambda_adv, eps)
            g_probs = np.concatenate([config.lambda_adv * adversarial_gen_term_grad(fake_maps2[r], eps)
                                      for r in TRAIN_RATIOS])
            g_fakes = disc.backward(g_probs)
            out_grads = {}
            for i, r in enumerate(TRAIN_RATIOS):
                g_out = g_fakes[i * n:(i + 1) * n].copy()
                g_out += config.lambda_l1 * l1_loss_grad(outs[r], targets[r])
                out_grads[r] = g_out
            gen.backward_ratios(out_grads)
            opt_g.step()
            opt_g.zero_grad()
            disc.net.zero_grad()  # grads accumulated during the generator step

            if not (np.isfinite(loss_g) and np.isfinite(loss_d)):
                dump = _dump_divergence(log_dir, history, f"NaN at epoch {epoch}")
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", dump)
            g_losses.append(loss_g)
            d_losses.append(loss_d)

        val_fid = validation_fid(gen, val_triplets, embedder)
        if not np.isfinite(val_fid):
            dump = _dump_divergence(log_dir, history, f"non-finite FID at epoch {epoch}")
            raise TrainingDivergedError(f"non-finite validation FID at epoch {epoch}", dump)
        record = {"epoch": epoch, "loss_G": float(np.mean(g_losses)),
                  "loss_D": float(np.mean(d_losses)), "val_fid": float(val_fid)}
        history.append(record)
        if log_dir is not None:
            with open(log_path, "a") as f:
                f.write(f"{epoch},{record['loss_G']!r},{record['loss_D']!r},{val_fid!r}\n")

        if best is None or val_fid < best["val_fid"]:
            best = {"epoch": epoch, "val_fid": float(val_fid),
                    "state": nn.collect_state(gen.params())}
        if epoch_callback is not None:
            epoch_callback(epoch, gen)
        # a non-finite threshold disables the early stop
        if np.isfinite(config.fid_stop_threshold) and val_fid < config.fid_stop_threshold:
            break

    meta = {
        "epoch": best["epoch"],
        "val_fid": best["val_fid"],
        "epochs_run": history[-1]["epoch"],
        "config_hash": config.hash(),
        "seed": config.seed,
        "embedder_mode": embedder.mode,
        "embedder_seed": embedder.seed,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "history": history,
    }
    return GeneratorCheckpoint(state=best["state"], config=config, meta=meta)


def recompute_validation_fid(checkpoint, val_triplets, embedder):
    return validation_fid(checkpoint.build_generator(), val_triplets, embedder)


# ---------------------------------------------------------------------------
# gap filling

def fill_gaps(sparse, checkpoint, requests):
    """One generated pair per (adjacent kept pair, ratio); deterministic."""
    kept = set(sparse.kept_indices)
    gen = checkpoint.build_generator()
    out = {}
    for req in requests:
        if req.left_index not in kept or req.right_index not in kept:
            raise FillError(f"request ({req.left_index}, {req.right_index}) "
                            f"references non-kept indices")
        left = sparse.stack.pairs[req.left_index]
        right = sparse.stack.pairs[req.right_index]
        span = req.right_index - req.left_index
        for ratio in req.ratios:
            pair = gen.generate(left, right, ratio)
            pair.slice_index = req.left_index + int(round(ratio * span))
            out[(req.left_index, req.right_index, ratio)] = pair
    return out
