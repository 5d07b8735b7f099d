"""Per-pixel 7-class segmenters: two small backbones, soft-Dice training with
plateau decay and early stopping, classical augmentation, and the two
interpolation baselines used for comparison runs.
"""

import datetime
import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from . import nn
from .errors import ConfigError, PlanningError, ShapeError, TrainingDivergedError
from .phantom import ImageMaskPair, NUM_CLASSES, TISSUE_LABELS

BACKBONES = ("unet_small", "aspp_variant")


@dataclass
class SegConfig:
    backbone: str = "unet_small"
    classes: int = NUM_CLASSES
    widths: tuple = (16, 32, 64)
    lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_plateau_patience: int = 3
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 8
    seed: int = 0
    dtype: str = "float64"

    def validate(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}")
        if self.classes != NUM_CLASSES:
            raise ConfigError("seven classes are fixed: background plus six layers")
        if self.patience >= self.max_epochs:
            raise ConfigError("patience must stay below max_epochs")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1]")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# backbones

class UNetSmall(nn.Layer):
    def __init__(self, widths, classes, rng, dtype):
        w0, w1, w2 = widths
        self.stem = nn.Conv2d(1, w0, 3, rng=rng, dtype=dtype, name="seg.stem")
        self.stem_act = nn.LeakyReLU()
        self.down1 = nn.ResidualBlock(w0, w1, stride=2, rng=rng, dtype=dtype, name="seg.down1")
        self.down2 = nn.ResidualBlock(w1, w2, stride=2, rng=rng, dtype=dtype, name="seg.down2")
        self.mid = nn.Conv2d(w2, w2, 3, rng=rng, dtype=dtype, name="seg.mid")
        self.mid_act = nn.ReLU()
        self.up1 = nn.ConvTranspose2d(w2, w1, rng=rng, dtype=dtype, name="seg.up1")
        self.ref1 = nn.Conv2d(w1, w1, 3, rng=rng, dtype=dtype, name="seg.ref1")
        self.ref1_act = nn.ReLU()
        self.up2 = nn.ConvTranspose2d(w1, w0, rng=rng, dtype=dtype, name="seg.up2")
        self.ref2 = nn.Conv2d(w0, w0, 3, rng=rng, dtype=dtype, name="seg.ref2")
        self.ref2_act = nn.ReLU()
        self.head = nn.Conv2d(w0, classes, 1, pad=0, rng=rng, dtype=dtype, name="seg.head")
        self.head.w.data[...] = 0.0  # uniform class probabilities at start

    def params(self):
        out = []
        for l in (self.stem, self.down1, self.down2, self.mid, self.up1, self.ref1,
                  self.up2, self.ref2, self.head):
            out.extend(l.params())
        return out

    def children(self):
        return [self.stem, self.stem_act, self.down1, self.down2, self.mid,
                self.mid_act, self.up1, self.ref1, self.ref1_act, self.up2,
                self.ref2, self.ref2_act, self.head]

    def forward(self, x):
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by 4")
        s0 = self.stem_act.forward(self.stem.forward(x))
        s1 = self.down1.forward(s0)
        s2 = self.down2.forward(s1)
        m = self.mid_act.forward(self.mid.forward(s2))
        d = self.ref1_act.forward(self.ref1.forward(self.up1.forward(m) + s1))
        d = self.ref2_act.forward(self.ref2.forward(self.up2.forward(d) + s0))
        return self.head.forward(d)

    def backward(self, gy):
        g = self.head.backward(gy)
        g = self.ref2.backward(self.ref2_act.backward(g))
        g_s0 = g
        g = self.up2.backward(g)
        g = self.ref1.backward(self.ref1_act.backward(g))
        g_s1 = g
        g = self.up1.backward(g)
        g = self.mid.backward(self.mid_act.backward(g))
        g = self.down2.backward(g)
        g = self.down1.backward(g + g_s1)
        return self.stem.backward(self.stem_act.backward(g + g_s0))


class AsppVariant(nn.Layer):
    """Half-resolution trunk with parallel dilated branches, one upsample out."""

    def __init__(self, widths, classes, rng, dtype):
        w0, w1 = widths[0], widths[1]
        self.stem = nn.Conv2d(1, w0, 3, stride=2, rng=rng, dtype=dtype, name="aspp.stem")
        self.stem_act = nn.LeakyReLU()
        self.trunk = nn.ResidualBlock(w0, w1, stride=1, rng=rng, dtype=dtype, name="aspp.trunk")
        self.branches = [nn.Conv2d(w1, w1, 3, dilation=d, rng=rng, dtype=dtype,
                                   name=f"aspp.branch{d}") for d in (1, 2, 4)]
        self.branch_acts = [nn.LeakyReLU() for _ in self.branches]
        self.fuse = nn.Conv2d(w1, w1, 1, pad=0, rng=rng, dtype=dtype, name="aspp.fuse")
        self.fuse_act = nn.ReLU()
        self.up = nn.ConvTranspose2d(w1, w0, rng=rng, dtype=dtype, name="aspp.up")
        self.up_act = nn.ReLU()
        self.head = nn.Conv2d(w0, classes, 1, pad=0, rng=rng, dtype=dtype, name="aspp.head")
        self.head.w.data[...] = 0.0  # uniform class probabilities at start

    def params(self):
        out = []
        for l in [self.stem, self.trunk, *self.branches, self.fuse, self.up, self.head]:
            out.extend(l.params())
        return out

    def children(self):
        return ([self.stem, self.stem_act, self.trunk, self.fuse, self.fuse_act,
                 self.up, self.up_act, self.head] + self.branches + self.branch_acts)

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError("input dimensions must be even")
        h = self.trunk.forward(self.stem_act.forward(self.stem.forward(x)))
        z = None
        for conv, act in zip(self.branches, self.branch_acts):
            b = act.forward(conv.forward(h))
            z = b if z is None else z + b
        z = self.fuse_act.forward(self.fuse.forward(z))
        return self.head.forward(self.up_act.forward(self.up.forward(z)))

    def backward(self, gy):
        g = self.up.backward(self.up_act.backward(self.head.backward(gy)))
        g = self.fuse.backward(self.fuse_act.backward(g))
        gh = None
        for conv, act in zip(reversed(self.branches), reversed(self.branch_acts)):
            gb = conv.backward(act.backward(g))
            gh = gb if gh is None else gh + gb
        return self.stem.backward(self.stem_act.backward(self.trunk.backward(gh)))


def build_backbone(config, rng=None):
    rng = rng or np.random.default_rng(config.seed)
    dtype = config.np_dtype
    if config.backbone == "unet_small":
        return UNetSmall(config.widths, config.classes, rng, dtype)
    return AsppVariant(config.widths, config.classes, rng, dtype)


# ---------------------------------------------------------------------------
# soft Dice loss over the six tissue layers

def one_hot(masks, classes=NUM_CLASSES):
    n, h, w = masks.shape
    out = np.zeros((n, classes, h, w), dtype=np.float64)
    idx = np.ogrid[:n, :h, :w]
    out[idx[0], masks.astype(np.int64), idx[1], idx[2]] = 1.0
    return out


def dice_loss(probs, target_masks, smoothing=1.0):
    """1 - mean soft Dice over tissue layers; returns (loss, grad wrt probs)."""
    t = one_hot(np.asarray(target_masks))
    p = probs.astype(np.float64)
    grad = np.zeros_like(p)
    dices = []
    included = []
    for c in TISSUE_LABELS:
        p_sum = p[:, c].sum()
        t_sum = t[:, c].sum()
        if p_sum == 0.0 and t_sum == 0.0:
            continue
        inter = (p[:, c] * t[:, c]).sum()
        denom = p_sum + t_sum + smoothing
        dices.append((2.0 * inter + smoothing) / denom)
        included.append((c, inter, denom))
    if not dices:
        raise PlanningError("no tissue layer present in batch targets")
    n_c = len(dices)
    for c, inter, denom in included:
        grad[:, c] = -(2.0 * t[:, c] * denom - (2.0 * inter + smoothing)) / (denom * denom * n_c)
    return float(1.0 - np.mean(dices)), grad.astype(probs.dtype)


# ---------------------------------------------------------------------------
# prediction

@dataclass
class PredictionMask:
    labels: np.ndarray
    probabilities: np.ndarray = None

    def validate(self):
        if self.probabilities is not None:
            sums = self.probabilities.sum(axis=0)
            if np.abs(sums - 1.0).max() > 1e-5:
                raise ShapeError("per-pixel probabilities do not sum to 1")
            if not np.array_equal(self.labels, self.probabilities.argmax(axis=0)):
                raise ShapeError("labels disagree with probability argmax")


@dataclass
class SegCheckpoint:
    state: dict
    config: SegConfig
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
        cfg = SegConfig(**{**c, "widths": tuple(c["widths"])})
        with np.load(directory / "params.npz") as data:
            state = {k: data[k] for k in data.files}
        return cls(state=state, config=cfg, meta=payload["meta"])

    def build_network(self):
        net = build_backbone(self.config)
        nn.load_state(net.params(), self.state)
        return net

    @property
    def training_patients(self):
        return set(self.meta.get("training_patients", []))


def predict_probs(net, images, dtype=np.float64, batch_size=16):
    outs = []
    for start in range(0, len(images), batch_size):
        x = np.stack(images[start:start + batch_size]).astype(dtype)[:, None]
        logits = net.forward(x)
        net.clear_caches()
        outs.append(nn.softmax(logits))
    return np.concatenate(outs)


def predict_mask(checkpoint, image):
    net = checkpoint.build_network()
    probs = predict_probs(net, [image], checkpoint.config.np_dtype)[0]
    pred = PredictionMask(labels=probs.argmax(axis=0).astype(np.uint8),
                          probabilities=probs)
    pred.validate()
    return pred


# ---------------------------------------------------------------------------
# training

def _mean_val_dice(net, pairs, dtype):
    from .metrics import dice_coefficient
    probs = predict_probs(net, [p.image for p in pairs], dtype)
    scores = []
    for prob, pair in zip(probs, pairs):
        scores.append(dice_coefficient(prob.argmax(axis=0), pair.mask).mean)
    return float(np.mean(scores))


def train_segmenter(train_pairs, val_pairs, config, augmenter=None, log_dir=None,
                    training_patients=()):
    """Minimizes soft Dice; decays lr on a 3-epoch validation plateau,
    stops after `patience` stale epochs, returns the best-validation state."""
    config.validate()
    if not train_pairs or not val_pairs:
        raise PlanningError("train and validation sets must be non-empty")
    dtype = config.np_dtype
    net = build_backbone(config)
    opt = nn.Adam(net.params(), lr=config.lr)
    order = np.arange(len(train_pairs))
    history = []
    best = None
    stale = 0
    lr = config.lr

    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_dir / "training_log.csv"
        with open(log_path, "w") as f:
            f.write("epoch,train_loss,val_dice,lr\n")

    for epoch in range(1, config.max_epochs + 1):
        np.random.default_rng((config.seed, epoch)).shuffle(order)
        losses = []
        for start in range(0, len(order), config.batch_size):
            ids = order[start:start + config.batch_size]
            batch = []
            for i in ids:
                pair = train_pairs[i]
                if augmenter is not None:
                    pair = augmenter(pair, np.random.default_rng((config.seed, epoch, int(i))))
                batch.append(pair)
            x = np.stack([p.image for p in batch]).astype(dtype)[:, None]
            masks = np.stack([p.mask for p in batch])
            logits = net.forward(x)
            probs = nn.softmax(logits)
            loss, gprobs = dice_loss(probs, masks)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite dice loss at epoch {epoch}")
            net.backward(nn.softmax_backward(probs, gprobs))
            opt.step()
            opt.zero_grad()
            losses.append(loss)

        val_dice = _mean_val_dice(net, val_pairs, dtype)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_dice": float(val_dice), "lr": lr})
        if log_dir is not None:
            with open(log_path, "a") as f:
                f.write(f"{epoch},{float(np.mean(losses))!r},{float(val_dice)!r},{lr!r}\n")

        if best is None or val_dice > best["val_dice"]:
            best = {"epoch": epoch, "val_dice": float(val_dice),
                    "state": nn.collect_state(net.params())}
            stale = 0
        else:
            stale += 1
            if stale % config.lr_plateau_patience == 0:
                lr *= config.lr_decay_factor
                opt.lr = lr
            if stale >= config.patience:
                break

    meta = {
        "epoch": best["epoch"],
        "val_dice": best["val_dice"],
        "epochs_run": history[-1]["epoch"],
        "config_hash": config.hash(),
        "seed": config.seed,
        "training_patients": sorted(training_patients),
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "history": history,
    }
    return SegCheckpoint(state=best["state"], config=config, meta=meta)


# ---------------------------------------------------------------------------
# classical augmentation (joint geometric, image-only intensity)

def draw_augment_params(rng):
    params = {
        "hflip": bool(rng.random() < 0.5),
        "scale": float(rng.uniform(0.9, 1.1)),
        "rotate_deg": float(rng.uniform(-10.0, 10.0)),
        "shear_deg": float(rng.uniform(-6.0, 6.0)),
        "translate": (float(rng.uniform(-3.0, 3.0)), float(rng.uniform(-3.0, 3.0))),
        "crop_fraction": float(rng.uniform(0.9, 1.0)),
        "crop_offset": (float(rng.random()), float(rng.random())),
        "noise_sigma": float(rng.uniform(0.0, 0.03)),
        "contrast_gain": float(rng.uniform(0.8, 1.2)),
        "blur_sigma": float(rng.uniform(0.0, 0.8)) if rng.random() < 0.5 else 0.0,
        "sharpen_amount": float(rng.uniform(0.0, 0.5)) if rng.random() < 0.5 else 0.0,
        "noise_seed": int(rng.integers(2 ** 31)),
    }
    return params


IDENTITY_PARAMS = {
    "hflip": False, "scale": 1.0, "rotate_deg": 0.0, "shear_deg": 0.0,
    "translate": (0.0, 0.0), "crop_fraction": 1.0, "crop_offset": (0.0, 0.0),
    "noise_sigma": 0.0, "contrast_gain": 1.0, "blur_sigma": 0.0,
    "sharpen_amount": 0.0, "noise_seed": 0,
}


def _affine_matrix(params, h, w):
    scale, rot, shear = params["scale"], np.deg2rad(params["rotate_deg"]), np.deg2rad(params["shear_deg"])
    ty, tx = params["translate"]
    m = np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
    m = m @ np.array([[1.0, np.tan(shear)], [0.0, 1.0]])
    m = m * scale
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    # output coords map through inv(m) around the center, then translate
    inv = np.linalg.inv(m)
    offset = center - inv @ center + np.array([ty, tx])
    return inv, offset


def apply_augment(pair, params):
    """Joint geometric transform plus image-only intensity ops; shape preserved."""
    image, mask = pair.image, pair.mask
    h, w = image.shape

    if params["hflip"]:
        image = image[:, ::-1].copy()
        mask = mask[:, ::-1].copy()

    geometric = (params["scale"] != 1.0 or params["rotate_deg"] != 0.0
                 or params["shear_deg"] != 0.0 or params["translate"] != (0.0, 0.0))
    if geometric:
        inv, offset = _affine_matrix(params, h, w)
        if abs(np.linalg.det(inv)) < 1e-6:
            raise ConfigError("degenerate affine transform")
        image = ndimage.affine_transform(image, inv, offset=offset, order=1, mode="nearest")
        mask = ndimage.affine_transform(mask, inv, offset=offset, order=0, mode="nearest")

    if params["crop_fraction"] < 1.0:
        ch = max(4, int(round(h * params["crop_fraction"])))
        cw = max(4, int(round(w * params["crop_fraction"])))
        oy = int(round(params["crop_offset"][0] * (h - ch)))
        ox = int(round(params["crop_offset"][1] * (w - cw)))
        image = image[oy:oy + ch, ox:ox + cw]
        mask = mask[oy:oy + ch, ox:ox + cw]
        pad_y, pad_x = h - ch, w - cw
        pads = ((pad_y // 2, pad_y - pad_y // 2), (pad_x // 2, pad_x - pad_x // 2))
        image = np.pad(image, pads, mode="edge")
        mask = np.pad(mask, pads, mode="edge")

    # intensity ops never touch the mask
    if params["blur_sigma"] > 0.0:
        image = ndimage.gaussian_filter(image, params["blur_sigma"])
    if params["sharpen_amount"] > 0.0:
        blurred = ndimage.gaussian_filter(image, 1.0)
        image = image + params["sharpen_amount"] * (image - blurred)
    if params["contrast_gain"] != 1.0:
        mean = image.mean()
        image = mean + params["contrast_gain"] * (image - mean)
    if params["noise_sigma"] > 0.0:
        noise_rng = np.random.default_rng(params["noise_seed"])
        image = image + noise_rng.normal(0.0, params["noise_sigma"], size=image.shape)
    if image is not pair.image:
        image = np.clip(image, 0.0, 1.0)

    return ImageMaskPair(image=image, mask=mask.astype(np.uint8),
                         slice_index=pair.slice_index, annotated=pair.annotated)


def classical_augment(pair, rng):
    """One seeded draw of the crop/pad/flip/affine + intensity pipeline."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return apply_augment(pair, draw_augment_params(rng))


# ---------------------------------------------------------------------------
# interpolation baselines

def bilinear_baseline(left, right, ratio):
    """Image lerp; mask taken from the nearer endpoint (ties go left)."""
    if left.image.shape != right.image.shape:
        raise ShapeError("endpoint shapes differ")
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"ratio must lie in [0, 1], got {ratio}")
    image = (1.0 - ratio) * left.image + ratio * right.image
    mask = left.mask if ratio <= 0.5 else right.mask
    index = left.slice_index + int(round(ratio * (right.slice_index - left.slice_index)))
    return ImageMaskPair(image=image, mask=mask.copy(), slice_index=index, annotated=False)


def gan_reconstruction_baseline(pairs, config, log_dir=None):
    """Identity-task reconstruction GAN; returns originals plus reconstructions."""
    from .deblur import DeblurPair, train_deblur, deblur_image
    if not pairs:
        raise PlanningError("need a non-empty dataset")
    recon_pairs = [DeblurPair(input_image=p.image, target_image=p.image.copy())
                   for p in pairs]
    ckpt = train_deblur(recon_pairs, config, log_dir=log_dir)
    combined = list(pairs)
    for p in pairs:
        rec = deblur_image(ckpt, p.image)
        combined.append(ImageMaskPair(image=rec, mask=p.mask.copy(),
                                      slice_index=p.slice_index, annotated=p.annotated))
    return combined, ckpt
