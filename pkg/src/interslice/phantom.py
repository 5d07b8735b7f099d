"""Synthetic layered-tissue volumes, patient-level splits, and the stack
directory format.

Stacks mimic a six-layer anatomy: background above, then dermis, superficial
fat, superficial fascial membrane (SFM), deep fat, deep fascial membrane
(DFM), and muscle filling the bottom. Layer boundaries are sums of
low-frequency sinusoids whose phases advance slowly along the slice axis,
giving smooth inter-slice drift with a hard per-slice displacement bound.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, SplitError

BACKGROUND, DERMIS, SUPERFICIAL_FAT, SFM, DEEP_FAT, DFM, MUSCLE = range(7)
NUM_CLASSES = 7
LAYER_NAMES = {
    BACKGROUND: "background",
    DERMIS: "dermis",
    SUPERFICIAL_FAT: "superficial_fat",
    SFM: "sfm",
    DEEP_FAT: "deep_fat",
    DFM: "dfm",
    MUSCLE: "muscle",
}
TISSUE_LABELS = tuple(range(1, 7))

# by construction the SFM receives the smallest share of free height
THINNEST_LAYER = SFM

# nominal per-layer brightness before speckle; membranes bright, fats dark,
# with enough separation that layers are identifiable yet not trivially so
_PALETTE = np.array([0.05, 0.80, 0.35, 0.90, 0.20, 0.70, 0.50])

# share of free height granted to each of: 5 inter-boundary gaps + muscle
_SLACK_WEIGHTS = np.array([0.16, 0.27, 0.03, 0.28, 0.04, 0.22])

FORMAT_VERSION = 1


@dataclass
class ImageMaskPair:
    """One grayscale slice plus its 7-class layer mask."""

    image: np.ndarray
    mask: np.ndarray
    slice_index: int
    annotated: bool = True

    def validate(self):
        if self.image.shape != self.mask.shape:
            raise FormatError(f"slice {self.slice_index}: image shape {self.image.shape} "
                              f"!= mask shape {self.mask.shape}")
        if self.mask.min() < 0 or self.mask.max() >= NUM_CLASSES:
            raise FormatError(f"slice {self.slice_index}: mask holds labels outside 0..6")

    def equals(self, other):
        return (self.slice_index == other.slice_index
                and self.annotated == other.annotated
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.mask, other.mask))


@dataclass
class SliceStack:
    """Ordered slices from one scan; the unit of splitting and sparsification."""

    pairs: list
    patient_id: str
    scan_id: str
    side: str = "left"
    location: str = "MF"
    pixel_spacing_mm: float = 0.1

    def validate(self):
        for i, p in enumerate(self.pairs):
            if p.slice_index != i:
                raise FormatError(f"stack {self.scan_id}: slice_index {p.slice_index} at position {i}")
            p.validate()
            if p.image.shape != self.pairs[0].image.shape:
                raise FormatError(f"stack {self.scan_id}: inconsistent slice shapes")

    @property
    def num_slices(self):
        return len(self.pairs)

    @property
    def height(self):
        return self.pairs[0].image.shape[0]

    @property
    def width(self):
        return self.pairs[0].image.shape[1]

    def images(self):
        return np.stack([p.image for p in self.pairs])

    def masks(self):
        return np.stack([p.mask for p in self.pairs])

    def equals(self, other):
        return (self.patient_id == other.patient_id
                and self.scan_id == other.scan_id
                and self.side == other.side
                and self.location == other.location
                and self.pixel_spacing_mm == other.pixel_spacing_mm
                and len(self.pairs) == len(other.pairs)
                and all(a.equals(b) for a, b in zip(self.pairs, other.pairs)))


@dataclass
class PhantomConfig:
    num_slices: int = 33
    height: int = 64
    width: int = 64
    num_layers: int = 6
    boundary_amplitude_px: float = 3.0
    drift_max_px: float = 2.5
    speckle_strength: float = 0.35
    min_layer_thickness_px: int = 3
    seed: int = 0

    def validate(self):
        if self.num_slices < 3:
            raise ConfigError("num_slices must be >= 3")
        if self.height < 32 or self.width < 32:
            raise ConfigError("height and width must be >= 32")
        if self.num_layers != 6:
            raise ConfigError("num_layers is fixed at 6")
        if self.boundary_amplitude_px <= 0 or self.drift_max_px < 0:
            raise ConfigError("boundary_amplitude_px must be > 0 and drift_max_px >= 0")
        if not 0.0 <= self.speckle_strength <= 1.0:
            raise ConfigError("speckle_strength must lie in [0, 1]")
        if self.min_layer_thickness_px < 1:
            raise ConfigError("min_layer_thickness_px must be >= 1")
        if self.drift_max_px >= self.min_layer_thickness_px:
            raise ConfigError("drift_max_px must stay below min_layer_thickness_px")
        # feasibility of stacking six layers into the image height
        amp = self.boundary_amplitude_px
        g_min = self.min_layer_thickness_px + 1 + 2 * 0.3 * amp
        top = amp + 1
        if top + 5 * g_min > self.height - self.min_layer_thickness_px - 1 - amp:
            raise ConfigError("height too small for six layers at this thickness/amplitude")


def _stack_seed(seed, patient_id, scan_id):
    digest = hashlib.sha256(f"{seed}|{patient_id}|{scan_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _boundary_field(cfg, rng):
    """Float boundary depths B[slice, boundary, column]."""
    h, w, s = cfg.height, cfg.width, cfg.num_slices
    amp = cfg.boundary_amplitude_px
    shared_amp, local_amp = 0.7 * amp, 0.3 * amp
    # keep integer-rasterized drift within drift_max_px despite rounding
    budget = max(0.0, cfg.drift_max_px - 1.0)
    rate = budget / amp

    g_min = cfg.min_layer_thickness_px + 1 + 2 * local_amp
    top = amp + 1
    limit = cfg.height - cfg.min_layer_thickness_px - 1 - amp
    slack = limit - (top + 5 * g_min)
    weights = _SLACK_WEIGHTS * rng.uniform(0.7, 1.3, size=6)
    weights = weights / weights.sum()
    extras = slack * weights  # extras[5] is the muscle share, left implicit at the bottom
    base = np.empty(6)
    base[0] = top
    for i in range(1, 6):
        base[i] = base[i - 1] + g_min + extras[i - 1]

    x = np.arange(w) / w
    z = np.arange(s)
    comp_fracs = (0.6, 0.4)
    freq_ranges = ((0.5, 1.5), (1.5, 3.0))

    def sinusoids(amplitude, n_boundaries):
        field = np.zeros((s, n_boundaries, w))
        for frac, (f_lo, f_hi) in zip(comp_fracs, freq_ranges):
            a = amplitude * frac
            f = rng.uniform(f_lo, f_hi, size=n_boundaries)
            phase0 = rng.uniform(0, 2 * np.pi, size=n_boundaries)
            sign = rng.choice([-1.0, 1.0], size=n_boundaries)
            # phase advances by `rate` per slice: per-slice displacement <= a * rate
            phase = phase0[None, :] + sign[None, :] * rate * z[:, None]
            field += a * np.sin(2 * np.pi * f[None, :, None] * x[None, None, :]
                                + phase[:, :, None])
        return field

    shared = sinusoids(shared_amp, 1)          # one wobble common to all boundaries
    local = sinusoids(local_amp, 6)
    return base[None, :, None] + shared + local


def generate_phantom_stack(config, patient_id, scan_id, side="left", location="MF",
                           pixel_spacing_mm=0.1):
    """Seeded synthetic stack; identical (config, ids) give identical arrays."""
    config.validate()
    rng = np.random.default_rng(_stack_seed(config.seed, patient_id, scan_id))
    palette = np.clip(_PALETTE + rng.normal(0.0, 0.02, size=7), 0.02, 0.98)
    boundaries = _boundary_field(config, rng)
    h, w = config.height, config.width
    rows = np.arange(h)[None, :, None]

    speckle = rng.random((config.num_slices, h, w))
    pairs = []
    for z in range(config.num_slices):
        mask = (rows >= boundaries[z][:, None, :]).sum(axis=0).astype(np.uint8)
        base = palette[mask]
        img = base * (1.0 + config.speckle_strength * (2.0 * speckle[z] - 1.0))
        img = np.clip(img, 0.0, 1.0)
        img = np.round(img * 255.0) / 255.0  # snap to the 8-bit grid the disk format uses
        pairs.append(ImageMaskPair(image=img, mask=mask, slice_index=z))
    stack = SliceStack(pairs=pairs, patient_id=patient_id, scan_id=scan_id,
                       side=side, location=location, pixel_spacing_mm=pixel_spacing_mm)
    stack.validate()
    return stack


@dataclass
class SplitSpec:
    """Patient-level split: subset A (train/val/test) vs held-out subset B."""

    subset_a_patients: list
    subset_b_patients: list
    train_patients: list = None
    val_patients: list = None
    test_patients: list = None
    train_fraction: float = 0.6
    val_fraction: float = 0.2

    def validate(self):
        a, b = set(self.subset_a_patients), set(self.subset_b_patients)
        if len(a) != len(self.subset_a_patients) or len(b) != len(self.subset_b_patients):
            raise SplitError("duplicate patient ids within a subset")
        if a & b:
            raise SplitError(f"patients in both subsets: {sorted(a & b)}")
        explicit = [self.train_patients, self.val_patients, self.test_patients]
        if any(e is not None for e in explicit):
            if not all(e is not None for e in explicit):
                raise SplitError("give all of train/val/test patient lists or none")
            parts = [set(e) for e in explicit]
            union = parts[0] | parts[1] | parts[2]
            if sum(len(p) for p in parts) != len(union):
                raise SplitError("train/val/test patient lists overlap")
            if union != a:
                raise SplitError("train/val/test lists must cover subset A exactly")


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    subset_b: list = field(default_factory=list)

    def partitions(self):
        return {"train": self.train, "val": self.val, "test": self.test,
                "subset_b": self.subset_b}

    def patient_sets(self):
        return {name: {s.patient_id for s in stacks}
                for name, stacks in self.partitions().items()}


def split_dataset(stacks, spec, seed=0):
    """Partition stacks by patient; deterministic given seed."""
    spec.validate()
    a = set(spec.subset_a_patients)
    b = set(spec.subset_b_patients)
    for s in stacks:
        if s.patient_id not in a and s.patient_id not in b:
            raise SplitError(f"patient {s.patient_id} not covered by the split spec")

    if spec.train_patients is not None:
        train_p, val_p, test_p = (set(spec.train_patients), set(spec.val_patients),
                                  set(spec.test_patients))
    else:
        order = sorted(a)
        np.random.default_rng(seed).shuffle(order)
        n = len(order)
        n_train = min(n, max(1, int(round(spec.train_fraction * n))))
        remaining = n - n_train
        n_val = min(remaining, int(round(spec.val_fraction * n)))
        if remaining >= 2:
            n_val = min(max(1, n_val), remaining - 1)  # keep val and test non-empty
        train_p = set(order[:n_train])
        val_p = set(order[n_train:n_train + n_val])
        test_p = set(order[n_train + n_val:])

    split = DatasetSplit()
    for s in stacks:
        if s.patient_id in b:
            split.subset_b.append(s)
        elif s.patient_id in train_p:
            split.train.append(s)
        elif s.patient_id in val_p:
            split.val.append(s)
        else:
            split.test.append(s)
    assert_no_patient_leakage(split)
    return split


def assert_no_patient_leakage(split):
    sets = split.patient_sets()
    names = list(sets)
    for i, n1 in enumerate(names):
        for n2 in names[i + 1:]:
            common = sets[n1] & sets[n2]
            if common:
                raise SplitError(f"patients {sorted(common)} appear in both {n1} and {n2}")


def persist_stack(stack, directory):
    """Write image_%04d.png / mask_%04d.png plus manifest.json."""
    stack.validate()
    directory.mkdir(parents=True, exist_ok=True)
    for p in stack.pairs:
        img8 = np.round(p.image * 255.0).astype(np.uint8)
        Image.fromarray(img8, mode="L").save(directory / f"image_{p.slice_index:04d}.png")
        Image.fromarray(p.mask.astype(np.uint8), mode="L").save(
            directory / f"mask_{p.slice_index:04d}.png")
    manifest = {
        "patient_id": stack.patient_id,
        "scan_id": stack.scan_id,
        "side": stack.side,
        "location": stack.location,
        "num_slices": stack.num_slices,
        "height": stack.height,
        "width": stack.width,
        "pixel_spacing_mm": stack.pixel_spacing_mm,
        "format_version": FORMAT_VERSION,
    }
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_stack(directory):
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    pairs = []
    for i in range(manifest["num_slices"]):
        img_path = directory / f"image_{i:04d}.png"
        mask_path = directory / f"mask_{i:04d}.png"
        for path in (img_path, mask_path):
            if not path.exists():
                raise FormatError(f"missing slice file: {path}")
        img = np.asarray(Image.open(img_path), dtype=np.float64) / 255.0
        mask = np.asarray(Image.open(mask_path))
        if img.shape != mask.shape:
            raise FormatError(f"shape mismatch between {img_path.name} and {mask_path.name} "
                              f"in {directory}")
        if mask.max() >= NUM_CLASSES:
            raise FormatError(f"label {int(mask.max())} outside 0..6 in {mask_path}")
        pairs.append(ImageMaskPair(image=img, mask=mask.astype(np.uint8), slice_index=i))
    stack = SliceStack(
        pairs=pairs,
        patient_id=manifest["patient_id"],
        scan_id=manifest["scan_id"],
        side=manifest["side"],
        location=manifest["location"],
        pixel_spacing_mm=manifest["pixel_spacing_mm"],
    )
    if stack.height != manifest["height"] or stack.width != manifest["width"]:
        raise FormatError(f"manifest dimensions disagree with slice files in {directory}")
    stack.validate()
    return stack


def make_phantom_cohort(config, num_patients, scans_per_patient=1):
    """Convenience: patients p000..p{N-1}, one or more scans each."""
    stacks = []
    for i in range(num_patients):
        pid = f"p{i:03d}"
        for j in range(scans_per_patient):
            stacks.append(generate_phantom_stack(config, pid, f"{pid}_s{j}",
                                                 side="left" if j % 2 == 0 else "right",
                                                 location="MF" if j < 2 else "ES"))
    return stacks
