"""Evaluation metrics and statistics: per-layer Dice overlap, Fréchet
distance between embedded feature distributions, Inception-style score over
a label model, Cohen's d, and Bonferroni-corrected paired t-tests.

Feature embedders and label models are pluggable so the suite runs without
bundled pretrained weights: ``identity_flatten`` gives an analytic oracle,
``seeded_random_conv`` a shape-realistic stand-in, and
``pretrained_classifier`` loads user-supplied weights from disk.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import kernels
from .errors import MetricError, ShapeError
from .phantom import LAYER_NAMES, TISSUE_LABELS


# ---------------------------------------------------------------------------
# feature embedders

class FeatureEmbedder:
    """Maps a batch of grayscale images [n, H, W] to feature rows [n, D]."""

    def __init__(self, mode, conv_stack=None, seed=None):
        self.mode = mode
        self._stack = conv_stack  # list of (w, b, stride) conv specs
        self.seed = seed

    @classmethod
    def identity_flatten(cls):
        return cls("identity_flatten")

    @classmethod
    def seeded_random_conv(cls, seed=0, channels=(8, 16, 32)):
        rng = np.random.default_rng(seed)
        return cls("seeded_random_conv", conv_stack=_random_conv_stack(rng, 1, channels),
                   seed=seed)

    @classmethod
    def pretrained_classifier(cls, weights_path):
        return cls("pretrained_classifier", conv_stack=_load_conv_stack(weights_path))

    def embed(self, images):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 3:
            raise MetricError(f"expected images [n, H, W], got shape {x.shape}")
        if self.mode == "identity_flatten":
            feats = x.reshape(x.shape[0], -1)
        else:
            feats = _conv_features(x[:, None, :, :], self._stack)
        if not np.isfinite(feats).all():
            raise MetricError("non-finite feature embeddings")
        return feats

    def save_weights(self, path):
        if self._stack is None:
            raise MetricError(f"{self.mode} embedder has no weights to save")
        _save_conv_stack(self._stack, path)


def _random_conv_stack(rng, cin, channels):
    stack = []
    c = cin
    for cout in channels:
        w = (rng.standard_normal((cout, c, 3, 3)) * np.sqrt(2.0 / (c * 9)))
        b = np.zeros(cout)
        stack.append((w, b, 2))
        c = cout
    return stack


def _conv_features(x, stack):
    for w, b, stride in stack:
        x = kernels.conv2d_forward(x, w, b, stride, 1, 1)
        x = np.where(x >= 0, x, 0.2 * x)
    return x.mean(axis=(2, 3))


def _save_conv_stack(stack, path):
    arrays = {}
    for i, (w, b, stride) in enumerate(stack):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
        arrays[f"s{i}"] = np.array(stride)
    np.savez(path, n_layers=np.array(len(stack)), **arrays)


def _load_conv_stack(path):
    with np.load(path) as data:
        n = int(data["n_layers"])
        return [(data[f"w{i}"], data[f"b{i}"], int(data[f"s{i}"])) for i in range(n)]


# ---------------------------------------------------------------------------
# Fréchet distance between feature distributions

@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_features(cls, feats):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[0] < 2:
            raise MetricError("need at least 2 samples to estimate feature statistics")
        mu = feats.mean(axis=0)
        sigma = np.atleast_2d(np.cov(feats, rowvar=False, ddof=1))
        sigma = 0.5 * (sigma + sigma.T)
        return cls(mu=mu, sigma=sigma)


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh(m)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(stats_r, stats_g):
    """|mu_r - mu_g|^2 + Tr(S_r + S_g - 2 sqrt(S_r S_g)), eigendecomposition form."""
    diff = stats_r.mu - stats_g.mu
    a = _psd_sqrt(stats_r.sigma)
    prod = a @ stats_g.sigma @ a
    prod = 0.5 * (prod + prod.T)
    vals = np.linalg.eigh(prod)[0]
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    value = float(diff @ diff + np.trace(stats_r.sigma) + np.trace(stats_g.sigma)
                  - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fid(images_real, images_gen, embedder):
    stats_r = FeatureStats.from_features(embedder.embed(images_real))
    stats_g = FeatureStats.from_features(embedder.embed(images_gen))
    return frechet_distance(stats_r, stats_g)


# ---------------------------------------------------------------------------
# label-distribution models and the exp-KL score

class LabelDistributionModel:
    """Produces per-image class distributions p(y|x), rows summing to 1."""

    def __init__(self, mode, num_classes, conv_stack=None, head=None, table=None):
        self.mode = mode
        self.num_classes = num_classes
        self._stack = conv_stack
        self._head = head  # (w [D, K], b [K])
        self._table = table

    @classmethod
    def table_stub(cls, rows):
        rows = np.asarray(rows, dtype=np.float64)
        return cls("table_stub", num_classes=rows.shape[1], table=rows)

    @classmethod
    def seeded_random_conv(cls, seed=0, num_classes=4, channels=(8, 16)):
        rng = np.random.default_rng(seed)
        stack = _random_conv_stack(rng, 1, channels)
        w = rng.standard_normal((channels[-1], num_classes)) / np.sqrt(channels[-1])
        b = np.zeros(num_classes)
        return cls("seeded_random_conv", num_classes=num_classes,
                   conv_stack=stack, head=(w, b))

    @classmethod
    def pretrained_classifier(cls, weights_path):
        with np.load(weights_path) as data:
            n = int(data["n_layers"])
            stack = [(data[f"w{i}"], data[f"b{i}"], int(data[f"s{i}"])) for i in range(n)]
            head = (data["head_w"], data["head_b"])
        return cls("pretrained_classifier", num_classes=head[0].shape[1],
                   conv_stack=stack, head=head)

    def save_weights(self, path):
        if self._stack is None:
            raise MetricError(f"{self.mode} model has no weights to save")
        arrays = {}
        for i, (w, b, stride) in enumerate(self._stack):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
            arrays[f"s{i}"] = np.array(stride)
        np.savez(path, n_layers=np.array(len(self._stack)),
                 head_w=self._head[0], head_b=self._head[1], **arrays)

    def predict_proba(self, images):
        n = len(images)
        if self.mode == "table_stub":
            if n > self._table.shape[0]:
                raise MetricError(f"table_stub holds {self._table.shape[0]} rows, "
                                  f"asked for {n}")
            probs = self._table[:n]
        else:
            x = np.asarray(images, dtype=np.float64)[:, None, :, :]
            feats = _conv_features(x, self._stack)
            logits = feats @ self._head[0] + self._head[1]
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            probs = e / e.sum(axis=1, keepdims=True)
        if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
            raise MetricError("label model rows do not sum to 1")
        return probs


def inception_score(images, model, splits=1):
    """exp(mean KL(p(y|x) || p(y))) per split; returns (mean, sd over splits)."""
    n = len(images)
    if n < 1:
        raise MetricError("need at least one image")
    if model.num_classes < 2:
        raise MetricError("label model must have at least 2 classes")
    if splits < 1 or splits > n:
        raise MetricError(f"splits must lie in [1, {n}]")
    scores = []
    for chunk in np.array_split(np.arange(n), splits):
        probs = model.predict_proba([images[i] for i in chunk])
        p_y = probs.mean(axis=0)
        ratio = np.zeros_like(probs)
        nz = probs > 0
        ratio[nz] = np.log(probs[nz]) - np.log(p_y[np.nonzero(nz)[1]])
        kl = (probs * ratio).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------------------
# effect sizes and paired tests

def cohens_d(mean1, sd1, mean2, sd2):
    """(M2 - M1) / sqrt((SD1^2 + SD2^2) / 2)."""
    if sd1 < 0 or sd2 < 0:
        raise MetricError("standard deviations must be non-negative")
    if sd1 == 0 and sd2 == 0:
        raise MetricError("effect size undefined when both standard deviations are 0")
    return float((mean2 - mean1) / np.sqrt((sd1 ** 2 + sd2 ** 2) / 2.0))


def effect_size_class(d):
    mag = abs(d)
    if mag < 0.2:
        return "very small"
    if mag < 0.5:
        return "small"
    if mag < 0.8:
        return "medium"
    return "large"


def bonferroni_alpha(alpha, m_comparisons):
    if m_comparisons < 1:
        raise MetricError("number of comparisons must be >= 1")
    return alpha / m_comparisons


@dataclass
class TTestResult:
    t: float
    df: int
    p: float
    alpha: float
    m_comparisons: int
    alpha_adjusted: float
    significant: bool


def paired_t_test(samples_a, samples_b, alpha=0.05, m_comparisons=1):
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError(f"paired samples must be equal-length 1-D, got {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise MetricError("need at least 2 paired samples")
    d = b - a
    sd = d.std(ddof=1)
    if sd == 0.0:
        if np.all(d == 0.0):
            t = 0.0
            p = 1.0
        else:
            raise MetricError("t statistic undefined: constant non-zero differences")
    else:
        t = float(d.mean() / (sd / np.sqrt(n)))
        p = float(2.0 * sps.t.sf(abs(t), df=n - 1))
    adj = bonferroni_alpha(alpha, m_comparisons)
    return TTestResult(t=t, df=n - 1, p=p, alpha=alpha, m_comparisons=m_comparisons,
                       alpha_adjusted=adj, significant=p < adj)


# ---------------------------------------------------------------------------
# Dice overlap on hard label masks

@dataclass
class DiceResult:
    per_layer: dict  # label -> float or None when the layer is absent on both sides
    mean: float

    def layer(self, label):
        return self.per_layer[label]


def dice_coefficient(prediction, target):
    """Per tissue layer 2|P∩T| / (|P|+|T|); absent-on-both-sides layers excluded."""
    prediction = np.asarray(prediction)
    target = np.asarray(target)
    if prediction.shape != target.shape:
        raise ShapeError(f"mask shapes differ: {prediction.shape} vs {target.shape}")
    per_layer = {}
    values = []
    for label in TISSUE_LABELS:
        p = prediction == label
        t = target == label
        p_count = int(p.sum())
        t_count = int(t.sum())
        if p_count == 0 and t_count == 0:
            per_layer[label] = None
            continue
        inter = int(np.logical_and(p, t).sum())
        score = 2.0 * inter / (p_count + t_count)
        per_layer[label] = score
        values.append(score)
    if not values:
        raise MetricError("no tissue layer present in either mask")
    return DiceResult(per_layer=per_layer, mean=float(np.mean(values)))


# ---------------------------------------------------------------------------
# report container

REPORT_LAYER_COLUMNS = [LAYER_NAMES[lab] for lab in TISSUE_LABELS]

MODEL_ROW_COLUMNS = (
    ["model", "setting", "augmentation"]
    + [f"{name}_mean" for name in REPORT_LAYER_COLUMNS]
    + [f"{name}_sd" for name in REPORT_LAYER_COLUMNS]
    + ["overall_mean", "overall_sd", "performance_change", "p_value",
       "cohens_d", "effect_class", "n_slices"]
)

GENERATOR_ROW_COLUMNS = ["setting", "dataset", "fid", "is_mean", "is_sd", "n_images"]


@dataclass
class EvaluationReport:
    rows: list = field(default_factory=list)
    generator_rows: list = field(default_factory=list)
    alpha: float = 0.05
    m_comparisons: int = 1

    @property
    def alpha_adjusted(self):
        return bonferroni_alpha(self.alpha, self.m_comparisons)

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "m_comparisons": self.m_comparisons,
            "alpha_adjusted": self.alpha_adjusted,
            "rows": self.rows,
            "generator_rows": self.generator_rows,
        }

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def write_csv(self, path):
        _write_csv(path, MODEL_ROW_COLUMNS, self.rows)

    def write_generator_csv(self, path):
        _write_csv(path, GENERATOR_ROW_COLUMNS, self.generator_rows)


def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_format_cell(row.get(c)) for c in columns))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
