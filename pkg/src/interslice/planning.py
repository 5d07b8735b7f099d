"""Partial-annotation settings: periodic slice skipping, generator training
triplets, inference fill ratios, and reassembly of the interpolated dataset.
"""

import json
from dataclasses import dataclass, field

from .errors import AssemblyError, PlanningError

# setting number -> skip count k (every (k+1)-th slice keeps its annotation)
SETTING_SKIP_COUNTS = {1: 1, 2: 2, 3: 3, 4: 7}


@dataclass(frozen=True)
class AnnotationSetting:
    skip_count: int

    def __post_init__(self):
        if self.skip_count not in (1, 2, 3, 7):
            raise PlanningError(f"skip_count must be one of 1/2/3/7, got {self.skip_count}")

    @classmethod
    def from_setting_number(cls, number):
        if number not in SETTING_SKIP_COUNTS:
            raise PlanningError(f"setting number must be 1..4, got {number}")
        return cls(SETTING_SKIP_COUNTS[number])

    @property
    def setting_number(self):
        return {v: k for k, v in SETTING_SKIP_COUNTS.items()}[self.skip_count]

    @property
    def label_fraction(self):
        return 1.0 / (self.skip_count + 1)


@dataclass
class SparseDataset:
    """A stack with annotations kept only at every (k+1)-th slice."""

    stack: object
    setting: AnnotationSetting
    kept_indices: list
    dropped_indices: list

    def kept_pairs(self):
        return [self.stack.pairs[i] for i in self.kept_indices]

    def actual_fraction(self):
        return len(self.kept_indices) / self.stack.num_slices


@dataclass(frozen=True)
class TrainingTriplet:
    left_index: int
    middle_index: int
    right_index: int

    def __post_init__(self):
        if self.middle_index - self.left_index != self.right_index - self.middle_index:
            raise PlanningError(f"triplet {self} middle not equidistant from endpoints")

    def pairs(self, stack):
        return (stack.pairs[self.left_index], stack.pairs[self.middle_index],
                stack.pairs[self.right_index])


@dataclass(frozen=True)
class InterpolationRequest:
    left_index: int
    right_index: int
    ratios: tuple


def sparsify(stack, setting):
    """Keep slices at multiples of (k+1); record the unbracketable tail."""
    k = setting.skip_count
    n = stack.num_slices
    if n < 2 * (k + 1) + 1:
        raise PlanningError(f"stack of {n} slices too short for skip count {k} "
                            f"(need at least {2 * (k + 1) + 1})")
    kept = list(range(0, n, k + 1))
    dropped = list(range(kept[-1] + 1, n))
    return SparseDataset(stack=stack, setting=setting, kept_indices=kept,
                         dropped_indices=dropped)


def make_training_triplets(sparse):
    """Overlapping windows over consecutive kept indices."""
    kept = sparse.kept_indices
    if len(kept) < 3:
        raise PlanningError(f"need at least 3 kept slices to form a triplet, have {len(kept)}")
    return [TrainingTriplet(kept[i], kept[i + 1], kept[i + 2])
            for i in range(len(kept) - 2)]


def plan_inference_ratios(setting):
    """Uniform fill positions j/(k+1) strictly inside each gap."""
    k = setting.skip_count
    return [j / (k + 1) for j in range(1, k + 1)]


def make_interpolation_requests(sparse):
    ratios = tuple(plan_inference_ratios(sparse.setting))
    kept = sparse.kept_indices
    return [InterpolationRequest(kept[i], kept[i + 1], ratios)
            for i in range(len(kept) - 1)]


@dataclass
class AssembledDataset:
    """Kept plus generated pairs ordered by fractional slice position."""

    entries: list = field(default_factory=list)  # (position, pair, source)
    dropped_indices: list = field(default_factory=list)

    def pairs(self):
        return [pair for _, pair, _ in self.entries]

    def positions(self):
        return [pos for pos, _, _ in self.entries]

    def count(self):
        return len(self.entries)


def assemble_interpolated_dataset(sparse, generated):
    """Merge kept pairs with generated fills keyed by (left, right, ratio)."""
    entries = []
    for i in sparse.kept_indices:
        entries.append((float(i), sparse.stack.pairs[i], "kept"))
    for req in make_interpolation_requests(sparse):
        span = req.right_index - req.left_index
        for ratio in req.ratios:
            key = (req.left_index, req.right_index, ratio)
            if key not in generated:
                raise AssemblyError(f"missing generated pair for gap "
                                    f"({req.left_index}, {req.right_index}) at ratio {ratio}")
            entries.append((req.left_index + ratio * span, generated[key], "generated"))
    entries.sort(key=lambda e: e[0])
    return AssembledDataset(entries=entries, dropped_indices=list(sparse.dropped_indices))


def plan_to_dict(sparse, triplets=None, requests=None):
    triplets = make_training_triplets(sparse) if triplets is None else triplets
    requests = make_interpolation_requests(sparse) if requests is None else requests
    return {
        "setting": sparse.setting.setting_number,
        "skip_count": sparse.setting.skip_count,
        "kept_indices": list(sparse.kept_indices),
        "dropped_indices": list(sparse.dropped_indices),
        "triplets": [[t.left_index, t.middle_index, t.right_index] for t in triplets],
        "requests": [{"left": r.left_index, "right": r.right_index,
                      "ratios": list(r.ratios)} for r in requests],
    }


def save_plan(sparse, path):
    with open(path, "w") as f:
        json.dump(plan_to_dict(sparse), f, indent=2, sort_keys=True)


def load_plan(path):
    with open(path) as f:
        return json.load(f)
