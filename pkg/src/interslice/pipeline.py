"""Config-driven orchestration: phantom data, split, sparsify, generator
training, gap filling, optional deblur, segmenter variants, evaluation.

Stages write their artifacts under the output directory and record a
completion marker keyed by the hash of every config subtree they depend on;
re-running with an unchanged config skips completed stages. Reports are
byte-deterministic given the config seeds.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import deblur as deblur_mod
from . import gan, metrics, planning, segmentation
from .errors import ConfigError, LeakageError, PlanningError
from .phantom import (ImageMaskPair, PhantomConfig, SplitSpec, generate_phantom_stack,
                      load_stack, persist_stack, split_dataset, LAYER_NAMES,
                      TISSUE_LABELS)

SEG_VARIANTS = ("sparse", "sparse_aug", "interp", "interp_deblur", "bilinear", "gan_reco")

DEFAULT_STAGES = {
    "interslice_aug": True,
    "deblur": False,
    "classical_aug": False,
    "bilinear_baseline": False,
    "gan_reco_baseline": False,
    "fully_supervised": False,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    phantom: dict = field(default_factory=dict)
    dataset_path: str = None
    split: dict = field(default_factory=dict)
    settings: list = field(default_factory=lambda: [3])
    stages: dict = field(default_factory=dict)
    gan: dict = field(default_factory=dict)
    deblur: dict = field(default_factory=dict)
    seg: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            data = json.load(f)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def validate(self):
        for s in self.settings:
            if s not in planning.SETTING_SKIP_COUNTS:
                raise ConfigError(f"setting numbers must be 1..4, got {s}")
        unknown = set(self.stages) - set(DEFAULT_STAGES)
        if unknown:
            raise ConfigError(f"unknown stage toggles: {sorted(unknown)}")
        if self.stage_toggles()["deblur"] and not self.stage_toggles()["interslice_aug"]:
            raise ConfigError("deblur stage requires interslice_aug")
        if not self.split:
            raise ConfigError("split spec is required")

    def stage_toggles(self):
        return {**DEFAULT_STAGES, **self.stages}

    def to_dict(self):
        return {
            "seed": self.seed, "phantom": self.phantom, "dataset_path": self.dataset_path,
            "split": self.split, "settings": list(self.settings),
            "stages": self.stage_toggles(), "gan": self.gan, "deblur": self.deblur,
            "seg": self.seg, "metrics": self.metrics,
        }

    def hash(self):
        return _hash(self.to_dict())

    def phantom_config(self):
        fields = {k: v for k, v in self.phantom.items()
                  if k not in ("num_patients", "scans_per_patient")}
        return PhantomConfig(seed=self.seed, **fields)

    def split_spec(self):
        return SplitSpec(**self.split)

    def gan_config(self, setting_number):
        kw = dict(self.gan)
        kw.setdefault("seed", self.seed + 100 + setting_number)
        for key in ("widths", "disc_widths", "betas"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return gan.GanConfig(**kw)

    def deblur_config(self, setting_number):
        kw = dict(self.deblur)
        kw.setdefault("seed", self.seed + 200 + setting_number)
        for key in ("widths", "disc_widths", "betas"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return deblur_mod.DeblurConfig(**kw)

    def seg_config(self, variant_tag):
        kw = dict(self.seg)
        kw.setdefault("seed", self.seed + 300)
        if "widths" in kw:
            kw["widths"] = tuple(kw["widths"])
        return segmentation.SegConfig(**kw)

    def embedder(self):
        kw = dict(self.metrics.get("embedder", {}))
        mode = kw.pop("mode", "seeded_random_conv")
        if mode == "identity_flatten":
            return metrics.FeatureEmbedder.identity_flatten()
        if mode == "pretrained_classifier":
            return metrics.FeatureEmbedder.pretrained_classifier(kw["weights_path"])
        kw.setdefault("seed", self.seed + 400)
        if "channels" in kw:
            kw["channels"] = tuple(kw["channels"])
        return metrics.FeatureEmbedder.seeded_random_conv(**kw)

    def label_model(self):
        kw = dict(self.metrics.get("label_model", {}))
        mode = kw.pop("mode", "seeded_random_conv")
        if mode == "pretrained_classifier":
            return metrics.LabelDistributionModel.pretrained_classifier(kw["weights_path"])
        kw.setdefault("seed", self.seed + 500)
        if "channels" in kw:
            kw["channels"] = tuple(kw["channels"])
        return metrics.LabelDistributionModel.seeded_random_conv(**kw)


def _hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class RunManifest:
    config_hash: str
    stages: dict = field(default_factory=dict)

    def record(self, name, status, key, artifacts, elapsed, error=None):
        entry = {"status": status, "key": key, "artifacts": artifacts,
                 "elapsed_s": round(elapsed, 3)}
        if error:
            entry["error"] = error
        self.stages[name] = entry

    def save(self, path):
        with open(path, "w") as f:
            json.dump({"config_hash": self.config_hash, "stages": self.stages}, f,
                      indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            data = json.load(f)
        return cls(config_hash=data["config_hash"], stages=data["stages"])


class PipelineRun:
    """Holds the config, output layout, manifest, and stage caching logic."""

    def __init__(self, config, output_dir, resume=False):
        config.validate()
        self.config = config
        self.out = Path(output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        if self.manifest_path.exists():
            manifest = RunManifest.load(self.manifest_path)
            if manifest.config_hash != config.hash():
                raise ConfigError(f"output dir {self.out} belongs to config "
                                  f"{manifest.config_hash}, current is {config.hash()}")
            failed = [n for n, s in manifest.stages.items() if s["status"] == "failed"]
            if failed and not resume:
                raise ConfigError(f"previous run failed at {failed}; pass --resume "
                                  f"to continue or clean the output directory")
            self.manifest = manifest
        else:
            self.manifest = RunManifest(config_hash=config.hash())

    # -- caching helpers ----------------------------------------------------

    def _marker(self, stage_dir, key):
        return stage_dir / f".complete-{key}"

    def _is_cached(self, stage_dir, key):
        return self._marker(stage_dir, key).exists()

    def run_stage(self, name, stage_dir, key, producer, loader):
        """Execute or reuse one stage; record it in the manifest either way."""
        stage_dir.mkdir(parents=True, exist_ok=True)
        if self._is_cached(stage_dir, key):
            value = loader()
            self.manifest.record(name, "cached", key, [str(stage_dir)], 0.0)
            self.manifest.save(self.manifest_path)
            return value
        start = time.time()
        try:
            value = producer()
        except Exception as err:
            err.stage_name = name
            self.manifest.record(name, "failed", key, [str(stage_dir)],
                                 time.time() - start, error=f"{type(err).__name__}: {err}")
            self.manifest.save(self.manifest_path)
            raise
        self._marker(stage_dir, key).touch()
        self.manifest.record(name, "done", key, [str(stage_dir)], time.time() - start)
        self.manifest.save(self.manifest_path)
        return value

    # -- stage: source stacks -------------------------------------------------

    def stage_phantom(self):
        cfg = self.config
        stage_dir = self.out / "stacks"
        if cfg.dataset_path:
            key = _hash({"dataset_path": cfg.dataset_path})

            def load_external():
                base = Path(cfg.dataset_path)
                dirs = sorted(d for d in base.iterdir() if (d / "manifest.json").exists())
                if not dirs:
                    raise ConfigError(f"no stack directories under {base}")
                return [load_stack(d) for d in dirs]

            return self.run_stage("phantom", stage_dir, key, load_external, load_external)

        pcfg = cfg.phantom_config()
        pcfg.validate()
        num_patients = cfg.phantom.get("num_patients", 8)
        scans = cfg.phantom.get("scans_per_patient", 1)
        key = _hash({"phantom": cfg.phantom, "seed": cfg.seed})

        def produce():
            stacks = []
            for i in range(num_patients):
                pid = f"p{i:03d}"
                for j in range(scans):
                    stack = generate_phantom_stack(pcfg, pid, f"{pid}_s{j}")
                    persist_stack(stack, stage_dir / stack.scan_id)
                    stacks.append(stack)
            return stacks

        def load():
            dirs = sorted(d for d in stage_dir.iterdir() if d.is_dir())
            return [load_stack(d) for d in dirs]

        return self.run_stage("phantom", stage_dir, key, produce, load)

    # -- stage: split ---------------------------------------------------------

    def stage_split(self, stacks):
        cfg = self.config
        stage_dir = self.out / "split"
        key = _hash({"split": cfg.split, "seed": cfg.seed,
                     "upstream": self.manifest.stages["phantom"]["key"]})

        def produce():
            split = split_dataset(stacks, cfg.split_spec(), seed=cfg.seed)
            payload = {name: sorted(s.scan_id for s in part)
                       for name, part in split.partitions().items()}
            with open(stage_dir / "split.json", "w") as f:
                json.dump(payload, f, indent=2, sort_keys=True)
            return split

        def load():
            with open(stage_dir / "split.json") as f:
                payload = json.load(f)
            by_id = {s.scan_id: s for s in stacks}
            from .phantom import DatasetSplit
            return DatasetSplit(train=[by_id[i] for i in payload["train"]],
                                val=[by_id[i] for i in payload["val"]],
                                test=[by_id[i] for i in payload["test"]],
                                subset_b=[by_id[i] for i in payload["subset_b"]])

        return self.run_stage("split", stage_dir, key, produce, load)

    # -- stage: sparsify -------------------------------------------------------

    def stage_sparsify(self, split, setting_number):
        stage_dir = self.out / f"s{setting_number}" / "plans"
        key = _hash({"setting": setting_number,
                     "upstream": self.manifest.stages["split"]["key"]})
        setting = planning.AnnotationSetting.from_setting_number(setting_number)

        def produce():
            sparses = {}
            for part in ("train", "val", "subset_b"):
                for stack in getattr(split, part):
                    sparse = planning.sparsify(stack, setting)
                    planning.save_plan(sparse, stage_dir / f"{stack.scan_id}.json")
                    sparses[stack.scan_id] = sparse
            return sparses

        def load():
            sparses = {}
            for part in ("train", "val", "subset_b"):
                for stack in getattr(split, part):
                    plan = planning.load_plan(stage_dir / f"{stack.scan_id}.json")
                    sparses[stack.scan_id] = planning.SparseDataset(
                        stack=stack, setting=setting,
                        kept_indices=plan["kept_indices"],
                        dropped_indices=plan["dropped_indices"])
            return sparses

        return self.run_stage(f"sparsify_s{setting_number}", stage_dir, key, produce, load)

    # -- stage: generator training ---------------------------------------------

    def _triplet_pairs(self, split_part, sparses):
        triplets = []
        for stack in split_part:
            sparse = sparses[stack.scan_id]
            for t in planning.make_training_triplets(sparse):
                triplets.append(t.pairs(stack))
        return triplets

    def stage_train_gen(self, split, sparses, setting_number):
        stage_dir = self.out / f"s{setting_number}" / "gen_ckpt"
        gcfg = self.config.gan_config(setting_number)
        key = _hash({"gan": gcfg.to_dict(), "setting": setting_number,
                     "upstream": self.manifest.stages[f"sparsify_s{setting_number}"]["key"]})

        def produce():
            train_triplets = self._triplet_pairs(split.train, sparses)
            val_triplets = self._triplet_pairs(split.val, sparses)
            ckpt = gan.train_generator(train_triplets, val_triplets, gcfg,
                                       self.config.embedder(), log_dir=stage_dir)
            ckpt.save(stage_dir)
            return ckpt

        return self.run_stage(f"train_gen_s{setting_number}", stage_dir, key, produce,
                              lambda: gan.GeneratorCheckpoint.load(stage_dir))

    # -- stage: gap filling -------------------------------------------------------

    def stage_fill(self, split, sparses, ckpt, setting_number):
        stage_dir = self.out / f"s{setting_number}" / "filled"
        key = _hash({"upstream": self.manifest.stages[f"train_gen_s{setting_number}"]["key"]})

        def produce():
            out = {}
            for stack in split.train:
                sparse = sparses[stack.scan_id]
                requests = planning.make_interpolation_requests(sparse)
                generated = gan.fill_gaps(sparse, ckpt, requests)
                assembled = planning.assemble_interpolated_dataset(sparse, generated)
                _save_assembled(assembled, stage_dir / f"{stack.scan_id}.npz")
                out[stack.scan_id] = assembled
            return out

        def load():
            return {stack.scan_id: _load_assembled(stage_dir / f"{stack.scan_id}.npz")
                    for stack in split.train}

        return self.run_stage(f"fill_s{setting_number}", stage_dir, key, produce, load)

    # -- stage: deblur --------------------------------------------------------------

    def stage_train_deblur(self, split, sparses, gen_ckpt, setting_number):
        stage_dir = self.out / f"s{setting_number}" / "deblur_ckpt"
        dcfg = self.config.deblur_config(setting_number)
        key = _hash({"deblur": dcfg.to_dict(),
                     "upstream": self.manifest.stages[f"train_gen_s{setting_number}"]["key"]})

        def produce():
            train_pairs = deblur_mod.build_deblur_pairs(
                gen_ckpt, self._triplet_pairs(split.train, sparses))
            val_pairs = deblur_mod.build_deblur_pairs(
                gen_ckpt, self._triplet_pairs(split.val, sparses))
            ckpt = deblur_mod.train_deblur(train_pairs, dcfg, val_pairs=val_pairs,
                                           log_dir=stage_dir)
            ckpt.save(stage_dir)
            return ckpt

        return self.run_stage(f"train_deblur_s{setting_number}", stage_dir, key, produce,
                              lambda: deblur_mod.DeblurCheckpoint.load(stage_dir))

    def stage_deblur_apply(self, filled, dbl_ckpt, setting_number):
        stage_dir = self.out / f"s{setting_number}" / "filled_deblur"
        key = _hash({"upstream": [self.manifest.stages[f"fill_s{setting_number}"]["key"],
                                  self.manifest.stages[f"train_deblur_s{setting_number}"]["key"]]})

        def produce():
            out = {}
            for scan_id, assembled in filled.items():
                processed = deblur_mod.deblur_assembled(dbl_ckpt, assembled)
                _save_assembled(processed, stage_dir / f"{scan_id}.npz")
                out[scan_id] = processed
            return out

        def load():
            return {scan_id: _load_assembled(stage_dir / f"{scan_id}.npz")
                    for scan_id in filled}

        return self.run_stage(f"deblur_apply_s{setting_number}", stage_dir, key,
                              produce, load)

    # -- stage: segmenters -----------------------------------------------------------

    def _seg_stage(self, name, stage_dir, key, train_pairs, val_pairs, train_patients,
                   augmenter=None):
        scfg = self.config.seg_config(name)

        def produce():
            ckpt = segmentation.train_segmenter(train_pairs, val_pairs, scfg,
                                                augmenter=augmenter, log_dir=stage_dir,
                                                training_patients=train_patients)
            ckpt.save(stage_dir)
            return ckpt

        return self.run_stage(name, stage_dir, key,
                              produce, lambda: segmentation.SegCheckpoint.load(stage_dir))

    def stage_train_segmenters(self, split, sparses, filled, filled_deblur,
                               setting_number):
        toggles = self.config.stage_toggles()
        scfg_dict = dict(self.config.seg)
        val_pairs = [p for stack in split.val for p in stack.pairs]
        train_patients = {s.patient_id for s in split.train}
        base_key = {"seg": scfg_dict, "setting": setting_number,
                    "upstream": self.manifest.stages[f"sparsify_s{setting_number}"]["key"]}
        checkpoints = {}

        kept_pairs = [stack.pairs[i] for stack in split.train
                      for i in sparses[stack.scan_id].kept_indices]

        variants = [("sparse", kept_pairs, None, None)]
        if toggles["classical_aug"]:
            variants.append(("sparse_aug", kept_pairs, segmentation.classical_augment, None))
        if toggles["interslice_aug"]:
            fill_key = self.manifest.stages[f"fill_s{setting_number}"]["key"]
            interp_pairs = [p for scan_id in sorted(filled) for p in filled[scan_id].pairs()]
            variants.append(("interp", interp_pairs, None, fill_key))
        if toggles["deblur"]:
            dkey = self.manifest.stages[f"deblur_apply_s{setting_number}"]["key"]
            pairs = [p for scan_id in sorted(filled_deblur)
                     for p in filled_deblur[scan_id].pairs()]
            variants.append(("interp_deblur", pairs, None, dkey))
        if toggles["bilinear_baseline"]:
            variants.append(("bilinear", self._bilinear_pairs(split, sparses), None, None))
        if toggles["gan_reco_baseline"]:
            reco_dir = self.out / f"s{setting_number}" / "gan_reco_data"
            reco_key = _hash({**base_key, "stage": "gan_reco_data",
                              "deblur": self.config.deblur})

            def produce_reco():
                combined, _ = segmentation.gan_reconstruction_baseline(
                    kept_pairs, self.config.deblur_config(setting_number),
                    log_dir=reco_dir)
                images = np.stack([p.image for p in combined])
                masks = np.stack([p.mask for p in combined])
                flags = np.array([p.annotated for p in combined])
                idx = np.array([p.slice_index for p in combined])
                np.savez(reco_dir / "combined.npz", images=images, masks=masks,
                         flags=flags, idx=idx)
                return combined

            def load_reco():
                with np.load(reco_dir / "combined.npz") as data:
                    return [ImageMaskPair(image=data["images"][i], mask=data["masks"][i],
                                          slice_index=int(data["idx"][i]),
                                          annotated=bool(data["flags"][i]))
                            for i in range(data["images"].shape[0])]

            combined = self.run_stage(f"gan_reco_data_s{setting_number}", reco_dir,
                                      reco_key, produce_reco, load_reco)
            variants.append(("gan_reco", combined, None, None))

        for tag, pairs, augmenter, extra in variants:
            name = f"train_seg_s{setting_number}_{tag}"
            key = _hash({**base_key, "variant": tag, "extra": extra})
            stage_dir = self.out / f"s{setting_number}" / f"seg_{tag}"
            checkpoints[tag] = self._seg_stage(name, stage_dir, key, pairs, val_pairs,
                                               train_patients, augmenter)
        return checkpoints

    def _bilinear_pairs(self, split, sparses):
        pairs = []
        for stack in split.train:
            sparse = sparses[stack.scan_id]
            for i in sparse.kept_indices:
                pairs.append(stack.pairs[i])
            for req in planning.make_interpolation_requests(sparse):
                left = stack.pairs[req.left_index]
                right = stack.pairs[req.right_index]
                for ratio in req.ratios:
                    pairs.append(segmentation.bilinear_baseline(left, right, ratio))
        return pairs

    def stage_train_full(self, split):
        toggles = self.config.stage_toggles()
        if not toggles["fully_supervised"]:
            return None
        train_pairs = [p for stack in split.train for p in stack.pairs]
        val_pairs = [p for stack in split.val for p in stack.pairs]
        key = _hash({"seg": dict(self.config.seg), "variant": "full",
                     "upstream": self.manifest.stages["split"]["key"]})
        return self._seg_stage("train_seg_full", self.out / "seg_full", key,
                               train_pairs, val_pairs,
                               {s.patient_id for s in split.train})

    # -- evaluation ------------------------------------------------------------------

    def stage_eval(self, split, per_setting, full_ckpt):
        stage_dir = self.out / "eval"
        key = _hash({"upstream": sorted((n, s["key"]) for n, s in self.manifest.stages.items()
                                        if n != "eval")})

        def produce():
            report = evaluate_and_report(self, split, per_setting, full_ckpt, stage_dir)
            return report

        def load():
            with open(stage_dir / "report.json") as f:
                data = json.load(f)
            return metrics.EvaluationReport(rows=data["rows"],
                                            generator_rows=data["generator_rows"],
                                            alpha=data["alpha"],
                                            m_comparisons=data["m_comparisons"])

        return self.run_stage("eval", stage_dir, key, produce, load)


# ---------------------------------------------------------------------------
# assembled-dataset artifact format

def _save_assembled(assembled, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    images = np.stack([p.image for _, p, _ in assembled.entries])
    masks = np.stack([p.mask for _, p, _ in assembled.entries])
    positions = np.array([pos for pos, _, _ in assembled.entries])
    sources = np.array([1 if src == "generated" else 0
                        for _, _, src in assembled.entries], dtype=np.int64)
    idx = np.array([p.slice_index for _, p, _ in assembled.entries], dtype=np.int64)
    np.savez(path, images=images, masks=masks, positions=positions, sources=sources,
             idx=idx, dropped=np.array(assembled.dropped_indices, dtype=np.int64))


def _load_assembled(path):
    with np.load(path) as data:
        entries = []
        for i in range(data["images"].shape[0]):
            source = "generated" if data["sources"][i] else "kept"
            pair = ImageMaskPair(image=data["images"][i], mask=data["masks"][i],
                                 slice_index=int(data["idx"][i]),
                                 annotated=source == "kept")
            entries.append((float(data["positions"][i]), pair, source))
        return planning.AssembledDataset(entries=entries,
                                         dropped_indices=[int(d) for d in data["dropped"]])


# ---------------------------------------------------------------------------
# evaluation and report emission

def _per_slice_dice(ckpt, test_stacks):
    """Per-slice DiceResults over the test stacks, guarding patient leakage."""
    trained_on = ckpt.training_patients
    net = ckpt.build_network()
    results = []
    for stack in test_stacks:
        if stack.patient_id in trained_on:
            raise LeakageError(f"refusing to score on patient {stack.patient_id}: "
                               f"it appears in the model's training set")
        probs = segmentation.predict_probs(net, [p.image for p in stack.pairs],
                                           ckpt.config.np_dtype)
        for prob, pair in zip(probs, stack.pairs):
            results.append(metrics.dice_coefficient(prob.argmax(axis=0), pair.mask))
    return results


def _summarize(results):
    overall = np.array([r.mean for r in results])
    row = {"overall_mean": float(overall.mean()), "overall_sd": float(overall.std(ddof=1))
           if len(overall) > 1 else 0.0, "n_slices": len(results)}
    for label in TISSUE_LABELS:
        vals = [r.per_layer[label] for r in results if r.per_layer[label] is not None]
        name = LAYER_NAMES[label]
        row[f"{name}_mean"] = float(np.mean(vals)) if vals else None
        row[f"{name}_sd"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return row, overall


def _generator_quality_rows(run, split, sparses, ckpt, setting_number):
    """FID and exp-KL score of ratio-0.5 generations on A-val and subset B."""
    embedder = run.config.embedder()
    label_model = run.config.label_model()
    splits = run.config.metrics.get("is_splits", 1)
    rows = []
    gen = ckpt.build_generator()
    for dataset_name, part in (("a_val", split.val), ("subset_b", split.subset_b)):
        fakes, reals = [], []
        for stack in part:
            sparse = sparses[stack.scan_id]
            for t in planning.make_training_triplets(sparse):
                left, middle, right = t.pairs(stack)
                out = gen.generate(left, right, 0.5)
                fakes.append(out.image)
                reals.append(middle.image)
        if len(fakes) < 2:
            continue
        fid_value = metrics.fid(np.stack(reals), np.stack(fakes), embedder)
        is_mean, is_sd = metrics.inception_score(fakes, label_model,
                                                 splits=min(splits, len(fakes)))
        rows.append({"setting": setting_number, "dataset": dataset_name,
                     "fid": float(fid_value), "is_mean": float(is_mean),
                     "is_sd": float(is_sd), "n_images": len(fakes)})
    return rows


def evaluate_and_report(run, split, per_setting, full_ckpt, stage_dir):
    """Score every trained segmenter on the held-out test set and emit the
    CSV/JSON/plain-text report files."""
    if not split.test:
        raise PlanningError("test set is empty")
    alpha = run.config.metrics.get("alpha", 0.05)
    rows = []
    comparisons = []  # (row, baseline overall array, model overall array)

    for setting_number, bundle in sorted(per_setting.items()):
        seg_ckpts = bundle["segmenters"]
        base_results = _per_slice_dice(seg_ckpts["sparse"], split.test)
        base_row, base_overall = _summarize(base_results)
        base_row.update({"model": "sparse", "setting": setting_number,
                         "augmentation": "none"})
        rows.append(base_row)
        for tag in [t for t in SEG_VARIANTS if t != "sparse"]:
            if tag not in seg_ckpts:
                continue
            results = _per_slice_dice(seg_ckpts[tag], split.test)
            row, overall = _summarize(results)
            row.update({"model": tag, "setting": setting_number,
                        "augmentation": tag})
            row["performance_change"] = row["overall_mean"] - base_row["overall_mean"]
            row["cohens_d"] = metrics.cohens_d(base_row["overall_mean"],
                                               base_row["overall_sd"],
                                               row["overall_mean"], row["overall_sd"])
            row["effect_class"] = metrics.effect_size_class(row["cohens_d"])
            comparisons.append((row, base_overall, overall))
            rows.append(row)

    if full_ckpt is not None:
        results = _per_slice_dice(full_ckpt, split.test)
        row, _ = _summarize(results)
        row.update({"model": "fully_supervised", "setting": 0, "augmentation": "none"})
        rows.append(row)

    m = max(1, len(comparisons))
    for row, base_overall, overall in comparisons:
        t_res = metrics.paired_t_test(base_overall, overall, alpha=alpha, m_comparisons=m)
        row["p_value"] = t_res.p

    generator_rows = []
    for setting_number, bundle in sorted(per_setting.items()):
        generator_rows.extend(_generator_quality_rows(run, split, bundle["sparses"],
                                                      bundle["gen_ckpt"], setting_number))

    report = metrics.EvaluationReport(rows=rows, generator_rows=generator_rows,
                                      alpha=alpha, m_comparisons=m)
    stage_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(stage_dir / "report.csv")
    report.write_generator_csv(stage_dir / "generator.csv")
    report.write_json(stage_dir / "report.json")
    _write_summary(report, stage_dir / "summary.txt")
    return report


def _write_summary(report, path):
    lines = [f"alpha={report.alpha} m={report.m_comparisons} "
             f"alpha_adjusted={report.alpha_adjusted!r}", ""]
    for row in report.rows:
        change = row.get("performance_change")
        extra = ""
        if change is not None:
            extra = (f"  change={change:+.4f} p={row.get('p_value'):.4g} "
                     f"d={row.get('cohens_d'):.3f} ({row.get('effect_class')})")
        lines.append(f"setting {row['setting']:>2}  {row['model']:<14} "
                     f"dice={row['overall_mean']:.4f} (sd {row['overall_sd']:.4f}, "
                     f"n={row['n_slices']}){extra}")
    if report.generator_rows:
        lines.append("")
        for row in report.generator_rows:
            lines.append(f"setting {row['setting']:>2}  generator {row['dataset']:<9} "
                         f"fid={row['fid']:.4f} is={row['is_mean']:.4f} "
                         f"(sd {row['is_sd']:.4f}, n={row['n_images']})")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# entry point

STAGE_ORDER = ("phantom", "split", "sparsify", "train-gen", "fill", "train-deblur",
               "train-seg", "eval")


def run_pipeline(config, output_dir, resume=False, stop_after=None, settings=None):
    """Execute the enabled stages in dependency order; returns the manifest.

    stop_after halts once the named stage family has completed; settings
    optionally restricts the setting list (CLI --setting).
    """
    if stop_after is not None and stop_after not in STAGE_ORDER:
        raise ConfigError(f"unknown stage {stop_after!r}; choose from {STAGE_ORDER}")
    run = PipelineRun(config, output_dir, resume=resume)
    toggles = config.stage_toggles()
    setting_list = list(settings) if settings else list(config.settings)

    def done(stage):
        return stop_after == stage

    stacks = run.stage_phantom()
    if done("phantom"):
        return run.manifest
    split = run.stage_split(stacks)
    if done("split"):
        return run.manifest

    per_setting = {}
    for setting_number in setting_list:
        sparses = run.stage_sparsify(split, setting_number)
        if done("sparsify"):
            continue
        gen_ckpt = run.stage_train_gen(split, sparses, setting_number)
        if done("train-gen"):
            continue
        filled = run.stage_fill(split, sparses, gen_ckpt, setting_number)
        if done("fill"):
            continue
        filled_deblur = None
        if toggles["deblur"]:
            dbl = run.stage_train_deblur(split, sparses, gen_ckpt, setting_number)
            filled_deblur = run.stage_deblur_apply(filled, dbl, setting_number)
        if done("train-deblur"):
            continue
        segs = run.stage_train_segmenters(split, sparses, filled, filled_deblur,
                                          setting_number)
        per_setting[setting_number] = {"sparses": sparses, "gen_ckpt": gen_ckpt,
                                       "segmenters": segs}
    if stop_after in ("sparsify", "train-gen", "fill", "train-deblur"):
        return run.manifest

    full_ckpt = run.stage_train_full(split)
    if done("train-seg"):
        return run.manifest
    run.stage_eval(split, per_setting, full_ckpt)
    return run.manifest
