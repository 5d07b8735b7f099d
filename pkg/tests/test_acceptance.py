"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. Criteria 9 and 10 share
three seeded desk-scale pipeline runs (8 patients x 33 slices x 64x64,
skip-3 annotation) provided by a session fixture; everything else is fast.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from interslice import deblur, gan, metrics, phantom, pipeline, planning, segmentation
from interslice.errors import LeakageError, SplitError

LN2 = math.log(2.0)


def _report(criterion, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {criterion:>2} {status}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# -- criterion 1: metric oracles ------------------------------------------------

def test_criterion_1_metric_oracles():
    start = time.time()
    emb = metrics.FeatureEmbedder.identity_flatten()

    images = np.random.default_rng(0).random((6, 8, 8))
    fid_same = metrics.fid(images, images.copy(), emb)

    rng = np.random.default_rng(0)
    real = rng.normal(0.0, 1.0, size=(10_000, 1, 1))
    shifted = rng.normal(1.0, 1.0, size=(10_000, 1, 1))
    scaled = rng.normal(0.0, 2.0, size=(10_000, 1, 1))
    fid_shift = metrics.fid(real, shifted, emb)
    fid_scale = metrics.fid(real, scaled, emb)

    uniform = metrics.LabelDistributionModel.table_stub(np.full((5, 4), 0.25))
    is_uniform, _ = metrics.inception_score([np.zeros((2, 2))] * 5, uniform, splits=1)
    onehot = metrics.LabelDistributionModel.table_stub(np.array([[1.0, 0.0], [0.0, 1.0]]))
    is_onehot, _ = metrics.inception_score([np.zeros((2, 2))] * 2, onehot, splits=1)

    a = np.zeros((8, 8), dtype=np.uint8); a[:4] = 1
    dice_equal = metrics.dice_coefficient(a, a).mean
    b = np.zeros((8, 8), dtype=np.uint8); b[:2] = 2
    c = np.zeros((8, 8), dtype=np.uint8); c[4:6] = 2
    dice_disjoint = metrics.dice_coefficient(b, c).mean
    p = np.zeros((4, 4), dtype=np.uint8); p[0, :4] = 3
    t = np.zeros((4, 4), dtype=np.uint8); t[0, 2:4] = 3; t[1, 0:2] = 3
    dice_half = metrics.dice_coefficient(p, t).mean

    elapsed = time.time() - start
    ok = (fid_same < 1e-6
          and abs(fid_shift - 1.0) < 0.02 and abs(fid_scale - 1.0) < 0.02
          and is_uniform == 1.0 and abs(is_onehot - 2.0) < 1e-6
          and dice_equal == 1.0 and dice_disjoint == 0.0 and dice_half == 0.5
          and elapsed < 60.0)
    _report(1, ok, f"fid_same={fid_same:.2e} fid_1d=({fid_shift:.4f},{fid_scale:.4f}) "
                   f"is=({is_uniform},{is_onehot:.6f}) dice=({dice_equal},{dice_disjoint},"
                   f"{dice_half}) in {elapsed:.1f}s")


# -- criterion 2: paper-anchored effect sizes --------------------------------------

def test_criterion_2_effect_size_anchors():
    d1 = metrics.cohens_d(0.7691, 0.17, 0.7966, 0.14)
    d2 = metrics.cohens_d(0.7691, 0.17, 0.7744, 0.17)
    ok = abs(d1 - 0.177) <= 0.002 and abs(d2 - 0.031) <= 0.002
    _report(2, ok, f"d1={d1:.4f} (target 0.177+-0.002), d2={d2:.4f} (target 0.031+-0.002)")


# -- criterion 3: Bonferroni ---------------------------------------------------------

def test_criterion_3_bonferroni():
    a5 = metrics.bonferroni_alpha(0.05, 5)
    a7 = metrics.bonferroni_alpha(0.05, 7)
    ok = a5 == 0.01 and a7 == 0.05 / 7
    _report(3, ok, f"alpha/5={a5} (exact 0.01), alpha/7={a7}")


# -- criterion 4: loss closed forms ----------------------------------------------------

def test_criterion_4_loss_closed_forms():
    t = np.random.default_rng(1).random((2, 2, 8, 8))
    same = {r: t.copy() for r in gan.TRAIN_RATIOS}
    maps_half = {r: np.full((2, 1, 3, 3), 0.5) for r in gan.TRAIN_RATIOS}
    maps_one = {r: np.full((2, 1, 3, 3), 1.0) for r in gan.TRAIN_RATIOS}

    g_perfect, _ = gan.generator_loss(same, same, maps_half)
    off = {r: t + 0.1 for r in gan.TRAIN_RATIOS}
    g_err, _ = gan.generator_loss(off, same, maps_one)
    d_half, _ = gan.discriminator_loss(np.full((2, 1, 3, 3), 0.5), maps_half)
    dbl_half, _ = deblur.deblur_discriminator_loss(np.full((2, 1, 3, 3), 0.5),
                                                   np.full((2, 1, 3, 3), 0.5))
    ok = (abs(g_perfect - 3 * LN2) < 1e-4 and abs(g_err - 30.0) < 1e-4
          and abs(d_half - LN2) < 1e-4 and abs(dbl_half - LN2) < 1e-4)
    _report(4, ok, f"gen={g_perfect:.6f} (3ln2={3 * LN2:.6f}), gen_err={g_err:.6f} (30), "
                   f"disc={d_half:.6f} deblur_disc={dbl_half:.6f} (ln2={LN2:.6f})")


# -- criterion 5: blend endpoint identities ----------------------------------------------

def test_criterion_5_blend_endpoint_identities():
    rng = np.random.default_rng(2)
    cfg = gan.GanConfig(widths=(4, 4), disc_widths=(4,), seed=5, dtype="float64")
    g = gan.InterSliceGenerator(cfg)

    def pair(idx=0):
        return phantom.ImageMaskPair(image=rng.random((8, 8)),
                                     mask=rng.integers(0, 7, (8, 8)).astype(np.uint8),
                                     slice_index=idx)

    left = pair()
    o1 = g.generate(left, pair(), 0.0)
    o2 = g.generate(left, pair(), 0.0)
    bit_equal = (np.array_equal(o1.image, o2.image) and np.array_equal(o1.mask, o2.mask))

    same = pair()
    outs = [g.generate(same, same, r) for r in (0.0, 0.37, 0.8, 1.0)]
    constant = all(np.array_equal(o.image, outs[0].image)
                   and np.array_equal(o.mask, outs[0].mask) for o in outs[1:])

    fl = [rng.standard_normal((1, 3, 8, 8))]
    fr = [rng.standard_normal((1, 3, 8, 8))]
    linear = True
    for ratio in (0.2, 0.5, 0.9):
        blended = gan.blend_pyramids(fl, fr, ratio)[0]
        direct = (1 - ratio) * fl[0] + ratio * fr[0]
        linear &= bool(np.allclose(blended, direct, rtol=1e-6))

    ok = bit_equal and constant and linear
    _report(5, ok, f"ratio-0 bit-equal={bit_equal}, same-endpoint constant={constant}, "
                   f"blend linear within 1e-6 rel={linear}")


# -- criterion 6: gradient check -------------------------------------------------------------

def test_criterion_6_gradient_check():
    from test_gan import _grad_check, _mini_config
    start = time.time()
    _grad_check(_mini_config(), "G", n_params=20, tol=1e-3)
    _grad_check(_mini_config(), "D", n_params=20, tol=1e-3)
    elapsed = time.time() - start
    _report(6, elapsed < 120.0,
            f"40 sampled parameters within 1e-3 of central differences in {elapsed:.1f}s")


# -- criterion 7: bilinear oracle --------------------------------------------------------------

def test_criterion_7_bilinear_oracle():
    rng = np.random.default_rng(3)
    mk = lambda i: phantom.ImageMaskPair(image=rng.random((8, 8)),
                                         mask=rng.integers(0, 7, (8, 8)).astype(np.uint8),
                                         slice_index=i)
    left, right = mk(0), mk(2)
    linear = all(np.allclose(segmentation.bilinear_baseline(left, right, r).image,
                             (1 - r) * left.image + r * right.image, atol=1e-6, rtol=0)
                 for r in (0.1, 0.5, 0.9))
    end0 = np.array_equal(segmentation.bilinear_baseline(left, right, 0.0).image, left.image)
    end1 = np.array_equal(segmentation.bilinear_baseline(left, right, 1.0).image, right.image)
    ok = linear and end0 and end1
    _report(7, ok, f"two-term form within 1e-6={linear}, exact endpoints={end0 and end1}")


# -- criterion 8: sparsification counts ----------------------------------------------------------

def test_criterion_8_sparsification_counts():
    counts = {}
    for number, expected_kept, nominal in [(1, 121, 0.50), (2, 81, 0.33),
                                           (3, 61, 0.25), (4, 31, 0.12)]:
        setting = planning.AnnotationSetting.from_setting_number(number)
        kept = [i for i in range(241) if i % (setting.skip_count + 1) == 0]
        counts[number] = (len(kept), len(kept) / 241, nominal)
        assert len(kept) == expected_kept
        assert abs(len(kept) / 241 - nominal) < 0.015

    # reassembly restores N when (N-1) mod (k+1) == 0
    cfg = phantom.PhantomConfig(num_slices=9, height=32, width=32, seed=4,
                                min_layer_thickness_px=2, boundary_amplitude_px=1.2,
                                drift_max_px=1.0)
    stack = phantom.generate_phantom_stack(cfg, "p0", "s0")
    sparse = planning.sparsify(stack, planning.AnnotationSetting(1))
    generated = {}
    for req in planning.make_interpolation_requests(sparse):
        for ratio in req.ratios:
            generated[(req.left_index, req.right_index, ratio)] = stack.pairs[0]
    assembled = planning.assemble_interpolated_dataset(sparse, generated)
    ok = assembled.count() == 9
    detail = ", ".join(f"s{n}: {c} kept ({f:.1%} vs {nom:.0%})"
                       for n, (c, f, nom) in counts.items())
    _report(8, ok, detail + f"; reassembled 9/9 samples={ok}")


# -- criteria 9 and 10: desk-scale directional runs ------------------------------------------------

DESK_SEEDS = (0, 1, 2)


def _desk_config(seed):
    return pipeline.ExperimentConfig(
        seed=seed,
        phantom={"num_patients": 8, "scans_per_patient": 1, "num_slices": 33,
                 "height": 64, "width": 64, "boundary_amplitude_px": 3.0,
                 "drift_max_px": 2.5, "speckle_strength": 0.35,
                 "min_layer_thickness_px": 3},
        split={"subset_a_patients": ["p000", "p001", "p002", "p003", "p004", "p005"],
               "subset_b_patients": ["p006", "p007"],
               "train_patients": ["p000", "p001", "p002", "p003"],
               "val_patients": ["p004"], "test_patients": ["p005"]},
        settings=[3],
        stages={"interslice_aug": True},
        gan={"widths": [16, 32, 64], "disc_widths": [16, 32, 64], "max_epochs": 150,
             "fid_stop_threshold": 1e-6, "batch_size": 4, "dtype": "float64"},
        seg={"backbone": "aspp_variant", "widths": [8, 16, 32], "lr": 0.002,
             "max_epochs": 40, "patience": 6, "batch_size": 4, "dtype": "float64"},
        metrics={"embedder": {"mode": "seeded_random_conv", "channels": [8, 16, 32]},
                 "label_model": {"mode": "seeded_random_conv", "num_classes": 4},
                 "alpha": 0.05, "is_splits": 1},
    )


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    runs = []
    start = time.time()
    for seed in DESK_SEEDS:
        out = tmp_path_factory.mktemp(f"desk_seed{seed}")
        config = _desk_config(seed)
        pipeline.run_pipeline(config, out)
        runs.append((seed, config, out))
    print(f"\n[desk fixture] 3 seeded runs in {time.time() - start:.0f}s")
    return runs


def _desk_rows(out):
    report = json.loads((Path(out) / "eval" / "report.json").read_text())
    rows = {r["model"]: r for r in report["rows"]}
    return rows


def test_criterion_9_interslice_augmentation_direction(desk_runs):
    sparse_means, interp_means, thin_sparse, thin_interp = [], [], [], []
    gen_ok = []
    thin_name = phantom.LAYER_NAMES[phantom.THINNEST_LAYER]
    for seed, config, out in desk_runs:
        rows = _desk_rows(out)
        sparse_means.append(rows["sparse"]["overall_mean"])
        interp_means.append(rows["interp"]["overall_mean"])
        thin_sparse.append(rows["sparse"][f"{thin_name}_mean"])
        thin_interp.append(rows["interp"][f"{thin_name}_mean"])
        meta = json.loads((Path(out) / "s3" / "gen_ckpt" / "meta.json").read_text())["meta"]
        gen_ok.append(meta["epochs_run"] <= 50
                      and meta["history"][-1]["val_fid"] < meta["history"][0]["val_fid"])
    med = lambda v: float(np.median(v))
    direction = med(interp_means) >= med(sparse_means)
    thin_gain = med(thin_interp) - med(thin_sparse)
    ok = direction and thin_gain >= 0.01 and all(gen_ok)
    _report(9, ok, f"median dice interp={med(interp_means):.4f} vs sparse="
                   f"{med(sparse_means):.4f}; {thin_name} gain={thin_gain:+.4f} "
                   f"(need >= +0.01); gen runs <=50 epochs with falling FID={all(gen_ok)}")


def test_criterion_10_generator_beats_copying(desk_runs):
    embedder = metrics.FeatureEmbedder.seeded_random_conv(seed=0, channels=(8, 16, 32))
    wins = 0
    details = []
    l1_majorities = []
    for seed, config, out in desk_runs:
        ckpt = gan.GeneratorCheckpoint.load(Path(out) / "s3" / "gen_ckpt")
        gen_net = ckpt.build_generator()
        stack_dirs = [d for d in sorted((Path(out) / "stacks").iterdir()) if d.is_dir()]
        stacks = {d.name: phantom.load_stack(d) for d in stack_dirs}
        setting = planning.AnnotationSetting(3)
        fakes, copies, reals, l1_wins = [], [], [], []
        for sid in ("p006_s0", "p007_s0"):  # held-out subset B
            stack = stacks[sid]
            sparse = planning.sparsify(stack, setting)
            for t in planning.make_training_triplets(sparse):
                left, middle, right = t.pairs(stack)
                out_pair = gen_net.generate(left, right, 0.5)
                fakes.append(out_pair.image)
                copies.append(left.image)
                reals.append(middle.image)
                l1_wins.append(np.abs(out_pair.image - middle.image).mean()
                               < np.abs(left.image - middle.image).mean())
        fid_gen = metrics.fid(np.stack(reals), np.stack(fakes), embedder)
        fid_copy = metrics.fid(np.stack(reals), np.stack(copies), embedder)
        wins += fid_gen < fid_copy
        l1_majorities.append(np.mean(l1_wins) > 0.5)
        details.append(f"seed{seed}: fid gen={fid_gen:.4f} vs copy={fid_copy:.4f}")
    ok = wins >= 2 and sum(l1_majorities) >= 2
    _report(10, ok, f"{wins}/3 seeds generator FID beats copy; "
                    f"L1 majority on held-out triplets in {sum(l1_majorities)}/3 seeds; "
                    + "; ".join(details))


# -- criterion 11: determinism and leakage ------------------------------------------------------------

def test_criterion_11_determinism_and_leakage(tmp_path):
    config = pipeline.ExperimentConfig(
        seed=5,
        phantom={"num_patients": 5, "scans_per_patient": 1, "num_slices": 9,
                 "height": 32, "width": 32, "boundary_amplitude_px": 1.2,
                 "drift_max_px": 1.0, "speckle_strength": 0.2,
                 "min_layer_thickness_px": 2},
        split={"subset_a_patients": ["p000", "p001", "p002", "p003"],
               "subset_b_patients": ["p004"], "train_patients": ["p000", "p001"],
               "val_patients": ["p002"], "test_patients": ["p003"]},
        settings=[1],
        stages={"interslice_aug": True},
        gan={"widths": [4, 8], "disc_widths": [4, 8], "max_epochs": 2,
             "fid_stop_threshold": 1e9, "batch_size": 2},
        seg={"widths": [4, 8, 8], "max_epochs": 2, "patience": 1, "batch_size": 4},
        metrics={"embedder": {"mode": "seeded_random_conv", "channels": [4, 8]},
                 "label_model": {"mode": "seeded_random_conv", "num_classes": 3}},
    )
    pipeline.run_pipeline(config, tmp_path / "a")
    pipeline.run_pipeline(config, tmp_path / "b")
    identical = all((tmp_path / "a" / "eval" / n).read_bytes()
                    == (tmp_path / "b" / "eval" / n).read_bytes()
                    for n in ("report.csv", "generator.csv", "report.json"))

    with pytest.raises(SplitError):
        phantom.SplitSpec(subset_a_patients=["p0"], subset_b_patients=["p0"]).validate()
    contaminated = phantom.DatasetSplit(
        train=[phantom.generate_phantom_stack(
            phantom.PhantomConfig(num_slices=3, height=32, width=32, seed=1,
                                  min_layer_thickness_px=2, boundary_amplitude_px=1.2,
                                  drift_max_px=1.0), "p9", "s_train")],
        test=[phantom.generate_phantom_stack(
            phantom.PhantomConfig(num_slices=3, height=32, width=32, seed=2,
                                  min_layer_thickness_px=2, boundary_amplitude_px=1.2,
                                  drift_max_px=1.0), "p9", "s_test")])
    with pytest.raises(SplitError):
        phantom.assert_no_patient_leakage(contaminated)

    cfg = segmentation.SegConfig(widths=(4, 8, 8), seed=0, batch_size=2,
                                 max_epochs=2, patience=1, dtype="float64")
    ckpt = segmentation.train_segmenter(contaminated.train[0].pairs,
                                        contaminated.train[0].pairs, cfg,
                                        training_patients={"p9"})
    guard = False
    try:
        pipeline._per_slice_dice(ckpt, contaminated.test)
    except LeakageError:
        guard = True
    ok = identical and guard
    _report(11, ok, f"byte-identical reports across fresh runs={identical}; "
                    f"contaminated split rejected={guard}")
