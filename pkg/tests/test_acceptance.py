"""Acceptance suite: one test per exit criterion, each at its stated
tolerance and runtime budget, with one printed pass line per criterion.

Run with `pytest tests/test_acceptance.py -v -s`.
"""

import time

import numpy as np
import pytest

from alan.cli import main
from alan.feature_store import read_parcel_map
from alan.metrics_eval import dice
from alan.parcel2segment import (
    SegmenterSpec,
    SnakeParams,
    absorb_enclaves,
    fit_interior,
    largest_interior_component,
    morph_close,
    segment,
    union_mask,
)
from alan.raptor_head import (
    RaptorParams,
    backward_patch,
    forward_patch,
    infer_parcel_map,
)
from alan.stego_objective import LossConfig, sample_pairs, total_loss
from alan.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    apply_standardize,
    standardize_stats,
    train,
)
from alan.view_knn import KnnConfig, build_index, classify, evaluate
from conftest import make_synthetic_dataset, region_mask, write_dataset
from oracles import (
    adam_trace_oracle,
    components_oracle,
    finite_diff_params,
    fit_interior_oracle,
    knn_oracle,
    max_rel_error,
)


def _passed(name):
    print(f"\n[acceptance] {name}: PASS")


def _e2e_loss_and_grads(params, feats_a, feats_b, pairs, cfg):
    fwd_a = [forward_patch(f, params) for f in feats_a]
    fwd_b = [forward_patch(f, params) for f in feats_b]
    loss, d_a, d_b = total_loss(pairs, feats_a, [p for p, _ in fwd_a],
                                feats_b, [p for p, _ in fwd_b], cfg)
    acc = [np.zeros_like(a) for a in params.arrays()]
    for (_, cache), d_p in zip(fwd_a + fwd_b, d_a + d_b):
        grads, _ = backward_patch(cache, d_p)
        for total_g, g in zip(acc, grads.arrays()):
            total_g += g
    return loss, RaptorParams.from_arrays(acc)


def test_gradient_correctness_100_instances():
    """total_loss o forward_patch vs central finite differences (1e-5),
    max relative error <= 1e-4 over 100 seeded instances, < 60 s."""
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(2, 9))
        k = int(rng.integers(2, 5))
        n = int(rng.integers(1, 7))
        params = RaptorParams.init(c, k, rng)
        feats_a = [rng.standard_normal((n, c)) for _ in range(2)]
        feats_b = [rng.standard_normal((n, c)) for _ in range(2)]
        pairs = sample_pairs(2, 2, rng)
        cfg = LossConfig()
        _, analytic = _e2e_loss_and_grads(params, feats_a, feats_b, pairs, cfg)
        fd = finite_diff_params(
            lambda p: _e2e_loss_and_grads(p, feats_a, feats_b, pairs, cfg)[0],
            params, h=1e-5)
        worst = max(worst, max_rel_error(analytic, fd))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-4, f"worst relative error {worst:.3e}"
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    _passed(f"gradient correctness (worst rel err {worst:.2e}, "
            f"{elapsed:.1f}s)")


def test_softmax_and_parcel_map_invariants_1000_forwards():
    """1000 random forwards: rows sum to 1 within 1e-6, labels < K, <10 s."""
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    for _ in range(1000):
        c = int(rng.integers(2, 9))
        k = int(rng.integers(2, 6))
        params = RaptorParams.init(c, k, rng)
        n = int(rng.integers(1, 13))
        probs, _ = forward_patch(5.0 * rng.standard_normal((n, c)), params)
        assert np.all(probs >= 0.0)
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) <= 1e-6
        hp, wp = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        labels = infer_parcel_map(rng.standard_normal((hp, wp, c)), params,
                                  hp * 2, wp * 2)
        assert labels.min() >= 0 and labels.max() < k
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    _passed(f"softmax/parcel-map invariants ({elapsed:.1f}s)")


def test_interior_fitting_oracle_100_fixtures():
    """fit_interior equals the brute-force scalar oracle exactly on 100
    random 8x8 fixtures with the 0.75/0.50/0.30 thresholds, < 10 s."""
    rng = np.random.default_rng(31)
    start = time.perf_counter()
    for _ in range(100):
        k = int(rng.integers(2, 6))
        n_frames = int(rng.integers(1, 6))
        maps = [rng.integers(0, k, size=(8, 8)).astype(np.int32)
                for _ in range(n_frames)]
        masks = [(rng.random((8, 8)) < rng.uniform(0.2, 0.8)).astype(np.uint8)
                 for _ in range(n_frames)]
        got = fit_interior(maps, masks, k, overlap_frac=0.75,
                           hit_rate=0.50, presence_rate=0.30)
        want = fit_interior_oracle(maps, masks, k, overlap_frac=0.75,
                                   hit_rate=0.50, presence_rate=0.30)
        assert got == want
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    _passed(f"interior-fitting oracle ({elapsed:.1f}s)")


def test_post_processing_chain():
    """(a) component with most interior IDs wins, (b) enclave cutoff 8 is
    inclusive, (c) radius-10 closing bridges 6 px and is idempotent,
    (d) segment output is one 4-connected component or empty. < 30 s."""
    start = time.perf_counter()

    # (a) most distinct interior IDs beats larger pixel area
    pm = np.zeros((4, 12), np.int32)
    pm[0, 0:2] = 1
    pm[0, 2:4] = 2
    pm[1, 0:4] = 3
    pm[0:4, 7:12] = 4
    interior = {1, 2, 3, 4}
    kept = largest_interior_component(union_mask(pm, interior), pm, interior)
    assert kept[0, 0] == 1 and kept[0, 8] == 0

    # (b) outside-adjacency 8 filled, 9 not
    mask = np.ones((6, 12), np.uint8)
    mask[0, 2:10] = 0  # 8 border pixels
    assert np.all(absorb_enclaves(mask, np.zeros_like(pm, shape=(6, 12)),
                                  cutoff=8) == 1)
    mask[0, 2:11] = 0  # 9 border pixels
    assert np.array_equal(
        absorb_enclaves(mask, np.zeros_like(pm, shape=(6, 12)), cutoff=8),
        mask)

    # (c) closing bridges a 6 px gap at radius 10 and is idempotent
    blobs = np.zeros((30, 13), np.uint8)
    blobs[4:10, 2:11] = 1
    blobs[16:22, 2:11] = 1
    closed = morph_close(blobs, 10)
    _, n = components_oracle(closed)
    assert n == 1
    assert np.all(closed >= blobs)
    assert np.array_equal(morph_close(closed, 10), closed)

    # (d) segment output is always one component or empty
    rng = np.random.default_rng(5)
    for _ in range(25):
        k = int(rng.integers(2, 6))
        labels = rng.integers(0, k, size=(16, 16)).astype(np.int32)
        ids = set(int(i) for i in
                  rng.choice(k, size=max(1, k // 2), replace=False))
        spec = SegmenterSpec(K=k, region_label="LV", interior_ids=ids,
                             enclave_cutoff=2, closing_radius=2,
                             snake=SnakeParams(max_iters=5))
        out = segment(labels, spec)
        _, n = components_oracle(out)
        assert n <= 1
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    _passed(f"post-processing chain ({elapsed:.1f}s)")


def test_end_to_end_synthetic_training():
    """8 synthetic sequences (T=40, 16x16 patches, C=8, one-hot regions +
    noise 0.05), K=8 head at the default recipe; segmenter fitted on the
    disk region scores mean DICE >= 0.90 on 4 held-out sequences and the
    loss descends. < 5 min single-threaded."""
    start = time.perf_counter()
    train_seqs, train_grids = make_synthetic_dataset(
        n_seqs=8, t=40, hp=16, wp=16, c=8, patch_size=4, noise=0.05, seed=101)
    test_seqs, test_grids = make_synthetic_dataset(
        n_seqs=4, t=40, hp=16, wp=16, c=8, patch_size=4, noise=0.05, seed=202)

    cfg = TrainConfig(K=8, seed=0)  # lr 5e-3, 40 epochs, 16-frame stride-2
    assert cfg.learning_rate == 5e-3
    assert cfg.epochs == 40
    assert cfg.frames_per_clip == 16 and cfg.frame_stride == 2
    params, report = train(train_seqs, cfg)
    assert report.epoch_losses[-1] < report.epoch_losses[0]

    mu, sigma = standardize_stats(train_seqs)

    def parcel_map_of(seq, frame):
        feats = apply_standardize(seq.patches[frame], mu, sigma)
        return infer_parcel_map(feats, params, seq.img_h, seq.img_w)

    maps = []
    masks = []
    for seq, grid in zip(train_seqs, train_grids):
        for frame in (0, 20):
            maps.append(parcel_map_of(seq, frame))
            masks.append(region_mask(grid, 1, seq.patch_size))
    interior = fit_interior(maps, masks, k=cfg.K)
    assert interior, "no interior parcels found for the disk region"

    spec = SegmenterSpec(K=cfg.K, region_label="R1",
                         interior_ids=frozenset(interior))
    scores = []
    for seq, grid in zip(test_seqs, test_grids):
        truth = region_mask(grid, 1, seq.patch_size)
        for frame in (0, 20):
            scores.append(dice(segment(parcel_map_of(seq, frame), spec), truth))
    mean_dice = float(np.mean(scores))
    elapsed = time.perf_counter() - start
    assert mean_dice >= 0.90, f"mean DICE {mean_dice:.4f}"
    assert elapsed < 300.0, f"took {elapsed:.1f}s"
    _passed(f"end-to-end synthetic training (mean DICE {mean_dice:.4f}, "
            f"loss {report.epoch_losses[0]:.3f} -> "
            f"{report.epoch_losses[-1]:.3f}, {elapsed:.0f}s)")


def test_dice_unit_values():
    """Identical 1.0, disjoint 0.0, half-overlap 0.5, both-empty 1.0."""
    a = np.zeros((4, 4), np.uint8)
    a[1:3, 1:3] = 1
    assert dice(a, a) == 1.0
    b = np.zeros((4, 4), np.uint8)
    b[0, 0] = 1
    assert dice(a, b) == 0.0
    a2 = np.zeros((4, 4), np.uint8)
    a2[0, 0] = a2[0, 1] = 1
    b2 = np.zeros((4, 4), np.uint8)
    b2[0, 1] = b2[0, 2] = 1
    assert dice(a2, b2) == 0.5
    assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    _passed("DICE unit values")


def test_knn_oracle_and_clusters():
    """200 random queries match brute force exactly on an M=50 index;
    separable 4-cluster set classifies at 100% for k=2 and k=10. < 5 s."""
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    classes = ("A2C", "A4C", "PLAX", "PSAX")
    descriptors = rng.standard_normal((50, 6))
    labels = [classes[int(rng.integers(4))] for _ in range(50)]
    index = build_index(descriptors, labels)
    for _ in range(200):
        q = rng.standard_normal(6)
        k = int(rng.integers(1, 11))
        assert classify(q, index, KnnConfig(k=k)).label == \
            knn_oracle(q, descriptors, labels, k, 0.07)

    centers = np.eye(8)[:4]
    train_d, train_l, test_d, test_l = [], [], [], []
    for i, name in enumerate(classes):
        for _ in range(12):
            train_d.append(centers[i] + 0.05 * rng.standard_normal(8))
            train_l.append(name)
            test_d.append(centers[i] + 0.05 * rng.standard_normal(8))
            test_l.append(name)
    cluster_index = build_index(np.array(train_d), train_l)
    for k in (2, 10):
        result = evaluate(cluster_index, np.array(test_d), test_l,
                          KnnConfig(k=k))
        assert result.total_accuracy == 1.0, f"k={k}"
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0, f"took {elapsed:.1f}s"
    _passed(f"kNN oracle + 4-cluster accuracy ({elapsed:.1f}s)")


def test_cli_determinism(tmp_path):
    """train-head, parcelize, segment and classify-views re-run with the
    same seed and --threads 1 produce bit-identical output files."""
    sequences, grids = make_synthetic_dataset(n_seqs=4, t=36, hp=8, wp=8,
                                              c=6, patch_size=2, seed=66)
    rng = np.random.default_rng(1)
    classes = ("A2C", "A4C", "PLAX", "PSAX")
    relabeled = []
    for i, seq in enumerate(sequences):
        center = np.eye(6)[i % 4]
        global_desc = center[None] + 0.05 * rng.standard_normal((seq.T, 6))
        from alan.feature_store import FeatureSequence
        relabeled.append(FeatureSequence(
            seq_id=seq.seq_id, patches=seq.patches,
            patch_size=seq.patch_size, img_h=seq.img_h, img_w=seq.img_w,
            global_desc=global_desc.astype(np.float32)))
    manifest = write_dataset(tmp_path / "data", relabeled, grids,
                             mask_frames=(0, 18),
                             view_labels=[classes[i % 4] for i in range(4)])

    def run(tag):
        out = tmp_path / tag
        assert main(["train-head", "--manifest", str(manifest), "--k", "6",
                     "--epochs", "2", "--seed", "3", "--threads", "1",
                     "--out", str(out / "train")]) == 0
        assert main(["parcelize", "--manifest", str(manifest),
                     "--checkpoint", str(out / "train" / "head.alanhead"),
                     "--feature-stats",
                     str(out / "train" / "feature_stats.yaml"),
                     "--frames", "0,18", "--seed", "3", "--threads", "1",
                     "--out", str(out / "parcels")]) == 0
        assert main(["fit-segments", "--manifest", str(manifest),
                     "--parcels", str(out / "parcels"), "--region", "LV",
                     "--closing-radius", "2", "--seed", "3",
                     "--out", str(out / "seg.yaml")]) == 0
        assert main(["segment", "--parcels", str(out / "parcels"),
                     "--spec", str(out / "seg.yaml"), "--seed", "3",
                     "--threads", "1", "--out", str(out / "masks")]) == 0
        assert main(["index-views", "--manifest", str(manifest),
                     "--out", str(out / "views.alanknn")]) == 0
        assert main(["classify-views", "--index", str(out / "views.alanknn"),
                     "--manifest", str(manifest), "--k", "1", "--seed", "3",
                     "--threads", "1", "--out", str(out / "pred.txt")]) == 0
        blobs = {}
        for f in sorted((out).rglob("*")):
            if f.is_file():
                blobs[str(f.relative_to(out))] = f.read_bytes()
        return blobs

    first = run("run1")
    second = run("run2")
    assert set(first) == set(second)
    diffs = [name for name in first
             if first[name] != second[name] and "train_report" not in name]
    assert diffs == [], f"non-deterministic artifacts: {diffs}"
    _passed("CLI determinism (bit-identical artifacts)")


def test_adam_two_step_oracle():
    """Two-step scalar Adam trace matches the reference loop to 1e-15."""
    cfg = TrainConfig(K=2, learning_rate=5e-3)
    params = RaptorParams.zeros(2, 2)
    state = AdamState.zeros(2, 2)
    g = 1.0
    grads = RaptorParams.zeros(2, 2)
    grads.b3 = np.array([g, g])
    trace = adam_trace_oracle(0.0, [g, g], lr=5e-3, b1=cfg.adam_beta1,
                              b2=cfg.adam_beta2, eps=cfg.adam_eps)
    for expected in trace:
        params, state = adam_step(params, grads, state, cfg)
        assert abs(params.b3[0] - expected) <= 1e-15
    _passed("Adam two-step oracle")
