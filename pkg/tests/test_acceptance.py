"""End-to-end acceptance suite.

Each test covers one release criterion at its stated tolerance; the rest
of the test tree covers the same code paths at finer granularity.
"""

import filecmp
import itertools
import json
import os
import time

import numpy as np
import pytest
from click.testing import CliRunner

from flimct import classify, flim, preprocess
from flimct.classify import ConfusionMatrix, make_splits
from flimct.cli import main
from flimct.flim import (
    ConvLayer,
    ConvLayerSpec,
    Marker,
    MarkerSet,
    NormalizationStats,
    PatchSpec,
)
from flimct.volcore import Volume


# ---------------------------------------------------------------------------
# shared synthetic corpus (64^3, 24 normal + 24 abnormal, seed 0)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    data = str(root / "data")
    splits = str(root / "splits.json")
    runner = CliRunner()
    t0 = time.monotonic()
    res = runner.invoke(main, ["synth", "--n-normal", "24", "--n-abnormal", "24",
                               "--dims", "64", "--seed", "0", "--out", data])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["splits", "--data", data, "--n-splits", "5",
                               "--seed", "0", "--out", splits])
    assert res.exit_code == 0, res.output
    return {"root": root, "data": data, "splits": splits, "t0": t0}


def run_train(corpus, split_index, out):
    res = CliRunner().invoke(main, [
        "train", "--data", corpus["data"], "--splits", corpus["splits"],
        "--split-index", str(split_index),
        "--markers", os.path.join(corpus["data"], "markers"),
        "--out", out])
    assert res.exit_code == 0, res.output


def test_e2e_synthetic_protocol(corpus):
    """Synthetic analogue of the clinical protocol: 5 stratified splits,
    default two-layer architecture, mean test accuracy >= 0.90 and mean
    kappa >= 0.80, all under a 10 minute budget."""
    models = corpus["root"] / "models"
    for i in range(5):
        run_train(corpus, i, str(models / f"split_{i}"))
    report_path = str(corpus["root"] / "report.json")
    res = CliRunner().invoke(main, ["eval", "--data", corpus["data"],
                                    "--splits", corpus["splits"],
                                    "--models", str(models),
                                    "--out", report_path])
    assert res.exit_code == 0, res.output
    with open(report_path) as f:
        report = json.load(f)
    elapsed = time.monotonic() - corpus["t0"]
    assert report["mean_accuracy"] >= 0.90, report
    assert report["mean_kappa"] >= 0.80, report
    assert elapsed < 600.0, f"pipeline took {elapsed:.0f}s"


def test_cmd_train_deterministic(corpus):
    """Two training runs with identical inputs write byte-identical files."""
    out_a = str(corpus["root"] / "det_a")
    out_b = str(corpus["root"] / "det_b")
    run_train(corpus, 0, out_a)
    run_train(corpus, 0, out_b)
    for fname in ("model.json", "svm.json"):
        assert filecmp.cmp(os.path.join(out_a, fname),
                           os.path.join(out_b, fname), shallow=False), fname


# ---------------------------------------------------------------------------
# convolution oracle
# ---------------------------------------------------------------------------

def naive_forward(vol, layer):
    """Per-voxel, per-tap reference for conv_forward."""
    dx, dy, dz = vol.dims
    m = vol.channels
    spec = layer.spec
    stats = layer.stats
    normed = (vol.data - stats.mu) / (stats.sigma + stats.epsilon)
    offs = flim.patch_offsets(spec.patch)
    k = layer.kernels.shape[0]
    acts = np.zeros((dz, dy, dx, k))
    for z in range(dz):
        for y in range(dy):
            for x in range(dx):
                patch = np.zeros(len(offs) * m)
                for t, (oz, oy, ox) in enumerate(offs):
                    zz, yy, xx = z + oz, y + oy, x + ox
                    if 0 <= xx < dx and 0 <= yy < dy and 0 <= zz < dz:
                        patch[t * m:(t + 1) * m] = normed[zz, yy, xx]
                acts[z, y, x] = np.maximum(layer.kernels @ patch + layer.biases,
                                           0.0)
    stride, size = spec.pool_stride, spec.pool_size
    out_dims = tuple(-(-n // stride) for n in (dz, dy, dx))
    pooled = np.empty(out_dims + (k,))
    for z in range(out_dims[0]):
        for y in range(out_dims[1]):
            for x in range(out_dims[2]):
                win = acts[z * stride:z * stride + size,
                           y * stride:y * stride + size,
                           x * stride:x * stride + size]
                pooled[z, y, x] = win.reshape(-1, k).max(axis=0)
    return pooled


def random_layer(rng, m, dilation, pool):
    taps = 27 * m
    kernels = rng.normal(size=(2, taps))
    kernels /= np.linalg.norm(kernels, axis=1)[:, None]
    return ConvLayer(
        spec=ConvLayerSpec(n_kernels=2, patch=PatchSpec((3, 3, 3), dilation),
                           pool_stride=pool, kmeans_k=2, seed=0),
        stats=NormalizationStats(mu=rng.normal(size=m),
                                 sigma=np.abs(rng.normal(size=m)) + 0.2),
        kernels=kernels,
        biases=rng.normal(size=2))


def test_convolution_oracle():
    """100 random dilated conv + pool cases against a triple-loop oracle."""
    rng = np.random.default_rng(0)
    worst = 0.0
    for case in range(100):
        dims = tuple(int(d) for d in rng.integers(4, 11, size=3))
        m = int(rng.integers(1, 4))
        dilation = int(rng.choice([1, 3]))
        pool = int(rng.choice([1, 4]))
        vol = Volume(rng.normal(size=(dims[2], dims[1], dims[0], m)))
        layer = random_layer(rng, m, dilation, pool)
        got = flim.conv_forward(vol, layer).data
        want = naive_forward(vol, layer)
        assert got.shape == want.shape, f"case {case}"
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst <= 1e-5, f"max abs error {worst}"


# ---------------------------------------------------------------------------
# kernel and normalization properties
# ---------------------------------------------------------------------------

def marker_corpus(rng, n_images=2):
    images, msets = [], []
    for i in range(n_images):
        data = rng.normal(50.0, 5.0, size=(14, 14, 14, 1))
        data[4:9, 4:9, 4:9, 0] += 120.0
        images.append(Volume(data))
        msets.append(MarkerSet(volume_id=f"img_{i}", markers=[
            Marker(label="abnormal", voxels=[(6, 6, 6), (5, 6, 6), (7, 6, 7)]),
            Marker(label="normal", voxels=[(1, 1, 1), (12, 2, 11), (2, 12, 2)]),
        ]))
    return images, msets


def test_kernel_properties():
    """Trained kernels are unit norm; the reduced bank is orthogonal."""
    rng = np.random.default_rng(1)
    images, msets = marker_corpus(rng)
    spec = ConvLayerSpec(n_kernels=2, patch=PatchSpec((3, 3, 3), 1),
                         pool_stride=2, kmeans_k=2, seed=0)
    # 2 images x 2 markers x 2 centroids = 8 candidates > 2 kernels,
    # which forces the reduction path
    layer = flim.train_layer(images, msets, spec, prior=[])
    norms = np.linalg.norm(layer.kernels, axis=1)
    assert np.abs(norms - 1.0).max() <= 1e-9
    gram = layer.kernels @ layer.kernels.T
    off_diag = gram - np.diag(np.diag(gram))
    assert np.abs(off_diag).max() <= 1e-6


def test_normalization_centers_marker_patches():
    rng = np.random.default_rng(2)
    for m in (1, 2, 3):
        patches = rng.normal(3.0, 2.0, size=(40, 27 * m))
        stats = flim.compute_norm_stats(patches, channels=m)
        normed = flim.normalize_patches(patches, stats)
        per_channel = normed.reshape(40, -1, m).mean(axis=(0, 1))
        assert np.abs(per_channel).max() <= 1e-6


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------

def test_standardization_20_volumes():
    cfg = preprocess.StandardizerConfig()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = 16 ** 3
        n_high = n // 3
        values = np.concatenate([rng.normal(120.0, 10.0, n - n_high),
                                 rng.normal(900.0, 10.0, n_high)])
        rng.shuffle(values)
        vol = Volume(values.reshape(16, 16, 16, 1))
        out = preprocess.standardize(vol, None, cfg)
        h = preprocess.compute_histogram(out, None, cfg)
        o1, o2 = preprocess.find_summits(h, cfg)
        assert abs(o1 - cfg.targets[0]) <= 2 * h.bin_width, seed
        assert abs(o2 - cfg.targets[1]) <= 2 * h.bin_width, seed

        again = preprocess.standardize(out, None, cfg)
        h2 = preprocess.compute_histogram(again, None, cfg)
        a1, a2 = preprocess.find_summits(h2, cfg)
        assert abs(a1 - cfg.targets[0]) <= 2 * h2.bin_width, seed
        assert abs(a2 - cfg.targets[1]) <= 2 * h2.bin_width, seed


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_metrics_oracle():
    k = classify.cohen_kappa(ConfusionMatrix(np.array([[45, 5], [5, 45]])))
    assert abs(k - 0.8) <= 1e-12

    rng = np.random.default_rng(3)
    checked = 0
    while checked < 1000:
        c = rng.integers(0, 100, size=(2, 2))
        if c.sum() == 0:
            continue
        checked += 1
        cm = ConfusionMatrix(c)
        total = c.sum()
        acc = (c[0, 0] + c[1, 1]) / total
        assert abs(classify.accuracy(cm) - acc) <= 1e-12
        pe = (c[0].sum() * c[:, 0].sum() + c[1].sum() * c[:, 1].sum()) / total ** 2
        want = 0.0 if pe == 1.0 else (acc - pe) / (1 - pe)
        assert abs(classify.cohen_kappa(cm) - want) <= 1e-12


# ---------------------------------------------------------------------------
# SVM
# ---------------------------------------------------------------------------

def test_svm_criteria():
    # separable toy sets reach perfect training accuracy
    rng = np.random.default_rng(4)
    for trial in range(5):
        a = rng.normal([-2.0] * 3, 0.2, size=(8, 3))
        b = rng.normal([2.0] * 3, 0.2, size=(8, 3))
        X = np.vstack([a, b])
        y = np.array([-1.0] * 8 + [1.0] * 8)
        model = classify.train_svm(X, y, C=100.0)
        assert (classify.predict_batch(model, X) == y).all(), trial

    # dual objective within 1e-4 of a brute-force grid search on a 6-point set
    X = rng.normal(size=(6, 2))
    y = np.array([-1.0, -1.0, -1.0, 1.0, 1.0, 1.0])
    tol = 1e-6
    model = classify.train_svm(X, y, C=1.0, tol=tol, max_iters=100_000)
    Xs = (X - model.scaler_mean) / (model.scaler_std + classify.SCALER_EPS)
    Xa = np.hstack([Xs, np.ones((6, 1))])
    grid = np.linspace(0.0, 1.0, 11)
    combos = np.array(list(itertools.product(grid, repeat=6)))
    W = combos * y @ Xa
    oracle = (combos.sum(axis=1) - 0.5 * (W ** 2).sum(axis=1)).max()
    primal, dual = classify.svm_objectives(Xa, y, model.alpha, 1.0)
    assert dual >= oracle - 1e-4
    assert primal - dual <= 1e-4 * (1.0 + abs(primal))

    # KKT residual below tol on every training point
    assert classify.kkt_residuals(Xa, y, model.alpha, 1.0).max() <= tol


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def test_split_integrity_1000_plans():
    patients = ([(f"n{i}", -1) for i in range(24)] +
                [(f"a{i}", 1) for i in range(24)])
    all_ids = {pid for pid, _ in patients}
    n_checked = 0
    for seed in range(200):
        for plan in make_splits(patients, 5, seed=seed):
            n_checked += 1
            subsets = [set(plan.test_ids), set(plan.svm_train_ids),
                       set(plan.flim_marker_ids), set(plan.flim_validation_ids)]
            union = set()
            for s in subsets:
                assert not (union & s), seed
                union |= s
            assert union == all_ids, seed
            for prefix in ("n", "a"):
                n_test = len([i for i in plan.test_ids if i.startswith(prefix)])
                assert abs(n_test - 12) <= 1, seed
            assert len(plan.flim_marker_ids) == 3
            assert len(plan.flim_validation_ids) == 3
            assert all(i.startswith("a") for i in
                       plan.flim_marker_ids + plan.flim_validation_ids)
    assert n_checked == 1000
