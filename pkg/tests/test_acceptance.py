"""Acceptance criteria 1-10, one test each.

Every test records a PASS/FAIL line (printed in the terminal summary by
conftest.py) before asserting, so a failing criterion still reports its
measured numbers. Criteria 6 and 10 share one pinned benchmark run.
"""
import math
import time
import warnings

import numpy as np
import pytest

from descatter3d.benchmark import BenchmarkConfig, run_benchmark
from descatter3d.dataset import CubePair, build_dataset, normalize_pair, split_dataset
from descatter3d.errors import ConfigurationWarning
from descatter3d.metrics import acquisition_time, false_positive_check
from descatter3d.neural3d import (
    NetworkConfig,
    batchnorm3d_backward,
    batchnorm3d_forward,
    build_network,
    conv3d_backward,
    conv3d_forward,
    convtranspose3d_backward,
    convtranspose3d_forward,
    maxpool3d,
    maxpool3d_backward,
    mse_loss,
)
from descatter3d.phantom import PhantomSpec, generate_phantom
from descatter3d.scatter import (
    NoiseParams,
    ScatterParams,
    apply_forward_model,
    build_spsf,
    convolve_plane,
    noiseless_forward,
    plane_rng,
    poisson_sample_array,
)
from descatter3d.tiling import plan_tiles, reconstruct
from descatter3d.trainer import TrainConfig, train
from descatter3d.volume import Volume

from test_config_cli import artifact_bytes
from test_neural3d import _directional_check, fd_grad, rel_max
from test_tiling import seam_discrepancy

RESULTS: dict[int, tuple[bool, str]] = {}

pytestmark = pytest.mark.acceptance


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# 1 ---------------------------------------------------------------------------------------

def test_c01_acquisition_time():
    pstpm = acquisition_time("PSTPM", (800, 800, 64), dwell_s=40e-6)
    tfm = acquisition_time("TFM", (800, 800, 64), exposure_s=0.5)
    ok = f"{pstpm:.1f}" == "1638.4" and f"{pstpm / 60:.1f}" == "27.3" and f"{tfm:.1f}" == "32.0"
    record(1, ok, f"PSTPM {pstpm:.1f} s ({pstpm / 60:.1f} min), TFM {tfm:.1f} s")


# 2 ---------------------------------------------------------------------------------------

def test_c02_forward_physics():
    rng = np.random.default_rng(2)
    worst_sum = worst_sym = 0.0
    for _ in range(100):
        p = ScatterParams(ell_s=rng.uniform(20, 200), sigma_b=rng.uniform(0.2, 0.6),
                          sigma_s0=rng.uniform(1.0, 4.0), k_s=rng.uniform(0, 0.2), truncation=rng.uniform(3, 5))
        k = build_spsf(rng.uniform(0, 60), p, 0.5).weights
        worst_sum = max(worst_sum, abs(k.sum() - 1))
        worst_sym = max(worst_sym, np.max(np.abs(k - k[::-1, ::-1])))

    # flux on interiors, before noise
    n, params = 160, ScatterParams()
    truth = np.zeros((n, n, 3), np.float32)
    for kz in range(3):
        r = build_spsf(2.0 + 0.5 * kz, params, 0.25).radius
        truth[r:n - r, r:n - r, kz] = rng.random((n - 2 * r, n - 2 * r))
    blurred = noiseless_forward(Volume(truth, (0.25, 0.25, 0.5), 2.0), params)
    flux = max(abs(blurred[:, :, kz].sum() - truth[:, :, kz].sum(dtype=np.float64)) / truth[:, :, kz].sum(dtype=np.float64)
               for kz in range(3))

    # backends
    fft_err = 0.0
    for z in (5.0, 30.0):
        kern = build_spsf(z, params, 0.5)
        plane = rng.random((70, 50))
        d = convolve_plane(plane, kern, "direct")
        f = convolve_plane(plane, kern, "fft")
        fft_err = max(fft_err, np.max(np.abs(d - f)) / np.max(np.abs(d)))

    # Poisson moments: mean and variance each within 5 standard errors
    moments_ok, notes = True, []
    for lam in (0.0, 4.0, 1000.0):
        x = poisson_sample_array(np.full(200_000, lam), plane_rng(7, int(lam))).astype(np.float64)
        m, v = x.mean(), x.var(ddof=1)
        if lam == 0:
            ok = not x.any()
        else:
            ok = abs(m - lam) <= 5 * math.sqrt(lam / x.size) and abs(v - lam) <= 5 * math.sqrt((lam + 2 * lam * lam) / x.size)
        moments_ok &= ok
        notes.append(f"lam={lam:g}: mean {m:.4f} var {v:.4f}")

    ok = worst_sum <= 1e-6 and worst_sym == 0 and flux <= 1e-4 and fft_err <= 1e-4 and moments_ok
    record(2, ok, f"sum err {worst_sum:.1e}, asym {worst_sym:.1e}, flux {flux:.1e}, fft/direct {fft_err:.1e}; "
                  + "; ".join(notes))


# 3 ---------------------------------------------------------------------------------------

def _layer_errors(rng):
    errs = {}
    x = rng.standard_normal((2, 2, 3, 3, 2))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal((2, 3, 3, 3, 2))
    gx, gw, gb = conv3d_backward(x, w, r)
    f = lambda: float(np.sum(conv3d_forward(x, w, b) * r))  # noqa: E731
    errs["conv3d"] = max(rel_max(gx, fd_grad(f, x)), rel_max(gw, fd_grad(f, w)), rel_max(gb, fd_grad(f, b)))

    x = rng.standard_normal((2, 2, 2, 2, 1))
    w = rng.standard_normal((2, 3, 2, 2, 2))
    r = rng.standard_normal((2, 3, 4, 4, 2))
    gx, gw, gb = convtranspose3d_backward(x, w, r)
    f = lambda: float(np.sum(convtranspose3d_forward(x, w, b) * r))  # noqa: E731
    errs["convtranspose3d"] = max(rel_max(gx, fd_grad(f, x)), rel_max(gw, fd_grad(f, w)), rel_max(gb, fd_grad(f, b)))

    x = rng.standard_normal((2, 3, 2, 2, 2))
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    r = rng.standard_normal(x.shape)
    _, cache = batchnorm3d_forward(x, gamma, beta, np.zeros(3), np.ones(3), True)
    gx, gg, gbeta = batchnorm3d_backward(r, gamma, cache)
    f = lambda: float(np.sum(batchnorm3d_forward(x, gamma, beta, np.zeros(3), np.ones(3), True)[0] * r))  # noqa: E731
    errs["batchnorm3d"] = max(rel_max(gx, fd_grad(f, x)), rel_max(gg, fd_grad(f, gamma)), rel_max(gbeta, fd_grad(f, beta)))

    x = rng.permutation(64).reshape(1, 1, 4, 4, 4).astype(np.float64)  # distinct values, no ties
    r = rng.standard_normal((1, 1, 2, 2, 2))
    out, idx = maxpool3d(x)
    f = lambda: float(np.sum(maxpool3d(x)[0] * r))  # noqa: E731
    errs["maxpool3d"] = rel_max(maxpool3d_backward(r, idx), fd_grad(f, x))

    p, t = rng.standard_normal((2, 1, 3, 3, 3)), rng.standard_normal((2, 1, 3, 3, 3))
    errs["mse"] = rel_max(mse_loss(p, t)[1], fd_grad(lambda: mse_loss(p, t)[0], p))
    return errs


def test_c03_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    errs = _layer_errors(rng)
    net = build_network(NetworkConfig(n_stages=2, base_channels=4, input_dims=(8, 8, 8)), 3).astype(np.float64)
    net.set_tensor("final.weight", rng.standard_normal((1, 4, 1, 1, 1)) * 0.3)
    e2e = _directional_check(net, rng.random((2, 1, 8, 8, 8)), rng.random((2, 1, 8, 8, 8)), rng)
    ok = max(errs.values()) < 1e-3 and e2e < 1e-2
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record(3, ok, f"{detail}; end-to-end {e2e:.1e} ({time.perf_counter() - t0:.0f} s)")


# 4 ---------------------------------------------------------------------------------------

def test_c04_architecture():
    rng = np.random.default_rng(4)
    cfg = NetworkConfig.full_scale()
    big = build_network(cfg, 0).eval()
    x = rng.random((1, 1) + cfg.input_dims).astype(np.float32)
    t0 = time.perf_counter()
    y = big.forward(x)
    secs = time.perf_counter() - t0
    desk = build_network(NetworkConfig(), 0).eval()
    xd = rng.random((2, 1, 32, 32, 16)).astype(np.float32)
    pooled, _ = maxpool3d(xd)
    up = convtranspose3d_forward(pooled, np.ones((1, 1, 2, 2, 2), np.float32))
    ok = (y.shape == x.shape and np.array_equal(y, x) and np.array_equal(desk.forward(xd), xd)
          and pooled.shape[2:] == (16, 16, 8) and up.shape[2:] == (32, 32, 16))
    record(4, ok, f"full-scale {cfg.input_dims} -> {y.shape[2:]} identity={np.array_equal(y, x)} "
                  f"({big.n_parameters():,} params, {secs:.0f} s); desk identity; pool/upsample x2")


# 5 ---------------------------------------------------------------------------------------

def test_c05_optimization():
    t0 = time.perf_counter()
    truth, _ = generate_phantom(PhantomSpec(dims=(64, 64, 16), n_dendrites=2, n_spines=6, seed=1, depth_offset=40))
    meas = apply_forward_model(truth, ScatterParams(), NoiseParams(50, seed=1))
    m = build_dataset([("a", meas, truth)], 5, (32, 32, 16), seed=0, train_fraction=0.8)  # 4 train, 1 val
    net = build_network(NetworkConfig(), 0)
    x, y = m.batch(m.indices("train"))
    before = mse_loss(net.forward(x, train=False), y)[0]
    net, tlog = train(m, net, TrainConfig(max_epochs=5, steps_per_epoch=100, lr=1e-4, early_stop_patience=10))
    after = mse_loss(net.forward(x, train=False), y)[0]

    # constructed plateau: target == input, so the zero-initialized correction is already optimal
    rng = np.random.default_rng(5)
    cubes = [CubePair(c, c.copy(), "p", (i, 0, 0), 0) for i, c in enumerate(rng.random((6, 8, 8, 4), dtype=np.float32))]
    plateau = split_dataset(cubes, 0.67)
    small = build_network(NetworkConfig(n_stages=1, base_channels=4, input_dims=(8, 8, 4)), 0)
    _, plog = train(plateau, small, TrainConfig(max_epochs=30, steps_per_epoch=5))
    ratio = after / before
    ok = len(tlog.steps) == 500 and ratio < 0.1 and plog.stop_reason == "early_stop" and len(plog.val) < 30
    record(5, ok, f"4-cube MSE {before:.4g} -> {after:.4g} (ratio {ratio:.3f}) in {len(tlog.steps)} steps; "
                  f"plateau stopped after {len(plog.val)} epochs ({time.perf_counter() - t0:.0f} s)")


# 6 and 10 share the pinned benchmark ----------------------------------------------------

@pytest.fixture(scope="module")
def benchmark():
    cfg = BenchmarkConfig()
    result, net, test_set = run_benchmark(cfg)
    return cfg, result, net, test_set


def test_c06_descattering_efficacy(benchmark):
    cfg, res, _, _ = benchmark
    n = res.recall_truth.total
    ok = (n >= 60 and res.recall_truth.recall == 1.0 and res.gain_pp >= 20.0 and res.train_seconds <= 1800)
    record(6, ok, f"{n} held-out spines; truth {res.recall_truth.summary()}, TFM input {res.recall_input.summary()}, "
                  f"network {res.recall_output.summary()}, gain {res.gain_pp:+.1f} pp; training {res.train_seconds:.0f} s "
                  f"(in-vivo reference: 49.8% -> 91.2%)")


def test_c10_false_positives(benchmark):
    cfg, _, net, test_set = benchmark
    t0 = time.perf_counter()
    synth, meas = [], []
    for i, s in enumerate(test_set):
        noise = NoiseParams(cfg.gain, seed=cfg.seed * 10007 + 5000 + i)
        plan = plan_tiles(s.truth.dims, net.config.input_dims, cfg.overlap)
        rep = false_positive_check(s.truth, s.measured, net, cfg.scatter, noise, s.ann, cfg.criteria, plan)
        synth.append(len(rep["synthetic"]["candidates"]))
        meas.append(len(rep["measured"]["candidates"]))
    record(10, sum(synth) == 0, f"off-annotation candidates at tau={cfg.criteria.contrast_ratio:g}: "
                                f"synthetic branch {sum(synth)} {synth}, measured branch {sum(meas)} {meas} "
                                f"({time.perf_counter() - t0:.0f} s)")


# 7 ---------------------------------------------------------------------------------------

def test_c07_tiling(trained_desk_net, measured_phantom):
    rng = np.random.default_rng(7)
    exact = True
    for _ in range(20):
        tile = tuple(int(v) for v in rng.choice([4, 8, 16], 3))
        dims = tuple(int(v) for v in rng.integers(3, 48, 3))
        ov = tuple(int(rng.integers(0, t // 2 + 1)) for t in tile)
        data = rng.random(dims).astype(np.float32)
        net = build_network(NetworkConfig(n_stages=1, base_channels=2, input_dims=tile), 0)
        out = reconstruct(Volume(data), net, plan_tiles(dims, tile, ov), percentile=None)
        exact &= np.array_equal(out.data, data)
    vol = measured_phantom.with_data(measured_phantom.data[:48, :48])
    ratio, grid = seam_discrepancy(vol, trained_desk_net)
    record(7, exact and ratio < 0.05, f"identity bit-exact over 20 random plans: {exact}; "
                                      f"seam discrepancy {100 * ratio:.2f}% of p99 on a {grid} plan")


# 8 ---------------------------------------------------------------------------------------

def test_c08_dataset_bookkeeping():
    rng = np.random.default_rng(8)
    sources = []
    for i in range(33):
        truth = Volume(rng.random((12, 12, 6), dtype=np.float32), (1.0, 1.0, 1.0), 10.0)
        sources.append((str(i), apply_forward_model(truth, ScatterParams(), NoiseParams(50, seed=i)), truth))
    m = build_dataset(sources, 134, (4, 4, 2), seed=0)
    counts = (len(m.records), len(m.indices("train")), len(m.indices("val")))
    exact = True
    norm = {sid: normalize_pair(meas, truth) for sid, meas, truth in sources}
    for i, rec in enumerate(m.records):
        sl = tuple(slice(c, c + s) for c, s in zip(rec.corner, (4, 4, 2)))
        x, y = m.get_pair(i)
        ni, nt, _ = norm[rec.source]
        exact &= x.tobytes() == ni.data[sl].tobytes() and y.tobytes() == nt.data[sl].tobytes()
    record(8, counts == (4422, 4200, 222) and exact, f"134 x 33 = {counts[0]} pairs, split {counts[1]}/{counts[2]}; "
                                                     f"simulate-then-crop bit-exact: {exact}")


# 9 ---------------------------------------------------------------------------------------

DETERMINISM_SETS = [
    "phantom.dims=[64,64,16]", "phantom.n_spines=6", "phantom.seed=9", "phantom.depth_offset=40.0",
    "dataset.cubes_per_source=12", "train.max_epochs=2", "train.steps_per_epoch=10", "train.lr=0.001",
]


def _pipeline(root):
    from descatter3d.cli import dispatch

    sets = [a for s in DETERMINISM_SETS for a in ("--set", s)] + ["--threads", "1"]
    steps = [
        ["phantom", "--out", f"{root}/p"],
        ["simulate", "--out", f"{root}/s", "--input", f"{root}/p/truth.dvol"],
        ["dataset", "--out", f"{root}/d", "--measured", f"{root}/s/measured.dvol", "--truth", f"{root}/p/truth.dvol"],
        ["train", "--out", f"{root}/t", "--dataset", f"{root}/d/dataset"],
        ["infer", "--out", f"{root}/i", "--model", f"{root}/t/model.dnet", "--input", f"{root}/s/measured.dvol"],
        ["eval", "--out", f"{root}/e", "--volume", f"{root}/i/output.dvol", "--annotations", f"{root}/p/annotations.csv",
         "--reference", f"{root}/p/truth.dvol"],
    ]
    return all(dispatch(s + sets) == 0 for s in steps)


def test_c09_determinism(tmp_path):
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConfigurationWarning)
        ran = _pipeline(tmp_path / "a") and _pipeline(tmp_path / "b")
    a, b = artifact_bytes(tmp_path / "a"), artifact_bytes(tmp_path / "b")
    differ = sorted(k for k in a if a.get(k) != b.get(k)) + sorted(set(b) - set(a))
    record(9, ran and not differ and len(a) > 10,
           f"{len(a)} artifacts compared (wall_ms column excluded), {len(differ)} differ "
           f"({time.perf_counter() - t0:.0f} s)")
