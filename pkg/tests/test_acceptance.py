"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk pipeline (criteria 9, 10, 12 and 13) trains the small network on
a 32^3 phantom and takes several minutes per run on one CPU core.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from gradcheck import check_batchnorm, check_conv, check_conv_bn_relu, check_l1, check_network
from oracles import naive_ssim

from sdndti.cli import main
from sdndti.denoiser import AdamState, TrainConfig, adam_step, build_model
from sdndti.gradient_design import (
    condition_number,
    design_matrix,
    dsm6,
    optimize_dsm6,
    select_subsets_from_fixed,
    uniform_directions,
)
from sdndti.pipeline import estimator_from_config, phantom_acquisition, resolve_config, run_pipeline
from sdndti.quality_metrics import angular_mad, mae, psnr, ssim
from sdndti.selfsup import build_selfsup_pairs, subset_flags
from sdndti.tensor_model import TensorField, fit_tensor, synthesize_dwis
from sdndti.volume_io import GradientScheme, load_model, save_model

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"


@pytest.fixture(scope="module")
def desk_config():
    return resolve_config(DESK)


@pytest.fixture(scope="module")
def desk(desk_config):
    t0 = time.perf_counter()
    res = run_pipeline(desk_config)
    return res, time.perf_counter() - t0


def test_c01_direction_optimum(verdict):
    t0 = time.perf_counter()
    dirs = optimize_dsm6(seed=0, restarts=20)
    elapsed = time.perf_counter() - t0
    cond = condition_number(dirs)
    ok = cond <= 1.3228 + 0.008 and elapsed < 60
    assert verdict(1, "direction optimum", ok, f"cond {cond:.5f} in {elapsed:.1f} s")


def test_c02_subset_selection(verdict):
    t0 = time.perf_counter()
    table = uniform_directions(90, seed=0)
    plan = select_subsets_from_fixed(table, 3, cond_threshold=1.6)
    elapsed = time.perf_counter() - t0
    flat = [i for s in plan.subsets for i in s]
    conds = [condition_number(table[s]) for s in plan.subsets]
    ok = (
        plan.n_subsets == 3
        and len(set(flat)) == 18
        and max(conds) < 1.6
        and plan.n_candidates >= 10
        and elapsed < 120
    )
    detail = f"conds {[round(c, 4) for c in conds]}, {plan.n_candidates} candidates, {elapsed:.1f} s"
    assert verdict(2, "subset selection", ok, detail)


def test_c03_tensor_exactness(verdict):
    rng = np.random.default_rng(0)
    n = 10_000
    Q = np.linalg.qr(rng.normal(size=(n, 3, 3)))[0]
    lam = rng.uniform(0.1, 3.0, size=(n, 3))
    M = np.einsum("nij,nj,nkj->nik", Q, lam, Q)
    D = np.stack([M[:, 0, 0], M[:, 1, 1], M[:, 2, 2], M[:, 0, 1], M[:, 0, 2], M[:, 1, 2]], axis=1)
    tf = TensorField(D.reshape(100, 100, 1, 6))
    dirs = uniform_directions(30, seed=1)
    scheme = GradientScheme(np.r_[0.0, np.ones(30)], np.vstack([np.zeros(3), dirs]))
    sig = synthesize_dwis(tf, np.full(tf.dims, 1000.0), scheme)
    back = fit_tensor(sig, scheme).tensor.reshape(-1, 6)
    roundtrip = float((np.linalg.norm(back - D, axis=1) / np.linalg.norm(D, axis=1)).max())

    six = dsm6()
    s6 = GradientScheme(np.r_[0.0, np.ones(6)], np.vstack([np.zeros(3), six]))
    data = np.concatenate([np.full((50, 1, 1, 1), 100.0), rng.uniform(20, 90, (50, 1, 1, 6))], axis=3)
    got = fit_tensor(data, s6).tensor.reshape(-1, 6)
    want = np.linalg.solve(design_matrix(six), -np.log(data[:, 0, 0, 1:] / 100.0).T).T
    direct = float(np.abs(got - want).max() / np.abs(want).max())
    ok = roundtrip < 1e-8 and direct < 1e-12
    assert verdict(3, "tensor exactness", ok, f"roundtrip {roundtrip:.2e}, six-direction {direct:.2e}")


def test_c04_synthesis_identity(verdict):
    acq = phantom_acquisition((32, 32, 32), seed=0, snr=30.0)
    pairs = build_selfsup_pairs(acq.data, acq.scheme, acq.plan, acq.mask)
    flags = subset_flags(acq.data, acq.scheme, acq.plan, acq.mask)
    raw = acq.data.data
    dwi = acq.scheme.dwi_indices
    worst, n_checked = 0.0, 0
    for pair, subset, flagged in zip(pairs, acq.plan.subsets, flags):
        ok_vox = acq.mask.data & ~flagged
        for i in subset:
            a, b = pair.input[..., 1 + i][ok_vox], raw[..., dwi[i]][ok_vox]
            worst = max(worst, float(np.max(np.abs(a - b) / np.abs(b))))
            n_checked += a.size
    ok = worst < 1e-10 and n_checked > 0
    assert verdict(4, "synthesis identity", ok, f"max relative deviation {worst:.2e} over {n_checked} values")


def test_c05_gradient_correctness(verdict):
    rng = np.random.default_rng(2024)
    worst, n_shapes = 0.0, 20
    for _ in range(n_shapes):
        shape = tuple(int(v) for v in rng.integers(2, 6, size=3))
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        worst = max(
            worst,
            check_conv(rng, shape, cin, cout, 3),
            check_batchnorm(rng, shape, cin, True),
            check_batchnorm(rng, shape, cin, False),
            check_conv_bn_relu(rng, shape, cin, cout),
            check_l1(rng, shape, cout),
        )
    for _ in range(3):
        shape = tuple(int(v) for v in rng.integers(3, 6, size=3))
        worst = max(worst, check_network(rng, shape))
    ok = worst < 1e-3
    assert verdict(5, "gradient correctness", ok, f"max relative error {worst:.2e} over {n_shapes} shapes")


def test_c06_residual_identity(verdict):
    model = build_model(19, 8, 3, seed=3)
    model.params["L10.weight"][:] = 0
    model.params["L10.bias"][:] = 0
    x = np.random.default_rng(0).normal(scale=5.0, size=(1, 9, 7, 8, 19)).astype(np.float32)
    ok = np.array_equal(model.forward(x, training=False), x) and np.array_equal(model.forward(x, training=True), x)
    assert verdict(6, "residual identity", ok, "forward(x) == x bitwise" if ok else "output differs")


def test_c07_parameter_count(verdict):
    n = build_model(19, 192, 3).n_conv_weights
    ok = n == 12_140_928 and abs(n - 12e6) <= 1.2e6
    assert verdict(7, "parameter count", ok, f"{n:,} conv weights")


def _adam_reference(theta, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = 2.0 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
        out.append(theta)
    return out


def test_c08_adam_oracle(verdict):
    cfg = TrainConfig(learning_rate=0.05)
    params = {"theta": np.array([1.5])}
    state = AdamState()
    got = []
    for t in range(1, 101):
        adam_step(params, {"theta": 2 * params["theta"]}, state, t, cfg)
        got.append(float(params["theta"][0]))
    err = float(np.max(np.abs(np.array(got) - _adam_reference(1.5, 0.05, 100))))
    assert verdict(8, "Adam oracle", err < 1e-10, f"max trajectory deviation {err:.2e}")


def test_c09_desk_pipeline(desk, verdict):
    res, elapsed = desk
    raw, den = res.report.values["raw"], res.report.values["sdndti"]
    gain = den["PSNR"] - raw["PSNR"]
    v1_cut = 1 - den["V1"] / raw["V1"]
    fa_cut = 1 - den["FA"] / raw["FA"]
    checks = {"PSNR": gain >= 3.0, "V1": v1_cut >= 0.30, "FA": fa_cut >= 0.30, "time": elapsed < 900}
    detail = (
        f"PSNR {raw['PSNR']:.2f} -> {den['PSNR']:.2f} dB; "
        f"V1 {raw['V1']:.3f} -> {den['V1']:.3f} deg ({-100 * v1_cut:+.1f}%); "
        f"FA {raw['FA']:.4f} -> {den['FA']:.4f} ({-100 * fa_cut:+.1f}%); "
        f"{elapsed:.0f} s; failing: {[k for k, v in checks.items() if not v] or 'none'}"
    )
    assert verdict(9, "desk pipeline", all(checks.values()), detail)


def test_c10_averaging_gain(desk, verdict):
    values = desk[0].report.values
    singles = [values[f"denoised_{k}"]["PSNR"] for k in (1, 2, 3)]
    avg = values["sdndti"]["PSNR"]
    ok = avg >= max(singles)
    detail = f"average {avg:.2f} dB vs subsets {', '.join(f'{p:.2f}' for p in singles)}"
    assert verdict(10, "averaging gain", ok, detail)


def test_c11_metric_oracles(verdict):
    z = np.zeros((4, 4, 4))
    v = np.tile([1.0, 0, 0], (3, 3, 3, 1))
    w = np.tile([1.0, 1.0, 0] / np.sqrt(2), (3, 3, 3, 1))
    examples = [
        mae(z, z) == 0,
        mae(z, z + 0.01) == 0.01,
        psnr(z, z + 0.1) == 20.0,
        psnr(z, z) == np.inf,
        angular_mad(v, v) == 0,
        angular_mad(v, -v) == 0,
        abs(angular_mad(v, w) - 45.0) < 1e-12,
    ]
    rng = np.random.default_rng(11)
    a = rng.random((13, 13, 13))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    dev = abs(ssim(a, b) - naive_ssim(a, b))
    ok = all(examples) and dev < 1e-9 and abs(ssim(a, a) - 1) < 1e-12
    detail = f"{sum(examples)}/{len(examples)} examples exact, SSIM oracle deviation {dev:.1e}"
    assert verdict(11, "metric oracles", ok, detail)


def test_c12_reproducibility(desk, tmp_path, verdict):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(
        "data:\n  phantom: {shape: [20, 20, 20]}\n"
        "plan: {rotation_trials: 50}\n"
        "blocks: {size: 8, n_blocks: 2}\n"
        "model: {k: 2}\n"
        "train: {epochs: 2, learning_rate: 1.0e-3}\n"
    )
    for name in ("a", "b"):
        assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    same_report = (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    json.loads((tmp_path / "a" / "report.json").read_text())

    model = desk[0].model
    save_model(model, tmp_path / "m.sdnd")
    back = load_model(tmp_path / "m.sdnd")
    x = np.random.default_rng(12).normal(size=(1, 16, 16, 16, model.c)).astype(np.float32)
    same_forward = np.array_equal(model.forward(x, training=False), back.forward(x, training=False))
    ok = same_report and same_forward
    detail = f"report.json identical: {same_report}; save/load forward bitwise: {same_forward}"
    assert verdict(12, "reproducibility", ok, detail)


def test_c13_fine_tuning(desk, desk_config, verdict):
    ph = desk_config["data"]["phantom"]
    fresh = phantom_acquisition(ph["shape"], seed=1, snr=ph["snr"], n_b0=ph["n_b0"], design_seed=desk_config["seed"])
    pairs = build_selfsup_pairs(fresh.data, fresh.scheme, fresh.plan, fresh.mask)

    scratch = estimator_from_config(desk_config).fit_pairs(pairs)
    target = min(h["val_loss"] for h in scratch.history_)
    e_star = scratch.best_epoch_

    tuned = estimator_from_config(desk_config).fit_pairs(
        pairs, init_model=desk[0].model, callback=lambda rec: rec["val_loss"] <= target
    )
    reached = [h["epoch"] for h in tuned.history_ if h["val_loss"] <= target]
    e_tuned = reached[0] if reached else None
    ok = e_tuned is not None and e_tuned < e_star
    detail = f"from scratch best val {target:.5f} at epoch {e_star}; fine-tuned reaches it at epoch {e_tuned}"
    assert verdict(13, "fine-tuning", ok, detail)
