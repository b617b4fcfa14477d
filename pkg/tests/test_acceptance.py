"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line before asserting."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from crvos.cli import main
from crvos.config import ModelConfig
from crvos.data import SyntheticSpec, generate_synthetic, read_mask, write_mask
from crvos.geometry import downsample_mask, make_coord_channels
from crvos.metrics import boundary_f, default_tolerance, evaluate, jaccard
from crvos.model import CRVOS, audit, load_checkpoint, save_checkpoint
from crvos.propagation import benchmark, overlap, run_sequence
from crvos.training import Clip, overfit

from oracles import boundary_f_bruteforce, jaccard_sets
from test_geometry import block_mean_oracle
from test_model import finite_difference_check

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}")
        assert ok, f"criterion {number} failed: {detail}"

    return emit


def closed_form_coords(h, w):
    ys = np.array([0.0]) if h == 1 else -1 + 2 * np.arange(h) / (h - 1)
    xs = np.array([0.0]) if w == 1 else -1 + 2 * np.arange(w) / (w - 1)
    hr, wr = np.meshgrid(ys, xs, indexing="ij")
    d_max = math.sqrt((h > 1) + (w > 1))
    cd = np.full((h, w), -1.0) if d_max == 0 else 2 * np.sqrt(hr**2 + wr**2) / d_max - 1
    return hr, wr, cd


def test_criterion_01_geometry_exactness(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    coord_err = 0.0
    for _ in range(50):
        h, w = (int(v) for v in rng.integers(1, 65, 2))
        c = make_coord_channels(h, w, torch.float64)
        for got, want in zip((c.height_ramp, c.width_ramp, c.center_distance), closed_form_coords(h, w)):
            coord_err = max(coord_err, float(np.abs(got.numpy() - want).max()))
    mask_err = 0.0
    for _ in range(100):
        hb, wb = (int(v) for v in rng.integers(1, 5, 2))
        fg = rng.random((16 * hb, 16 * wb))
        soft = torch.as_tensor(np.stack([fg, 1 - fg]))
        got = downsample_mask(soft).numpy()
        want = block_mean_oracle(fg, 16)
        mask_err = max(mask_err, float(np.abs(got[0] - want).max()), float(np.abs(got[1] - (1 - want)).max()))
    elapsed = time.perf_counter() - t0
    ok = coord_err <= 1e-12 and mask_err <= 1e-6 and elapsed < 10
    verdict(1, "geometry exactness", ok,
            f"coord max err {coord_err:.1e}, block-mean max err {mask_err:.1e}, {elapsed:.1f}s")


def test_criterion_02_architecture_audit(verdict):
    a1, a3, a4 = (audit(CRVOS(ModelConfig(variant=v))) for v in ("I", "III", "IV"))
    ok = (a3["refine_modules"] == a4["refine_modules"] == 3
          and (a3["deconv_layers"], a3["bilinear_layers"]) == (3, 0)
          and (a4["deconv_layers"], a4["bilinear_layers"]) == (0, 3)
          and a3["refine_in_channels"][0] - a1["refine_in_channels"][0] == 5)
    verdict(2, "architecture audit", ok,
            f"III deconv/bilinear {a3['deconv_layers']}/{a3['bilinear_layers']}, IV "
            f"{a4['deconv_layers']}/{a4['bilinear_layers']}, first-module inputs I {a1['refine_in_channels'][0]} "
            f"vs III {a3['refine_in_channels'][0]}")


def test_criterion_03_shape_contract(verdict):
    rng = np.random.default_rng(3)
    models = {v: CRVOS(ModelConfig(variant=v)).eval() for v in ("I", "II", "III", "IV")}
    worst, shapes_ok = 0.0, True
    with torch.no_grad():
        for _ in range(20):
            h, w = (16 * int(v) for v in rng.integers(4, 17, 2))
            x = torch.randn(1, 3, h, w)
            for v, m in models.items():
                n = m.config.specifier_channels
                spec = torch.rand(1, n, h // 16, w // 16) if n else None
                out = m(x, spec)
                shapes_ok &= tuple(out.shape) == (1, 2, h, w)
                worst = max(worst, float((out.sum(1) - 1).abs().max()))
    verdict(3, "shape contract", shapes_ok and worst <= 1e-5,
            f"20 sizes x 4 variants, shapes ok={shapes_ok}, max |fg+bg-1| {worst:.1e}")


def test_criterion_04_gradient_check(verdict):
    worst, n = finite_difference_check(seed=0, fraction=0.01, step=1e-5)
    verdict(4, "gradient check", worst < 1e-3, f"{n} parameters, worst relative error {worst:.2e}")


def test_criterion_05_overfit_oracle(verdict):
    t0 = time.perf_counter()
    rec = generate_synthetic(SyntheticSpec(canvas=(64, 64), num_targets=1, size=20, length=4, seed=3))
    torch.manual_seed(0)
    model = CRVOS(ModelConfig(variant="III", seed=0))
    losses = overfit(model, Clip(rec.frames, rec.masks.astype(np.int64)), updates=500, lr=1e-3)
    first_below = next((i + 1 for i, v in enumerate(losses) if v < 0.05), None)
    res = evaluate(run_sequence(rec.frames, rec.masks[0], model), rec.masks, 1)
    elapsed = time.perf_counter() - t0
    ok = first_below is not None and res.mean_J >= 0.9 and res.mean_F >= 0.8 and elapsed < 600
    verdict(5, "overfit oracle", ok,
            f"loss<0.05 at update {first_below}, final {losses[-1]:.4f}; J {res.mean_J:.3f} F {res.mean_F:.3f}; "
            f"{elapsed:.0f}s")


def square(h, w, y0, x0, size):
    m = np.zeros((h, w), bool)
    m[y0:y0 + size, x0:x0 + size] = True
    return m


def test_criterion_06_metric_oracles(verdict):
    rng = np.random.default_rng(6)
    worst_j = worst_f = 0.0
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 65, 2))
        density = rng.uniform(0.05, 0.95)
        a, b = rng.random((h, w)) < density, rng.random((h, w)) < density
        if rng.random() < 0.5:  # blobby pairs too
            a, b = square(h, w, *rng.integers(0, max(h, 1), 2), int(rng.integers(1, 40))), \
                square(h, w, *rng.integers(0, max(h, 1), 2), int(rng.integers(1, 40)))
        tol = default_tolerance((h, w))
        worst_j = max(worst_j, abs(jaccard(a, b) - jaccard_sets(a, b)))
        worst_f = max(worst_f, abs(boundary_f(a, b) - boundary_f_bruteforce(a, b, tol)))
    sq = square(40, 40, 5, 5, 20)
    gt = square(20, 20, 0, 0, 10)
    half = np.zeros_like(gt)
    half[:5] = gt[:5]
    big = square(80, 80, 20, 20, 30)
    tol = 2
    analytic = [
        jaccard(sq, sq) == 1.0,
        jaccard(square(20, 20, 0, 0, 5), square(20, 20, 10, 10, 5)) == 0.0,
        jaccard(half, gt) == 0.5,
        boundary_f(sq, sq) == 1.0,
        boundary_f(np.roll(big, tol, axis=1), big, tol) == 1.0 and boundary_f(np.roll(big, tol + 2, axis=1), big, tol) < 1.0,
        boundary_f(np.zeros_like(sq), sq) == 0.0,
    ]
    ok = worst_j <= 1e-9 and worst_f <= 1e-9 and all(analytic)
    verdict(6, "metric oracle equivalence", ok,
            f"200 pairs, max |dJ| {worst_j:.1e}, max |dF| {worst_f:.1e}; analytic {sum(analytic)}/6")


def test_criterion_07_ablation_direction(verdict, tmp_path):
    t0 = time.perf_counter()
    out = tmp_path / "ablate"
    code = main(["ablate", "--config", str(ROOT / "configs" / "ablation.yaml"), "--seeds", "0", "1", "2",
                 "--out", str(out), "--log-level", "WARNING"])
    assert code == 0
    table = json.loads((out / "ablation.json").read_text())
    jf = {r["variant"]: r["J&F"] for r in table["rows"]}
    elapsed = time.perf_counter() - t0
    ok = jf["III"] >= jf["II"] >= jf["I"] and jf["III"] >= jf["IV"] and elapsed < 3600
    per_seed = {v: [round(100 * r["JF"], 1) for r in rows] for v, rows in table["per_seed"].items()}
    verdict(7, "ablation direction", ok,
            f"median J&F I {jf['I']} II {jf['II']} III {jf['III']} IV {jf['IV']}; per seed {per_seed}; "
            f"{elapsed / 60:.1f} min")


def test_criterion_08_multi_target_contract(verdict):
    rec = generate_synthetic(SyntheticSpec(canvas=(64, 64), num_targets=3, size=12, length=6, seed=8))
    model = CRVOS(ModelConfig(variant="III", seed=1))
    model.calls.clear()
    first = run_sequence(rec.frames, rec.masks[0], model)
    steps = len(rec) - 1
    enc, dec = model.calls["encode"], model.calls["decode"]
    counts_ok = enc == steps and dec == 3 * steps
    again = run_sequence(rec.frames, rec.masks[0], model)
    rerun_ok = all(np.array_equal(a, b) for a, b in zip(first, again))
    tied = torch.full((2, 8, 8), 0.5)
    ties = [overlap([tied, tied.clone(), tied.clone()]) for _ in range(5)]
    tie_ok = all(np.array_equal(t, ties[0]) for t in ties) and (ties[0] == 1).all()
    verdict(8, "multi-target contract", counts_ok and rerun_ok and tie_ok,
            f"{steps} frames x 3 targets: encode {enc}, decode {dec}; reruns identical {rerun_ok}; ties -> lowest index {tie_ok}")


def test_criterion_09_benchmark_plumbing(verdict, tmp_path):
    ck = tmp_path / "ck.pt"
    save_checkpoint(ck, CRVOS(ModelConfig(variant="III")))
    out = tmp_path / "eval"
    config = ROOT / "configs" / "quickstart.yaml"
    assert main(["eval", "--config", str(config), "--checkpoint", str(ck), "--out", str(out),
                 "--log-level", "WARNING"]) == 0
    report = json.loads((out / "report.json").read_text())
    schema_ok = report["columns"] == ["sequence", "fps", "J", "F", "J&F"] and all(
        r["fps"] is not None and r["fps"] > 0 for r in report["rows"] + [report["mean"]])
    rec = generate_synthetic(SyntheticSpec(canvas=(64, 64), num_targets=2, size=12, length=40, seed=9))
    model, _ = load_checkpoint(ck)
    runs = [benchmark(rec.frames, rec.masks[0], model, warmup=5) for _ in range(2)]
    spread = abs(runs[0].fps - runs[1].fps) / min(r.fps for r in runs)
    frames_ok = all(r.frames_processed == 35 for r in runs)
    verdict(9, "benchmark plumbing", schema_ok and spread <= 0.2 and frames_ok,
            f"report mean fps {report['mean']['fps']}; bench fps {runs[0].fps:.1f} vs {runs[1].fps:.1f} "
            f"({100 * spread:.1f}% apart); frames_processed {[r.frames_processed for r in runs]} of 40-5")


def test_criterion_10_round_trips(verdict, tmp_path):
    model = CRVOS(ModelConfig(variant="II", seed=10))
    torch.manual_seed(0)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p))
    save_checkpoint(tmp_path / "ck.pt", model, step=3)
    loaded, payload = load_checkpoint(tmp_path / "ck.pt")
    a, b = model.state_dict(), loaded.state_dict()
    ck_ok = a.keys() == b.keys() and all(torch.equal(a[k], b[k]) and a[k].dtype == b[k].dtype for k in a)
    ck_ok &= loaded.config == model.config and payload["step"] == 3
    rng = np.random.default_rng(10)
    mask_ok = True
    for i in range(20):
        labels = rng.integers(0, 256 if i % 2 else 8, tuple(rng.integers(1, 50, 2)))
        write_mask(tmp_path / f"m{i}.png", labels)
        mask_ok &= np.array_equal(read_mask(tmp_path / f"m{i}.png"), labels)
    verdict(10, "round-trips", ck_ok and mask_ok, f"checkpoint bit-exact {ck_ok}; 20 masks label-exact {mask_ok}")
