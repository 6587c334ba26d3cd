"""Acceptance checks, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line (also repeated in the
terminal summary). The trend and U-Net attack checks are slow: about 20 and
3 minutes on one CPU core.
"""

import json
import math

import numpy as np
import pytest
import torch
import yaml

from semfl.attack import AttackConfig, init_dummy, matching_loss, recover_gradient, sweep_alpha
from semfl.cli import EXIT_OK, run
from semfl.config import sub_seed
from semfl.datagen import (
    ClientDataset,
    NoiseConfig,
    SplitPlan,
    build_experiment_splits,
    class_mean_tolerance,
    generate_corpus,
    render_sem,
)
from semfl.experiments import run_matrix, toy_oracle_gate
from semfl.fed import WALL_CLOCK_FIELDS, ClientState, TrainConfig, local_update, run_federated, train_centralized
from semfl.metrics import evaluate_reconstruction, iou, mse_norm, psnr, ssim
from semfl.model import GradientEstimate, ModelSpec, build_model, compute_gradients
from semfl.snapshot import weights_digest

DESK = ModelSpec(height=64, width=64, depth=2, base_channels=8)


def _paper_splits(seed, per_client=10):
    samples = generate_corpus(10 * per_client, (64, 64), seed=seed)
    return {d.subset_name: d for d in build_experiment_splits(samples, SplitPlan.paper(per_client))}


def test_criterion_1_fedavg_cl_equivalence(verdict):
    splits = _paper_splits(0, per_client=4)
    cfg = TrainConfig(learning_rate=0.1, batch_size=2, rounds=3, seed=5)
    init = build_model(DESK, 5)
    cl, cl_rec = train_centralized(splits["A"], DESK, cfg, splits["J"], init=init)
    fl, fl_rec = run_federated([ClientState(1, splits["A"])], DESK, cfg, splits["J"], init=init)
    rel = max(float((fl.entries[n] - cl.entries[n]).norm() / cl.entries[n].norm()) for n in cl.names)
    same_metrics = [r.metrics for r in fl_rec] == [r.metrics for r in cl_rec]
    verdict(1, rel <= 1e-6 and same_metrics, f"max relative weight difference {rel:.2e}, identical hold-out metrics: {same_metrics}")


def test_criterion_2_gradient_recovery_exact(verdict):
    splits = _paper_splits(1, per_client=4)
    cfg = TrainConfig(learning_rate=0.01, batch_size=4, rounds=1, attack_compatible=True, seed=1)
    clients = [ClientState(i + 1, splits[n]) for i, n in enumerate("ABC")]
    run_federated(clients, DESK, cfg)
    worst = 0.0
    for c in clients:
        (_, before, after), = c.update_log
        rec = recover_gradient(before, after, cfg.learning_rate)
        cap = compute_gradients(before, c.dataset.samples)
        for n in rec.names:
            err = float((rec.entries[n] - cap.entries[n]).norm() / cap.entries[n].norm())
            worst = max(worst, err)
    verdict(2, worst <= 1e-5, f"worst per-tensor relative error {worst:.2e} over {len(clients)} clients")


TREND_SEEDS = (0, 1, 2)
TREND_SPEC = ModelSpec(height=64, width=64, depth=2, base_channels=8, activation="tanh", dtype="float32")
TREND_EPOCHS = 40


def test_criterion_3_client_count_trend(verdict):
    finals: dict[str, list[dict]] = {}
    for seed in TREND_SEEDS:
        splits = _paper_splits(sub_seed(seed, "dataset"))
        cfg = TrainConfig(learning_rate=0.1, batch_size=2, rounds=TREND_EPOCHS, seed=sub_seed(seed, "training"))
        records = run_matrix(splits, TREND_SPEC, cfg, client_counts=(1, 3, 9), model_seed=sub_seed(seed, "model"))
        for run_id, recs in records.items():
            finals.setdefault(run_id, []).append(recs[-1].metrics)
    mean = {k: {m: float(np.mean([r[m] for r in v])) for m in ("iou", "mse", "ssim")} for k, v in finals.items()}
    cl10, cl90 = mean["CL-A"]["iou"], mean["CL-K"]["iou"]
    fl1, fl3, fl9 = (mean[f"FL-{k}"]["iou"] for k in (1, 3, 9))
    checks = {
        "CL-90 >= FL-9": cl90 >= fl9,
        "FL-9 - CL-10 >= 0.02": fl9 - cl10 >= 0.02,
        "FL-9 >= FL-3 >= FL-1": fl9 >= fl3 >= fl1,
    }
    triple = mean["FL-9"]
    detail = (
        f"mean final IoU CL-10 {cl10:.4f} FL-1 {fl1:.4f} FL-3 {fl3:.4f} FL-9 {fl9:.4f} CL-90 {cl90:.4f}; "
        + ", ".join(f"{k}: {v}" for k, v in checks.items())
        + f"; FL-9 triple IoU {triple['iou']:.3f} MSE {triple['mse']:.3f} SSIM {triple['ssim']:.3f}"
    )
    verdict(3, all(checks.values()), detail)


def test_criterion_4_toy_oracle(verdict):
    errs = [toy_oracle_gate(seed) for seed in (0, 1, 2)]
    verdict(4, max(errs) < 1e-6, f"toy attack reconstruction MSE max {max(errs):.2e}")


def test_criterion_5_unet_attack(verdict):
    toy_oracle_gate(0)  # the gate must pass before a U-Net result is reported
    truth = generate_corpus(1, (64, 64), seed=11)[0]
    before = build_model(DESK, 0)
    lr = 0.01
    after = local_update(ClientState(1, ClientDataset("victim", [truth])), before, TrainConfig(learning_rate=lr, batch_size=1))
    target = recover_gradient(before, after, lr)
    cfg = AttackConfig(attack_optimizer="lbfgs", attack_lr=1.0, iterations=10, snapshot_every=0, seed=0)
    reports = sweep_alpha(target, before, cfg, truth, alphas=(0.0, 0.25, 0.5, 0.75, 1.0))
    best = reports[0]
    baseline = evaluate_reconstruction(init_dummy(cfg, 64, 64)[0][0, 0].numpy(), truth)
    ok = best.metrics.ssim > 0.5 and best.metrics.psnr > 12 and baseline.ssim < 0.1
    verdict(
        5,
        ok,
        f"best alpha {best.alpha}: SSIM {best.metrics.ssim:.3f} PSNR {best.metrics.psnr:.2f} dB; "
        f"random baseline SSIM {baseline.ssim:.3f} PSNR {baseline.psnr:.2f} dB",
    )


def test_criterion_6_metric_identities(verdict, rng):
    a = rng.random((32, 32))
    m = (a > 0.5).astype(np.uint8)
    g1, g2 = rng.normal(size=100), rng.normal(size=100)
    grad = lambda v: GradientEstimate({"g": torch.tensor(v, dtype=torch.float64)}, "captured")
    checks = {
        "iou self": iou(m, m) == 1.0,
        "ssim self": math.isclose(ssim(a, a), 1.0, abs_tol=1e-12),
        "mse self": mse_norm(a, a) == 0.0,
        "psnr(0)": psnr(0.0) == math.inf,
        "psnr(0.01)": math.isclose(psnr(0.01), 20.0, abs_tol=1e-12),
        "alpha=1 is mse": math.isclose(float(matching_loss(grad(g1), grad(g2), 1.0)), float(np.mean((g1 - g2) ** 2)), rel_tol=1e-12),
        "alpha=0 scale invariant": all(
            math.isclose(float(matching_loss(grad(s * g1), grad(g2), 0.0)), float(matching_loss(grad(g1), grad(g2), 0.0)), rel_tol=1e-9)
            and math.isclose(float(matching_loss(grad(g1), grad(s * g2), 0.0)), float(matching_loss(grad(g1), grad(g2), 0.0)), rel_tol=1e-9)
            for s in (1e-3, 0.5, 3.0, 1e3)
        ),
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(6, not failed, f"{len(checks) - len(failed)}/{len(checks)} identities hold" + (f"; failed: {failed}" if failed else ""))


def test_criterion_7_class_means(verdict):
    mask = np.zeros((256, 256), dtype=np.uint8)
    mask[:, :128] = 1
    cfg = NoiseConfig(75, 135, 20, shot_noise=20, dwell_time=10, seed=0)
    img = render_sem(mask, cfg).image * 255
    parts = []
    ok = True
    for label, level in ((0, 75.0), (1, 135.0)):
        px = img[mask == label]
        dev = abs(px.mean() - level)
        tol = class_mean_tolerance(cfg, level, px.size)
        ok &= px.size >= 10_000 and dev <= 2.0 and dev <= tol
        parts.append(f"class {label}: mean {px.mean():.3f} (target {level:.0f}, |dev| {dev:.3f}, bound {tol:.3f}, n={px.size})")
    verdict(7, ok, "; ".join(parts))


def _strip(path):
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    return [{k: v for k, v in r.items() if k not in WALL_CLOCK_FIELDS} for r in rows]


def test_criterion_8_reproducibility(verdict, tmp_path):
    raw = {
        "training": {
            "mode": "fl",
            "subsets": ["A", "B", "C"],
            "rounds": 2,
            "learning_rate": 0.1,
            "batch_size": 2,
            "persist_snapshots": True,
            "snapshot_rounds": [1, 2],
        }
    }
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(raw))
    outs = []
    for name in ("first", "second"):
        out = tmp_path / name
        base = ["--desk-scale", "--seed", "3", "--out", str(out), "--config", str(cfg_path)]
        assert run(["generate", *base]) == EXIT_OK
        assert run(["train", *base]) == EXIT_OK
        outs.append(out)
    run_a, run_b = (o / "runs" / "FL-3" for o in outs)
    same_logs = _strip(run_a / "rounds.jsonl") == _strip(run_b / "rounds.jsonl")
    from semfl.snapshot import load_weights

    files = sorted(p.relative_to(run_a) for p in run_a.rglob("*.wts"))
    same_digests = files == sorted(p.relative_to(run_b) for p in run_b.rglob("*.wts")) and all(
        weights_digest(load_weights(run_a / f)) == weights_digest(load_weights(run_b / f)) for f in files
    )
    verdict(8, same_logs and same_digests and len(files) > 1, f"identical logs: {same_logs}, identical digests over {len(files)} snapshots: {same_digests}")
