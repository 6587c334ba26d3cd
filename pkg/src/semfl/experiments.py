"""Experiment runner: dataset generation, CL/FL training, attacks, reports.

Output layout under ``out_dir``::

    dataset/                      manifest.json + one directory per subset
    runs/<run_id>/                rounds.jsonl, final.wts, meta.json, snapshots/
    attacks/<run_id>-c<k>-r<t>/   report.json, filmstrip.png, recon.png
    results.csv, attacks.csv      one row per completed run / attack
    report/                       tables and plots from ``cmd_report``
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from .attack import (
    AttackConfig,
    AttackReport,
    analytic_dense_inversion,
    recover_gradient,
    run_attack,
    save_filmstrip,
    save_report,
    sweep_alpha,
)
from .config import ExperimentConfig
from .datagen import (
    ClientDataset,
    SemSample,
    build_experiment_splits,
    export_dataset,
    generate_corpus,
    import_dataset,
    resize_sample,
    to_uint8,
)
from .fed import (
    ClientState,
    TrainConfig,
    fedavg_aggregate,
    local_update,
    run_federated,
    train_centralized,
    write_jsonl,
)
from .metrics import evaluate_reconstruction, iou, mse_norm, psnr, ssim
from .model import ModelSpec, build_model
from .snapshot import load_weights, save_weights, weights_digest

log = logging.getLogger(__name__)

RESULT_FIELDS = [
    "run_id",
    "mode",
    "clients",
    "train_images",
    "rounds",
    "seed",
    "final_loss",
    "final_iou",
    "final_mse",
    "final_ssim",
    "train_seconds",
]
ATTACK_FIELDS = ["attack_id", "run_id", "victim", "round", "alpha", "provenance", "mse", "ssim", "psnr", "best_loss"]


class MissingInputError(FileNotFoundError):
    pass


class IncompatibleRunError(ValueError):
    pass


class GateError(RuntimeError):
    pass


def _upsert_csv(path: Path, fields: list[str], row: dict, key: str) -> None:
    rows = []
    if path.exists():
        with path.open(newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r.get(key) != str(row[key])]
    rows.append({k: row.get(k, "") for k in fields})
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


# --------------------------------------------------------------------------- #
# generate
# --------------------------------------------------------------------------- #
def cmd_generate(cfg: ExperimentConfig) -> Path:
    ds = cfg.dataset
    src = (ds.source_height or ds.height, ds.source_width or ds.width)
    samples = generate_corpus(
        ds.n_images, src, ds.noise, seed=cfg.seed_for("dataset"), density_range=(ds.density_low, ds.density_high)
    )
    if src != (ds.height, ds.width):
        samples = [resize_sample(s, ds.height, ds.width) for s in samples]
    splits = build_experiment_splits(samples, ds.manifest)
    out = Path(cfg.out_dir) / "dataset"
    export_dataset(splits, out, noise=ds.noise, plan=ds.manifest, extra={"seed": cfg.seed, "size": [ds.height, ds.width]})
    log.info("wrote %d images to %s", sum(len(s) for s in splits if s.subset_name in _fresh(cfg)), out)
    return out


def _fresh(cfg: ExperimentConfig) -> set[str]:
    return {s.name for s in cfg.dataset.manifest.subsets if s.role != "union"}


def load_splits(cfg: ExperimentConfig) -> dict[str, ClientDataset]:
    root = Path(cfg.out_dir) / "dataset"
    if not (root / "manifest.json").exists():
        raise MissingInputError(f"missing dataset at {root}; run `generate` first")
    datasets, _ = import_dataset(root)
    return {d.subset_name: d for d in datasets}


# --------------------------------------------------------------------------- #
# train
# --------------------------------------------------------------------------- #
def cmd_train(cfg: ExperimentConfig) -> dict:
    tr = cfg.training
    splits = load_splits(cfg)
    run_id = tr.resolved_run_id()
    run_dir = Path(cfg.out_dir) / "runs" / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    holdout = splits[tr.holdout]
    init = build_model(cfg.model, cfg.seed_for("model"))
    snap_dir = run_dir / "snapshots"
    keep = set(tr.snapshot_rounds) if tr.persist_snapshots else set()

    def on_round(rec):
        if rec.round in keep:
            # the broadcast weights of round t are the aggregate of round t - 1
            for cid, w in rec.client_weights.items():
                save_weights(w, snap_dir / f"client{cid}_round{rec.round}_after.wts")

    t0 = time.perf_counter()
    if tr.mode == "cl":
        final, records = train_centralized(splits[tr.subsets[0]], cfg.model, tr.config, holdout, init=init)
        clients_n, train_n = 1, len(splits[tr.subsets[0]])
    else:
        clients = [
            ClientState(i + 1, splits[name], keep_snapshots=False) for i, name in enumerate(tr.subsets)
        ]
        prev = {"w": init}

        def fl_round(rec):
            if rec.round in keep:
                save_weights(prev["w"], snap_dir / f"global_round{rec.round}.wts")
                for cid in rec.client_weights:
                    save_weights(prev["w"], snap_dir / f"client{cid}_round{rec.round}_before.wts")
            on_round(rec)
            prev["w"] = rec.aggregated

        final, records = run_federated(clients, cfg.model, tr.config, holdout, init=init, on_round=fl_round)
        clients_n, train_n = len(clients), sum(len(c.dataset) for c in clients)
    elapsed = time.perf_counter() - t0

    write_jsonl(records, run_dir / "rounds.jsonl", run_id)
    save_weights(final, run_dir / "final.wts")
    meta = {
        "run_id": run_id,
        "mode": tr.mode,
        "subsets": list(tr.subsets),
        "holdout": tr.holdout,
        "client_sizes": {str(i + 1): len(splits[n]) for i, n in enumerate(tr.subsets)},
        "client_subsets": {str(i + 1): n for i, n in enumerate(tr.subsets)},
        "train": asdict(tr.config),
        "model_tag": cfg.model.tag,
        "final_digest": weights_digest(final),
        "snapshot_rounds": sorted(keep),
    }
    (run_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    last = records[-1].metrics
    row = {
        "run_id": run_id,
        "mode": tr.mode,
        "clients": clients_n,
        "train_images": train_n,
        "rounds": tr.config.rounds,
        "seed": cfg.seed,
        "final_loss": last.get("loss"),
        "final_iou": last.get("iou"),
        "final_mse": last.get("mse"),
        "final_ssim": last.get("ssim"),
        "train_seconds": round(elapsed, 3),
    }
    _upsert_csv(Path(cfg.out_dir) / "results.csv", RESULT_FIELDS, row, "run_id")
    return row


# --------------------------------------------------------------------------- #
# attack
# --------------------------------------------------------------------------- #
def toy_oracle_gate(seed: int = 0, size: int = 4) -> float:
    """Analytic-oracle gate on the dense toy model; returns reconstruction MSE.

    A victim takes one plain-SGD step on a known ``size`` x ``size`` image; the
    attacker recovers the gradient from the weight delta and runs the
    gradient-matching attack. Raises :class:`GateError` unless both the
    attack and the closed-form inversion reproduce the input to MSE < 1e-6.
    """
    rng = np.random.default_rng(seed)
    spec = ModelSpec("toy_linear", size, size, dtype="float64")
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[: size // 2] = 1
    sample = SemSample(rng.uniform(0.05, 0.95, (size, size)), mask, "toy")
    before = build_model(spec, seed)
    victim = ClientState(1, ClientDataset("victim", [sample]))
    lr = 0.1
    after = local_update(victim, before, TrainConfig(learning_rate=lr, batch_size=1, rounds=1))
    grad = recover_gradient(before, after, lr)
    closed = analytic_dense_inversion(grad).reshape(size, size)
    report = run_attack(
        grad,
        before,
        AttackConfig(alpha=0.5, attack_optimizer="lbfgs", attack_lr=1.0, iterations=200, seed=seed, clamp_inputs=False, snapshot_every=0),
    )
    mse_attack = mse_norm(report.image, sample.image)
    mse_closed = mse_norm(closed, sample.image)
    if not (mse_attack < 1e-6 and mse_closed < 1e-6):
        raise GateError(f"toy oracle gate failed: attack mse={mse_attack:.3g}, closed-form mse={mse_closed:.3g}")
    return mse_attack


def _run_meta(cfg: ExperimentConfig, run_id: str) -> tuple[Path, dict]:
    run_dir = Path(cfg.out_dir) / "runs" / run_id
    meta_path = run_dir / "meta.json"
    if not meta_path.exists():
        raise MissingInputError(f"no training run {run_id!r} under {run_dir.parent}")
    return run_dir, json.loads(meta_path.read_text())


def attack_exactness_issues(train: dict, victim_size: int) -> list[str]:
    """Reasons the weight delta is not exactly lr * gradient of one image."""
    issues = []
    if train["optimizer"] != "sgd":
        issues.append(f"optimizer {train['optimizer']} (weight delta is not a single gradient)")
    if train["local_epochs"] != 1:
        issues.append(f"local_epochs={train['local_epochs']}")
    if train["batch_size"] < victim_size:
        issues.append(f"batch_size={train['batch_size']} < victim data size {victim_size} (several local steps)")
    if victim_size != 1:
        issues.append(f"victim holds {victim_size} images (single-image attack)")
    return issues


def cmd_attack(cfg: ExperimentConfig, approximate: bool = False) -> list[AttackReport]:
    at = cfg.attack
    run_id = cfg.training.resolved_run_id()
    run_dir, meta = _run_meta(cfg, run_id)
    if meta["mode"] != "fl":
        raise IncompatibleRunError("attacks target federated runs (the server observes client updates)")
    cid, rnd = str(at.victim_client), at.round
    if cid not in meta["client_subsets"]:
        raise IncompatibleRunError(f"run {run_id} has no client {cid}")
    splits = load_splits(cfg)
    victim_data = splits[meta["client_subsets"][cid]]
    train = meta["train"]
    lr = float(train["learning_rate"])
    snap = run_dir / "snapshots"
    attack_id = f"{run_id}-c{cid}-r{rnd}" + ("-probe" if at.mode == "probe" else "")
    out = Path(cfg.out_dir) / "attacks" / attack_id

    if at.mode == "probe":
        # victim retrains the broadcast model on one private image for one step
        gpath = snap / f"global_round{rnd}.wts"
        if not gpath.exists():
            raise MissingInputError(f"missing snapshots: {gpath}")
        before = load_weights(gpath)
        truth = victim_data.samples[at.probe_image]
        probe = ClientState(int(cid), ClientDataset("probe", [truth]))
        after = local_update(probe, before, TrainConfig(learning_rate=lr, batch_size=1, rounds=1), rnd)
        save_weights(before, out / "observed_before.wts")
        save_weights(after, out / "observed_after.wts")
        issues = []
    else:
        bpath, apath = snap / f"client{cid}_round{rnd}_before.wts", snap / f"client{cid}_round{rnd}_after.wts"
        if not (bpath.exists() and apath.exists()):
            raise MissingInputError(f"missing snapshots for client {cid} round {rnd} in {snap}")
        before, after = load_weights(bpath), load_weights(apath)
        truth = victim_data.samples[0]
        issues = attack_exactness_issues(train, len(victim_data))
        if issues and not approximate:
            raise IncompatibleRunError(
                "weight delta does not give the exact gradient: " + "; ".join(issues) + ". Use --approximate to attack anyway."
            )

    toy_oracle_gate()
    grad = recover_gradient(before, after, lr, provenance="approximate" if issues else "recovered")
    if at.alphas:
        reports = sweep_alpha(grad, before, at.config, truth, at.alphas)
    else:
        reports = [run_attack(grad, before, at.config, truth)]
    best = reports[0]
    save_report(best, out / "report.json", {"attack_id": attack_id, "run_id": run_id, "exactness_issues": issues})
    (out / "sweep.json").write_text(json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True))
    save_filmstrip(best, out / "filmstrip.png", truth)
    from PIL import Image

    Image.fromarray(to_uint8(np.clip(best.image, 0, 1)), mode="L").save(out / "recon.png")
    for rep in reports:
        m = rep.metrics
        _upsert_csv(
            Path(cfg.out_dir) / "attacks.csv",
            ATTACK_FIELDS,
            {
                "attack_id": f"{attack_id}-a{rep.alpha:g}",
                "run_id": run_id,
                "victim": cid,
                "round": rnd,
                "alpha": rep.alpha,
                "provenance": rep.provenance,
                "mse": m.mse if m else "",
                "ssim": m.ssim if m else "",
                "psnr": m.psnr if m else "",
                "best_loss": rep.best_loss,
            },
            "attack_id",
        )
    return reports


# --------------------------------------------------------------------------- #
# evaluate
# --------------------------------------------------------------------------- #
def _read_gray(path: str | Path) -> np.ndarray:
    from PIL import Image

    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"image not found: {p}")
    return np.asarray(Image.open(p).convert("L"), dtype=np.float64) / 255.0


def cmd_evaluate(image_a: str | Path, image_b: str | Path, mask: str | Path | None = None) -> dict:
    """Compare two image files; with ``mask``, score ``image_a`` as a reconstruction of ``image_b``."""
    a, b = _read_gray(image_a), _read_gray(image_b)
    if mask is not None:
        m = (_read_gray(mask) > 0.5).astype(np.uint8)
        return evaluate_reconstruction(a, SemSample(b, m, Path(image_b).stem)).to_json()
    mse = mse_norm(a, b)
    return {
        "mse": mse,
        "psnr": "inf" if mse == 0 else psnr(mse),
        "ssim": ssim(a, b),
        "iou": iou(a, b),
        "context": "segmentation_eval",
        "preprocessing": "none",
    }


# --------------------------------------------------------------------------- #
# report
# --------------------------------------------------------------------------- #
def read_jsonl(path: Path) -> tuple[list[dict], int]:
    rows, bad = [], 0
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError:
            bad += 1
            log.warning("skipping corrupted row %d in %s", n, path)
    return rows, bad


def cmd_report(results_dir: str | Path) -> dict:
    """Collect every run under ``results_dir`` into tables and curve plots.

    Returns a summary whose ``partial`` flag is set when some log rows could
    not be parsed.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    root = Path(results_dir)
    logs = sorted((root / "runs").glob("*/rounds.jsonl")) if (root / "runs").exists() else []
    if not logs:
        raise MissingInputError(f"no completed runs under {root}")
    out = root / "report"
    out.mkdir(exist_ok=True)
    runs, skipped = {}, 0
    for path in logs:
        rows, bad = read_jsonl(path)
        skipped += bad
        if rows:
            meta_path = path.parent / "meta.json"
            meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
            runs[path.parent.name] = (rows, meta)

    table = []
    for run_id, (rows, meta) in sorted(runs.items()):
        last = rows[-1]["metrics"]
        table.append(
            {
                "run_id": run_id,
                "mode": meta.get("mode", ""),
                "clients": len(meta.get("subsets", [])) if meta.get("mode") == "fl" else 1,
                "epochs": len(rows) * int(meta.get("train", {}).get("local_epochs", 1)),
                "iou": last.get("iou"),
                "mse": last.get("mse"),
                "ssim": last.get("ssim"),
                "loss": last.get("loss"),
                "train_seconds": round(sum(r.get("local_seconds", 0) + r.get("aggregation_seconds", 0) for r in rows), 3),
                "schedule": "sequential clients, instantaneous communication",
            }
        )
    with (out / "segmentation_table.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(table[0]))
        writer.writeheader()
        writer.writerows(table)

    plots = []
    for metric, title in (("loss", "Test Loss"), ("iou", "Test IoU")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for run_id, (rows, meta) in sorted(runs.items()):
            epochs_per_round = int(meta.get("train", {}).get("local_epochs", 1))
            xs = [r["round"] * epochs_per_round for r in rows]
            ys = [r["metrics"].get(metric, math.nan) for r in rows]
            n = len(meta.get("subsets", [])) if meta.get("mode") == "fl" else 1
            ax.plot(xs, ys, label=f"{run_id} ({n} client{'s' if n > 1 else ''})")
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric)
        ax.set_title(f"{title} for Different Total Numbers of Clients")
        ax.legend(fontsize=7)
        fig.tight_layout()
        p = out / f"test_{metric}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        plots.append(str(p))

    attack_rows = []
    csv_path = root / "attacks.csv"
    if csv_path.exists():
        with csv_path.open(newline="") as fh:
            attack_rows = list(csv.DictReader(fh))
        dangling = [r["attack_id"] for r in attack_rows if r["run_id"] not in runs]
        if dangling:
            log.warning("attack rows reference unknown runs: %s", dangling)
        with (out / "attack_table.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=ATTACK_FIELDS)
            writer.writeheader()
            writer.writerows(attack_rows)
    strips = sorted((root / "attacks").glob("*/filmstrip.png")) if (root / "attacks").exists() else []
    if strips:
        from PIL import Image

        imgs = [np.asarray(Image.open(p).convert("L")) for p in strips]
        width = max(i.shape[1] for i in imgs)
        padded = [np.pad(i, ((0, 2), (0, width - i.shape[1])), constant_values=255) for i in imgs]
        Image.fromarray(np.concatenate(padded, axis=0)).save(out / "filmstrips.png")
    return {
        "runs": len(runs),
        "table": table,
        "plots": plots,
        "attack_rows": len(attack_rows),
        "skipped_rows": skipped,
        "partial": skipped > 0,
    }


# --------------------------------------------------------------------------- #
# experiment matrix (CL-10 / FL-k / CL-90)
# --------------------------------------------------------------------------- #
def run_matrix(
    splits: dict[str, ClientDataset],
    spec: ModelSpec,
    train: TrainConfig,
    client_counts=(1, 3, 9),
    train_subsets: str = "ABCDEFGHI",
    holdout: str = "J",
    union: str = "K",
    model_seed: int = 0,
) -> dict[str, list]:
    """Round records of CL on the first subset, FL over ``k`` subsets, and CL on the union."""
    init = build_model(spec, model_seed)
    out = {}
    _, out[f"CL-{train_subsets[0]}"] = train_centralized(splits[train_subsets[0]], spec, train, splits[holdout], init=init)
    for k in client_counts:
        clients = [ClientState(i + 1, splits[train_subsets[i]], keep_snapshots=False) for i in range(k)]
        _, out[f"FL-{k}"] = run_federated(clients, spec, train, splits[holdout], init=init)
    _, out[f"CL-{union}"] = train_centralized(splits[union], spec, train, splits[holdout], init=init)
    return out
