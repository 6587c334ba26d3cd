"""Centralized baselines and FedAvg over simulated clients.

One round is ``local_epochs`` passes over a client's data. Minibatch order
is seeded by (seed, client id, round, epoch). Centralized training reuses
the same per-round routine as client 1, so a single-client FedAvg run with
client id 1 reproduces it bit for bit.
"""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datagen import ClientDataset
from .metrics import evaluate_segmentation
from .model import ModelError, ModelSpec, ModelWeights, build_model, loss_and_grad, stack_batch
from .snapshot import save_weights

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd_momentum")


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    local_epochs: int = 1
    batch_size: int = 2
    rounds: int = 100
    optimizer: str = "sgd"
    momentum: float = 0.9
    participation: float = 1.0
    seed: int = 0
    attack_compatible: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise TrainingError("learning_rate must be non-negative")
        if self.local_epochs < 1 or self.batch_size < 1 or self.rounds < 1:
            raise TrainingError("local_epochs, batch_size and rounds must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise TrainingError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0 < self.participation <= 1:
            raise TrainingError("participation must lie in (0, 1]")
        if self.attack_compatible and self.optimizer != "sgd":
            raise TrainingError("attack-compatible runs require plain sgd (no momentum)")


@dataclass
class ClientState:
    client_id: int
    dataset: ClientDataset
    local_weights: ModelWeights | None = None
    update_log: list[tuple[int, ModelWeights, ModelWeights]] = field(default_factory=list)
    keep_snapshots: bool = True
    # overrides client_id in the minibatch-order seed
    seed_index: int | None = None


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    client_weights: dict[int, ModelWeights]
    aggregated: ModelWeights
    metrics: dict[str, float]
    local_seconds: float = 0.0
    aggregation_seconds: float = 0.0

    def to_json(self, run_id: str = "", digests: bool = True) -> dict:
        from .snapshot import weights_digest

        row = {
            "run_id": run_id,
            "round": self.round,
            "participants": self.participants,
            "metrics": self.metrics,
            "local_seconds": self.local_seconds,
            "aggregation_seconds": self.aggregation_seconds,
        }
        if digests:
            row["aggregated_digest"] = weights_digest(self.aggregated)
            row["client_digests"] = {str(k): weights_digest(v) for k, v in self.client_weights.items()}
        return row


WALL_CLOCK_FIELDS = ("local_seconds", "aggregation_seconds")


def _epoch_order(n: int, seed: int, client_index: int, round_index: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng([seed, client_index, round_index, epoch])
    return rng.permutation(n)


def _train_epochs(
    weights: ModelWeights,
    dataset: ClientDataset,
    cfg: TrainConfig,
    client_index: int,
    round_index: int,
    velocity: dict | None = None,
) -> ModelWeights:
    spec = weights.spec
    images, masks = stack_batch(dataset.samples, spec)
    params = {n: t.detach().clone() for n, t in weights.entries.items()}
    for epoch in range(cfg.local_epochs):
        order = _epoch_order(len(dataset), cfg.seed, client_index, round_index, epoch)
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start : start + cfg.batch_size])
            step = ModelWeights(params, weights.model_tag)
            _, grads = loss_and_grad(step, images[idx], masks[idx])
            with torch.no_grad():
                for name, g in grads.items():
                    if cfg.optimizer == "sgd_momentum":
                        buf = velocity.setdefault(name, torch.zeros_like(g))
                        buf.mul_(cfg.momentum).add_(g)
                        g = buf
                    params[name] = params[name] - cfg.learning_rate * g
    return ModelWeights(params, weights.model_tag, weights.version)


def local_update(
    state: ClientState, global_weights: ModelWeights, cfg: TrainConfig, round_index: int = 1
) -> ModelWeights:
    """Train a copy of ``global_weights`` on the client's data and log (before, after).

    With one local epoch, ``batch_size >= len(dataset)`` and plain SGD the
    result is exactly ``before - lr * grad``.
    """
    if not state.dataset.samples:
        raise TrainingError(f"client {state.client_id} has an empty dataset")
    if state.local_weights is not None:
        try:
            state.local_weights.check_compatible(global_weights)
        except ModelError as err:
            raise TrainingError(str(err)) from err
    before = global_weights.clone()
    index = state.client_id if state.seed_index is None else state.seed_index
    after = _train_epochs(before, state.dataset, cfg, index, round_index, velocity={})
    after.version = round_index
    state.local_weights = after
    if state.keep_snapshots:
        state.update_log.append((round_index, before, after))
    return after


def fedavg_aggregate(updates: Sequence[tuple[ModelWeights, int]]) -> ModelWeights:
    """Sample-count weighted mean, summed in the order given (ascending client id)."""
    if not updates:
        raise TrainingError("nothing to aggregate")
    first = updates[0][0]
    for w, _ in updates[1:]:
        try:
            first.check_compatible(w)
        except ModelError as err:
            raise TrainingError(str(err)) from err
    total = sum(n for _, n in updates)
    if total <= 0:
        raise TrainingError("sample counts must sum to a positive number")
    out = {}
    for name in first.names:
        acc = None
        for w, n in updates:
            term = w.entries[name] * (n / total)
            acc = term if acc is None else acc + term
        out[name] = acc
    return ModelWeights(out, first.model_tag, max(w.version for w, _ in updates))


def _participants(n_clients: int, cfg: TrainConfig, round_index: int) -> list[int]:
    if cfg.participation >= 1.0:
        return list(range(n_clients))
    k = max(1, round(cfg.participation * n_clients))
    rng = np.random.default_rng([cfg.seed, 0xC11E, round_index])
    return sorted(rng.choice(n_clients, size=k, replace=False).tolist())


def _evaluate(weights: ModelWeights, holdout: ClientDataset | None) -> dict[str, float]:
    if holdout is None or not holdout.samples:
        return {}
    return evaluate_segmentation(weights, holdout.samples)


def train_centralized(
    data: ClientDataset,
    spec: ModelSpec,
    cfg: TrainConfig,
    holdout: ClientDataset | None = None,
    init: ModelWeights | None = None,
    on_round: Callable[[RoundRecord], None] | None = None,
    client_index: int = 1,
) -> tuple[ModelWeights, list[RoundRecord]]:
    if not data.samples:
        raise TrainingError("cannot train on an empty dataset")
    weights = init.clone() if init is not None else build_model(spec, cfg.seed)
    velocity: dict = {}
    records = []
    for r in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()
        weights = _train_epochs(weights, data, cfg, client_index, r, velocity)
        weights.version = r
        elapsed = time.perf_counter() - t0
        rec = RoundRecord(r, [client_index], {}, weights, _evaluate(weights, holdout), elapsed, 0.0)
        records.append(rec)
        if on_round:
            on_round(rec)
    return weights, records


def run_federated(
    clients: Sequence[ClientState],
    spec: ModelSpec,
    cfg: TrainConfig,
    holdout: ClientDataset | None = None,
    init: ModelWeights | None = None,
    on_round: Callable[[RoundRecord], None] | None = None,
    require_disjoint: bool = True,
) -> tuple[ModelWeights, list[RoundRecord]]:
    """FedAvg: broadcast, local updates, weighted mean, hold-out evaluation.

    Clients are processed and summed in ascending ``client_id`` order, so the
    result does not depend on the order of ``clients``.
    """
    if not clients:
        raise TrainingError("need at least one client")
    seen: set[str] = set()
    for c in clients:
        ids = set(c.dataset.ids)
        if require_disjoint and ids & seen:
            raise TrainingError("client datasets must be disjoint")
        seen |= ids
    clients = sorted(clients, key=lambda c: c.client_id)
    global_w = init.clone() if init is not None else build_model(spec, cfg.seed)
    records = []
    for r in range(1, cfg.rounds + 1):
        chosen = _participants(len(clients), cfg, r)
        t0 = time.perf_counter()
        returned = {}
        for i in chosen:
            returned[i] = local_update(clients[i], global_w, cfg, r)
        t1 = time.perf_counter()
        global_w = fedavg_aggregate([(returned[i], len(clients[i].dataset)) for i in chosen])
        global_w.version = r
        t2 = time.perf_counter()
        ids = [clients[i].client_id for i in chosen]
        rec = RoundRecord(
            r,
            ids,
            {clients[i].client_id: returned[i] for i in chosen},
            global_w,
            _evaluate(global_w, holdout),
            t1 - t0,
            t2 - t1,
        )
        records.append(rec)
        if on_round:
            on_round(rec)
    return global_w, records


def write_jsonl(records: Sequence[RoundRecord], path: str | Path, run_id: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(run_id), sort_keys=True) + "\n")
    return path


def persist_client_snapshots(clients: Sequence[ClientState], out_dir: str | Path) -> list[Path]:
    """Write every logged (before, after) pair in the snapshot wire format."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for c in clients:
        for round_index, before, after in c.update_log:
            for kind, w in (("before", before), ("after", after)):
                p = out / f"client{c.client_id}_round{round_index}_{kind}.wts"
                save_weights(w, p)
                written.append(p)
    return written


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
