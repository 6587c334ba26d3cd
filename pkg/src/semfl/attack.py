"""Gradient inversion against intercepted FedAvg weight updates.

The attacker sees a client's weights before and after local training plus
the learning rate. For a single full-batch plain-SGD step the gradient is
exactly ``(before - after) / lr``; the attack then optimizes a dummy image
and a dummy mask so that the gradient they induce matches it under

    loss = alpha * MSE(g_dummy, g_target) + (1 - alpha) * (1 - cos(g_dummy, g_target))

with both gradients flattened across all parameters.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .datagen import SemSample, to_uint8
from .metrics import MetricsReport, evaluate_reconstruction
from .model import (
    GradientEstimate,
    ModelError,
    ModelWeights,
    forward_logits,
    logits_loss,
)

log = logging.getLogger(__name__)


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 0.5
    attack_optimizer: str = "adam"  # adam | lbfgs
    attack_lr: float = 0.1
    iterations: int = 2000
    init: str = "uniform_random"  # uniform_random | gaussian | constant_gray
    seed: int = 0
    clamp_inputs: bool = True
    tv_weight: float = 0.0
    snapshot_every: int = 100
    lr_decay: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise AttackError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.iterations < 1:
            raise AttackError("iterations must be >= 1")
        if self.attack_lr <= 0:
            raise AttackError("attack_lr must be positive")
        if self.attack_optimizer not in ("adam", "lbfgs"):
            raise AttackError(f"unknown attack optimizer {self.attack_optimizer!r}")
        if self.init not in ("uniform_random", "gaussian", "constant_gray"):
            raise AttackError(f"unknown init {self.init!r}")
        if self.tv_weight < 0:
            raise AttackError("tv_weight must be non-negative")


@dataclass
class AttackState:
    dummy_image: torch.Tensor
    mask_logits: torch.Tensor
    iteration: int = 0
    loss_trace: list[float] = field(default_factory=list)
    best_trace: list[float] = field(default_factory=list)
    best_snapshot: tuple[int, np.ndarray, np.ndarray, float] | None = None

    @property
    def dummy_mask(self) -> torch.Tensor:
        return torch.sigmoid(self.mask_logits)


@dataclass
class AttackReport:
    image: np.ndarray
    mask: np.ndarray
    provenance: str
    alpha: float
    final_loss: float
    best_loss: float
    best_iteration: int
    loss_trace: list[float]
    best_trace: list[float]
    snapshots: list[tuple[int, np.ndarray]]
    metrics: MetricsReport | None = None
    aborted: bool = False
    diagnostic: str = ""
    degenerate_cosine: bool = False
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "provenance": self.provenance,
            "alpha": self.alpha,
            "final_loss": self.final_loss,
            "best_loss": self.best_loss,
            "best_iteration": self.best_iteration,
            "iterations_run": len(self.loss_trace),
            "loss_trace": self.loss_trace,
            "metrics": self.metrics.to_json() if self.metrics else None,
            "aborted": self.aborted,
            "diagnostic": self.diagnostic,
            "degenerate_cosine": self.degenerate_cosine,
            "snapshot_iterations": [it for it, _ in self.snapshots],
            "config": self.config,
        }


# --------------------------------------------------------------------------- #
# Gradient recovery
# --------------------------------------------------------------------------- #
def recover_gradient(old: ModelWeights, new: ModelWeights, lr: float, provenance: str = "recovered") -> GradientEstimate:
    """Gradient implied by one SGD step: ``(old - new) / lr``."""
    if not lr > 0:
        raise AttackError(f"learning rate must be positive, got {lr}")
    try:
        old.check_compatible(new)
    except ModelError as err:
        raise AttackError(str(err)) from err
    entries = {n: (t - new.entries[n]) / lr for n, t in old.entries.items()}
    return GradientEstimate(entries, provenance, lr, old.model_tag)


# --------------------------------------------------------------------------- #
# Matching loss
# --------------------------------------------------------------------------- #
class MatchingTerms(NamedTuple):
    total: torch.Tensor
    mse: torch.Tensor
    cosine: torch.Tensor  # 1 - cos
    degenerate: bool


def _flat(g) -> torch.Tensor:
    if isinstance(g, GradientEstimate):
        return g.flat()
    if isinstance(g, dict):
        return torch.cat([t.reshape(-1) for t in g.values()])
    if isinstance(g, (list, tuple)):
        return torch.cat([t.reshape(-1) for t in g])
    return torch.as_tensor(g).reshape(-1)


def matching_terms(dummy_grad, target_grad, alpha: float) -> MatchingTerms:
    if not 0.0 <= alpha <= 1.0:
        raise AttackError(f"alpha must lie in [0, 1], got {alpha}")
    d, t = _flat(dummy_grad), _flat(target_grad)
    if d.shape != t.shape:
        raise AttackError(f"gradient shapes differ: {tuple(d.shape)} vs {tuple(t.shape)}")
    t = t.to(d.dtype)
    mse = torch.mean((d - t) ** 2)
    dn, tn = torch.linalg.vector_norm(d), torch.linalg.vector_norm(t)
    degenerate = bool(dn == 0 or tn == 0)
    if degenerate:
        cos_term = torch.ones((), dtype=d.dtype)
    else:
        cos_term = (1.0 - torch.dot(d, t) / (dn * tn)).clamp_min(0.0)
    total = alpha * mse + (1.0 - alpha) * cos_term
    return MatchingTerms(total, mse, cos_term, degenerate and alpha < 1.0)


def matching_loss(dummy_grad, target_grad, alpha: float) -> torch.Tensor:
    """Weighted sum of gradient MSE and cosine distance.

    A zero-norm gradient makes the cosine undefined; the cosine term is then
    taken as 1 (maximal dissimilarity). :func:`matching_terms` reports the
    fallback.
    """
    return matching_terms(dummy_grad, target_grad, alpha).total


# --------------------------------------------------------------------------- #
# Attack loop
# --------------------------------------------------------------------------- #
def init_dummy(cfg: AttackConfig, height: int, width: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Initial (image, mask logits) for ``cfg``; the mask starts at 0.5 plus noise."""
    gen = torch.Generator().manual_seed(cfg.seed)
    shape = (1, 1, height, width)
    if cfg.init == "uniform_random":
        image = torch.rand(shape, generator=gen, dtype=dtype)
    elif cfg.init == "gaussian":
        image = 0.5 + 0.2 * torch.randn(shape, generator=gen, dtype=dtype)
    else:
        image = torch.full(shape, 0.5, dtype=dtype)
    if cfg.clamp_inputs:
        image = image.clamp(0.0, 1.0)
    mask_logits = 0.1 * torch.randn(shape, generator=gen, dtype=dtype)
    return image, mask_logits


def dummy_gradient(weights: ModelWeights, image: torch.Tensor, mask: torch.Tensor, create_graph: bool = True):
    params = {n: t.detach().requires_grad_(True) for n, t in weights.entries.items()}
    loss = logits_loss(forward_logits(params, image, weights.model_tag), mask)
    return torch.autograd.grad(loss, list(params.values()), create_graph=create_graph)


def _total_variation(x: torch.Tensor) -> torch.Tensor:
    return (x[..., 1:, :] - x[..., :-1, :]).abs().mean() + (x[..., :, 1:] - x[..., :, :-1]).abs().mean()


def run_attack(
    target: GradientEstimate,
    weights: ModelWeights,
    cfg: AttackConfig,
    ground_truth: SemSample | None = None,
) -> AttackReport:
    """Reconstruct one private image (and its mask) from ``target``.

    The dummy image and dummy-mask logits are optimized jointly; the mask is
    squashed through a sigmoid so it stays in (0, 1). The returned image is
    the lowest-loss iterate.
    """
    if list(target.entries) != weights.names:
        raise AttackError("target gradient is not aligned with the model weights")
    for name, t in weights.entries.items():
        if target.entries[name].shape != t.shape:
            raise AttackError(f"target gradient shape mismatch for {name}")
    spec = weights.spec
    dtype = spec.torch_dtype
    image, mask_logits = init_dummy(cfg, spec.height, spec.width, dtype)
    image.requires_grad_(True)
    mask_logits.requires_grad_(True)
    state = AttackState(image, mask_logits)
    target_flat = target.flat().to(dtype).detach()
    frozen = ModelWeights({n: t.detach() for n, t in weights.entries.items()}, weights.model_tag)
    variables = [image, mask_logits]
    if cfg.attack_optimizer == "adam":
        opt = torch.optim.Adam(variables, lr=cfg.attack_lr)
    else:
        opt = torch.optim.LBFGS(
            variables,
            lr=cfg.attack_lr,
            max_iter=20,
            history_size=100,
            line_search_fn="strong_wolfe",
            tolerance_grad=1e-12,
            tolerance_change=1e-16,
        )
    sched = (
        torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.iterations)
        if cfg.lr_decay and cfg.attack_optimizer == "adam"
        else None
    )
    degenerate = False
    # Raw gradient MSE is often ~1e-8, below L-BFGS stopping tolerances. The
    # optimizer therefore sees the matching loss divided by its initial value
    # (same minimizer); traces are reported back in raw units.
    with torch.enable_grad():
        grads0 = dummy_gradient(frozen, image, torch.sigmoid(mask_logits), create_graph=False)
    initial = float(matching_terms(grads0, target_flat, cfg.alpha).total)
    scale = initial if math.isfinite(initial) and initial > 0 else 1.0

    def objective() -> torch.Tensor:
        nonlocal degenerate
        grads = dummy_gradient(frozen, image, torch.sigmoid(mask_logits))
        terms = matching_terms(grads, target_flat, cfg.alpha)
        degenerate = degenerate or terms.degenerate
        loss = terms.total / scale
        if cfg.tv_weight:
            loss = loss + cfg.tv_weight * _total_variation(image)
        return loss

    def closure():
        opt.zero_grad()
        loss = objective()
        loss.backward()
        return loss

    snapshots: list[tuple[int, np.ndarray]] = []
    aborted, diagnostic = False, ""
    best = (math.inf, 0, image.detach().clone(), mask_logits.detach().clone())

    for it in range(cfg.iterations):
        state.iteration = it
        if cfg.attack_optimizer == "adam":
            loss = closure()
        else:
            # evaluate at the current iterate so the trace is aligned with snapshots
            with torch.enable_grad():
                loss = objective().detach()
        value = float(loss.detach()) * scale
        if not math.isfinite(value):
            aborted, diagnostic = True, f"non-finite matching loss at iteration {it}"
            log.warning(diagnostic)
            break
        state.loss_trace.append(value)
        if value < best[0]:
            best = (value, it, image.detach().clone(), mask_logits.detach().clone())
        state.best_trace.append(best[0])
        if cfg.snapshot_every and it % cfg.snapshot_every == 0:
            snapshots.append((it, image.detach()[0, 0].numpy().copy()))
        if value == 0.0:
            break
        try:
            opt.step(closure if cfg.attack_optimizer == "lbfgs" else None)
        except RuntimeError as err:
            aborted, diagnostic = True, f"optimizer step failed at iteration {it}: {err}"
            log.warning(diagnostic)
            break
        if sched is not None:
            sched.step()
        if cfg.clamp_inputs:
            with torch.no_grad():
                image.clamp_(0.0, 1.0)

    best_loss, best_it, best_img, best_logits = best
    if not state.loss_trace:
        best_img, best_logits = image.detach(), mask_logits.detach()
    state.best_snapshot = (best_it, best_img[0, 0].numpy(), torch.sigmoid(best_logits)[0, 0].numpy(), best_loss)
    recon = best_img[0, 0].numpy().copy()
    if snapshots and snapshots[-1][0] != best_it:
        snapshots.append((best_it, recon.copy()))
    metrics = evaluate_reconstruction(np.clip(recon, 0, 1), ground_truth) if ground_truth is not None else None
    return AttackReport(
        image=recon,
        mask=torch.sigmoid(best_logits)[0, 0].numpy().copy(),
        provenance=target.provenance,
        alpha=cfg.alpha,
        final_loss=state.loss_trace[-1] if state.loss_trace else math.nan,
        best_loss=best_loss,
        best_iteration=best_it,
        loss_trace=state.loss_trace,
        best_trace=state.best_trace,
        snapshots=snapshots,
        metrics=metrics,
        aborted=aborted,
        diagnostic=diagnostic,
        degenerate_cosine=degenerate,
        config=asdict(cfg),
    )


def _quality_key(report: AttackReport):
    if report.metrics is not None:
        return (-report.metrics.ssim, -report.metrics.psnr)
    return (report.best_loss,)


def sweep_alpha(
    target: GradientEstimate,
    weights: ModelWeights,
    cfg: AttackConfig,
    ground_truth: SemSample | None = None,
    alphas: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
) -> list[AttackReport]:
    """One attack per alpha (same seed), best first.

    With ground truth the order is by post-resegmentation SSIM then PSNR;
    otherwise by best matching loss. Matching losses for different alphas are
    on different scales, so the latter order is only a heuristic.
    """
    reports = [run_attack(target, weights, replace(cfg, alpha=float(a)), ground_truth) for a in alphas]
    return sorted(reports, key=_quality_key)


# --------------------------------------------------------------------------- #
# Analytic oracle for the dense toy model
# --------------------------------------------------------------------------- #
def analytic_dense_inversion(grad: GradientEstimate, weight_name: str = "fc.weight", bias_name: str = "fc.bias") -> np.ndarray:
    """Closed-form input of a dense layer from its weight and bias gradients.

    For one sample ``dW = delta x^T`` and ``db = delta``, so every row with a
    nonzero bias gradient yields ``x = dW[i] / db[i]``; rows are combined by
    least squares, weighted by ``db[i]**2``.
    """
    dw = grad.entries[weight_name].detach().numpy()
    db = grad.entries[bias_name].detach().numpy()
    if not np.any(db):
        raise AttackError("bias gradient is zero; input is not identifiable")
    return (db @ dw) / (db @ db)


# --------------------------------------------------------------------------- #
# Output
# --------------------------------------------------------------------------- #
def save_filmstrip(report: AttackReport, path: str | Path, ground_truth: SemSample | None = None) -> Path:
    """Tile snapshots left to right (ground truth last, when given) into one PNG."""
    from PIL import Image

    tiles = [np.clip(img, 0, 1) for _, img in report.snapshots] or [np.clip(report.image, 0, 1)]
    if ground_truth is not None:
        tiles.append(ground_truth.image)
    h = tiles[0].shape[0]
    gap = np.ones((h, 2))
    strip = np.concatenate([np.concatenate([t, gap], axis=1) for t in tiles], axis=1)[:, :-2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(strip), mode="L").save(path)
    return path


def save_report(report: AttackReport, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({**report.to_json(), **(extra or {})}, indent=2, sort_keys=True))
    return path
