"""Segmentation models and the weight/gradient containers exchanged in FL.

Models are ordinary ``torch.nn.Module`` instances, but all public entry
points are functional: parameters travel as :class:`ModelWeights` and are
bound to a stateless module with ``torch.func.functional_call``. That keeps
every forward pass differentiable w.r.t. weights *and* inputs, which the
gradient inversion attack relies on.
"""

from __future__ import annotations

import math
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

EPS = 1e-7

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_ACTIVATIONS = {
    "relu": nn.ReLU,
    "leaky_relu": lambda: nn.LeakyReLU(0.1),
    "tanh": nn.Tanh,
    "sigmoid": nn.Sigmoid,
    "silu": nn.SiLU,
}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "unet"  # unet | toy_linear
    height: int = 64
    width: int = 64
    depth: int = 4
    base_channels: int = 16
    activation: str = "tanh"
    dtype: str = "float64"

    def __post_init__(self):
        if self.architecture not in ("unet", "toy_linear"):
            raise ModelError(f"unknown architecture {self.architecture!r}")
        if self.height < 1 or self.width < 1:
            raise ModelError("input dims must be positive")
        if self.dtype not in _DTYPES:
            raise ModelError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.activation not in _ACTIVATIONS:
            raise ModelError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if self.architecture == "unet":
            if self.depth < 1 or self.base_channels < 1:
                raise ModelError("unet needs depth >= 1 and base_channels >= 1")
            step = 2**self.depth
            if self.height % step or self.width % step:
                raise ModelError(
                    f"input dims {self.height}x{self.width} not divisible by 2^depth={step}"
                )

    @property
    def tag(self) -> str:
        if self.architecture == "toy_linear":
            return f"toy_linear-{self.height}x{self.width}-{self.dtype}"
        return (
            f"unet-d{self.depth}-b{self.base_channels}-{self.activation}"
            f"-{self.height}x{self.width}-{self.dtype}"
        )

    @classmethod
    def from_tag(cls, tag: str) -> "ModelSpec":
        m = re.fullmatch(r"toy_linear-(\d+)x(\d+)-(\w+)", tag)
        if m:
            return cls("toy_linear", int(m[1]), int(m[2]), dtype=m[3])
        m = re.fullmatch(r"unet-d(\d+)-b(\d+)-(\w+)-(\d+)x(\d+)-(\w+)", tag)
        if m:
            return cls("unet", int(m[4]), int(m[5]), int(m[1]), int(m[2]), m[3], m[6])
        raise ModelError(f"unrecognized model tag {tag!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


# --------------------------------------------------------------------------- #
# Architectures
# --------------------------------------------------------------------------- #
def _double_conv(cin: int, cout: int, act: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        _ACTIVATIONS[act](),
        nn.Conv2d(cout, cout, 3, padding=1),
        _ACTIVATIONS[act](),
    )


class UNet(nn.Module):
    """Plain U-Net without normalization layers; emits foreground logits."""

    def __init__(self, depth: int = 4, base: int = 16, activation: str = "tanh"):
        super().__init__()
        chans = [base * 2**i for i in range(depth + 1)]
        self.down = nn.ModuleList([_double_conv(1, chans[0], activation)])
        self.down.extend(_double_conv(chans[i], chans[i + 1], activation) for i in range(depth))
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2) for i in reversed(range(depth))
        )
        self.dec = nn.ModuleList(
            _double_conv(2 * chans[i], chans[i], activation) for i in reversed(range(depth))
        )
        self.head = nn.Conv2d(chans[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for up, dec in zip(self.up, self.dec):
            x = dec(torch.cat([skips.pop(), up(x)], dim=1))
        return self.head(x)


class ToyLinear(nn.Module):
    """One dense layer mapping the flattened image to per-pixel logits."""

    def __init__(self, height: int, width: int):
        super().__init__()
        self.height, self.width = height, width
        self.fc = nn.Linear(height * width, height * width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        return self.fc(x.reshape(n, -1)).reshape(n, 1, self.height, self.width)


def _make_module(spec: ModelSpec) -> nn.Module:
    if spec.architecture == "toy_linear":
        module = ToyLinear(spec.height, spec.width)
    else:
        module = UNet(spec.depth, spec.base_channels, spec.activation)
    return module.to(spec.torch_dtype)


@lru_cache(maxsize=32)
def _skeleton(tag: str) -> nn.Module:
    # Parameter values of the cached module are never used; functional_call
    # always substitutes the caller's tensors.
    return _make_module(ModelSpec.from_tag(tag)).requires_grad_(False)


# --------------------------------------------------------------------------- #
# Containers
# --------------------------------------------------------------------------- #
@dataclass
class ModelWeights:
    """Ordered name -> tensor mapping; the unit of FL communication."""

    entries: dict[str, torch.Tensor]
    model_tag: str
    version: int = 0

    @property
    def names(self) -> list[str]:
        return list(self.entries)

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec.from_tag(self.model_tag)

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.entries.values())

    def check_compatible(self, other: "ModelWeights | GradientEstimate") -> None:
        tag = getattr(other, "model_tag", self.model_tag)
        if tag != self.model_tag:
            raise ModelError(f"model tag mismatch: {self.model_tag} vs {tag}")
        if list(other.entries) != self.names:
            raise ModelError("parameter names differ")
        for name, t in self.entries.items():
            if other.entries[name].shape != t.shape:
                raise ModelError(
                    f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(other.entries[name].shape)}"
                )

    def _combine(self, other: "ModelWeights", op) -> "ModelWeights":
        self.check_compatible(other)
        return ModelWeights(
            {n: op(t, other.entries[n]) for n, t in self.entries.items()}, self.model_tag, self.version
        )

    def __add__(self, other: "ModelWeights") -> "ModelWeights":
        return self._combine(other, torch.add)

    def __sub__(self, other: "ModelWeights") -> "ModelWeights":
        return self._combine(other, torch.sub)

    def scale(self, factor: float) -> "ModelWeights":
        return ModelWeights({n: t * factor for n, t in self.entries.items()}, self.model_tag, self.version)

    def clone(self, version: int | None = None) -> "ModelWeights":
        return ModelWeights(
            {n: t.detach().clone() for n, t in self.entries.items()},
            self.model_tag,
            self.version if version is None else version,
        )

    def flat(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in self.entries.values()])

    def equal(self, other: "ModelWeights") -> bool:
        return self.names == other.names and all(
            torch.equal(t, other.entries[n]) for n, t in self.entries.items()
        )


@dataclass
class GradientEstimate:
    entries: dict[str, torch.Tensor]
    provenance: str = "captured"  # captured | recovered | approximate
    learning_rate_used: float | None = None
    model_tag: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.entries)

    def flat(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in self.entries.values()])

    def scale(self, factor: float) -> "GradientEstimate":
        return GradientEstimate(
            {n: t * factor for n, t in self.entries.items()},
            self.provenance,
            self.learning_rate_used,
            self.model_tag,
            dict(self.meta),
        )


# --------------------------------------------------------------------------- #
# Operations
# --------------------------------------------------------------------------- #
def build_model(spec: ModelSpec, seed: int) -> ModelWeights:
    """Freshly initialised weights, deterministic in ``seed``.

    Initialisation is PyTorch's default (Kaiming-uniform style) drawn from a
    private RNG, so the global torch seed is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = _make_module(spec)
    entries = {n: p.detach().clone() for n, p in module.named_parameters()}
    return ModelWeights(entries, spec.tag, version=0)


def _as_batch(images, spec: ModelSpec) -> torch.Tensor:
    x = torch.as_tensor(images, dtype=spec.torch_dtype)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ModelError(f"expected image batch of shape (N, 1, H, W), got {tuple(x.shape)}")
    if tuple(x.shape[-2:]) != (spec.height, spec.width):
        raise ModelError(
            f"input spatial shape {tuple(x.shape[-2:])} does not match model {spec.height}x{spec.width}"
        )
    return x


def forward_logits(weights: ModelWeights | dict, images, tag: str | None = None) -> torch.Tensor:
    """Per-pixel logits with shape (N, 1, H, W)."""
    if isinstance(weights, ModelWeights):
        tag, params = weights.model_tag, weights.entries
    else:
        params = weights
    spec = ModelSpec.from_tag(tag)
    return functional_call(_skeleton(tag), params, (_as_batch(images, spec),))


def forward(weights: ModelWeights, image) -> torch.Tensor:
    """Foreground probability map; 2-D input gives a 2-D output."""
    probs = torch.sigmoid(forward_logits(weights, image))
    x = torch.as_tensor(image)
    if x.ndim == 2:
        return probs[0, 0]
    if x.ndim == 3:
        return probs[:, 0]
    return probs


def segmentation_loss(pred: torch.Tensor, mask) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy of a probability map."""
    target = torch.as_tensor(mask, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ModelError(f"shape mismatch: pred {tuple(pred.shape)} vs mask {tuple(target.shape)}")
    p = pred.clamp(EPS, 1 - EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def logits_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Same BCE computed from logits; numerically stable and used for training."""
    return F.binary_cross_entropy_with_logits(logits, target)


def stack_batch(samples: Sequence, spec: ModelSpec) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.as_tensor(np.stack([s.image for s in samples]), dtype=spec.torch_dtype)[:, None]
    masks = torch.as_tensor(np.stack([s.mask for s in samples]), dtype=spec.torch_dtype)[:, None]
    return images, masks


def loss_and_grad(weights: ModelWeights, images: torch.Tensor, masks: torch.Tensor):
    params = {n: t.detach().requires_grad_(True) for n, t in weights.entries.items()}
    loss = logits_loss(forward_logits(params, images, weights.model_tag), masks)
    grads = torch.autograd.grad(loss, list(params.values()))
    return loss.detach(), dict(zip(params, grads))


def compute_gradients(weights: ModelWeights, batch: Iterable) -> GradientEstimate:
    """Exact gradient of the mean BCE over ``batch`` w.r.t. every parameter."""
    batch = list(batch)
    if not batch:
        raise ModelError("cannot compute gradients of an empty batch")
    images, masks = stack_batch(batch, weights.spec)
    loss, grads = loss_and_grad(weights, images, masks)
    return GradientEstimate(grads, "captured", None, weights.model_tag, {"loss": float(loss)})


def parameter_count(spec: ModelSpec) -> int:
    return sum(math.prod(p.shape) for p in _make_module(spec).parameters())
