"""Synthetic SEM-style images of IC layout layers, plus client partitioning.

Layouts are Manhattan geometry (axis-aligned tracks, blocks and contacts).
Rendering uses a two-level Gaussian model with an additional
signal-dependent shot-noise term::

    pixel = class_mean + N(0, std_dev**2) + N(0, class_mean * shot_noise / dwell_time)

which is the usual Gaussian approximation of Poisson counting noise whose
variance grows with the signal and shrinks with longer dwell per pixel. Both
noise terms are zero-mean, so the only bias in a class mean comes from
clamping to [0, 255]; see :func:`clamp_bias_bound`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.stats import norm
from skimage.transform import resize

MIN_DIM = 8


class DataGenError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    background_mean: float = 75.0
    foreground_mean: float = 135.0
    std_dev: float = 20.0
    shot_noise: float = 20.0
    dwell_time: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.background_mean < self.foreground_mean <= 255:
            raise DataGenError("need 0 <= background_mean < foreground_mean <= 255")
        if self.std_dev <= 0:
            raise DataGenError("std_dev must be positive")
        if self.shot_noise < 0:
            raise DataGenError("shot_noise must be non-negative")
        if self.dwell_time <= 0:
            raise DataGenError("dwell_time must be positive")

    def class_sigma(self, level: float) -> float:
        """Total per-pixel std (gray levels) for a class with mean ``level``."""
        return math.sqrt(self.std_dev**2 + level * self.shot_noise / self.dwell_time)


@dataclass
class SemSample:
    image: np.ndarray  # float64 in [0, 1]
    mask: np.ndarray  # uint8 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape or self.image.ndim != 2:
            raise DataGenError(
                f"image {self.image.shape} and mask {self.mask.shape} must be equal 2-D shapes"
            )
        if self.image.size and (self.image.min() < 0 or self.image.max() > 1):
            raise DataGenError("image values must lie in [0, 1]")
        check_mask(self.mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


@dataclass
class ClientDataset:
    subset_name: str
    samples: list[SemSample]
    owner: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]


@dataclass(frozen=True)
class SubsetPlan:
    """One manifest entry.

    ``union_of`` marks a derived subset (e.g. K = A..I) that reuses samples of
    other subsets instead of consuming fresh ones.
    """

    name: str
    count: int = 0
    owner: str = ""
    role: str = "train"  # train | holdout | union
    union_of: tuple[str, ...] = ()


@dataclass(frozen=True)
class SplitPlan:
    subsets: tuple[SubsetPlan, ...] = field(default_factory=tuple)

    @classmethod
    def paper(cls, per_client: int = 10) -> "SplitPlan":
        """Subsets A-I (clients 1-9), hold-out J, and K = A..I."""
        train = "ABCDEFGHI"
        entries = [SubsetPlan(n, per_client, f"client{i + 1}") for i, n in enumerate(train)]
        entries.append(SubsetPlan("J", per_client, "client10", role="holdout"))
        entries.append(SubsetPlan("K", 0, "client1", role="union", union_of=tuple(train)))
        return cls(tuple(entries))

    @classmethod
    def simple(cls, counts: dict[str, int]) -> "SplitPlan":
        return cls(tuple(SubsetPlan(n, c, f"client{i + 1}") for i, (n, c) in enumerate(counts.items())))

    @property
    def fresh_total(self) -> int:
        return sum(s.count for s in self.subsets if s.role != "union")

    def to_dict(self) -> list[dict]:
        return [
            {"name": s.name, "count": s.count, "owner": s.owner, "role": s.role, "union_of": list(s.union_of)}
            for s in self.subsets
        ]

    @classmethod
    def from_dict(cls, items: list[dict]) -> "SplitPlan":
        return cls(
            tuple(
                SubsetPlan(
                    name=str(d["name"]),
                    count=int(d.get("count", 0)),
                    owner=str(d.get("owner", "")),
                    role=str(d.get("role", "train")),
                    union_of=tuple(d.get("union_of", ())),
                )
                for d in items
            )
        )


def check_mask(mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise DataGenError("mask must be 2-D")
    if not np.isin(mask, (0, 1)).all():
        raise DataGenError("mask must be strictly binary")


# --------------------------------------------------------------------------- #
# Layout synthesis
# --------------------------------------------------------------------------- #
def _random_rect(rng: np.random.Generator, h: int, w: int, scale: int) -> tuple[int, int, int, int]:
    kind = rng.choice(3, p=(0.45, 0.35, 0.20))
    if kind == 0:  # horizontal track
        th = int(rng.integers(max(1, scale // 2), scale + 1))
        tw = int(rng.integers(max(2, w // 4), w + 1))
    elif kind == 1:  # vertical track
        tw = int(rng.integers(max(1, scale // 2), scale + 1))
        th = int(rng.integers(max(2, h // 4), h + 1))
    else:  # block / contact
        th = int(rng.integers(max(1, scale // 2), 2 * scale + 1))
        tw = int(rng.integers(max(1, scale // 2), 2 * scale + 1))
    th, tw = min(th, h), min(tw, w)
    y = int(rng.integers(0, h - th + 1))
    x = int(rng.integers(0, w - tw + 1))
    return y, x, th, tw


def generate_layout(height: int, width: int, structure_density: float, seed: int) -> np.ndarray:
    """Binary Manhattan layout with foreground fraction near ``structure_density``.

    Rectangles are stamped until the fraction enters the +/-10% relative band.
    A rectangle that would overshoot the band is retried smaller, down to
    single-pixel contacts, so the loop always terminates. When the band holds
    no integer pixel count (tiny images, extreme densities) the nearest count
    with both classes present is used.
    """
    if height < MIN_DIM or width < MIN_DIM:
        raise DataGenError(f"layout dimensions must be >= {MIN_DIM}, got {height}x{width}")
    if not 0 < structure_density < 1:
        raise DataGenError(f"structure_density must lie in (0, 1), got {structure_density}")

    rng = np.random.default_rng(seed)
    total = height * width
    lo = math.ceil(0.9 * structure_density * total)
    hi = math.floor(1.1 * structure_density * total)
    if lo > hi:
        lo = hi = round(structure_density * total)
    lo, hi = max(lo, 1), min(hi, total - 1)

    mask = np.zeros((height, width), dtype=np.uint8)
    scale = max(1, min(height, width) // 12)
    count = 0
    while count < lo:
        y, x, th, tw = _random_rect(rng, height, width, scale)
        for _ in range(8):
            added = th * tw - int(mask[y : y + th, x : x + tw].sum())
            if count + added <= hi:
                break
            th, tw = max(1, th // 2), max(1, tw // 2)
        if count + added > hi:
            continue
        mask[y : y + th, x : x + tw] = 1
        count += added
    return mask


# --------------------------------------------------------------------------- #
# Rendering
# --------------------------------------------------------------------------- #
def render_sem(mask: np.ndarray, cfg: NoiseConfig, sample_id: str | None = None) -> SemSample:
    check_mask(mask)
    rng = np.random.default_rng(cfg.seed)
    levels = np.where(mask == 1, cfg.foreground_mean, cfg.background_mean).astype(np.float64)
    noisy = levels + rng.normal(0.0, cfg.std_dev, size=mask.shape)
    if cfg.shot_noise > 0:
        shot_std = np.sqrt(levels * cfg.shot_noise / cfg.dwell_time)
        noisy += shot_std * rng.standard_normal(mask.shape)
    image = np.clip(noisy, 0.0, 255.0) / 255.0
    return SemSample(image=image, mask=mask.astype(np.uint8), id=sample_id or f"sem-{cfg.seed}")


def clamp_bias_bound(level: float, sigma: float) -> float:
    """Largest shift (gray levels) of a class mean caused by clamping to [0, 255].

    For X ~ N(mu, s) the clamp to [0, 255] moves the mean by at most the sum
    of the lower- and upper-tail partial expectations, which is bounded by
    ``s * (phi(a) + phi(b))`` with a = mu / s and b = (255 - mu) / s.
    """
    a, b = level / sigma, (255.0 - level) / sigma
    return sigma * (norm.pdf(a) + norm.pdf(b))


def class_mean_tolerance(cfg: NoiseConfig, level: float, n_pixels: int) -> float:
    """3 standard errors plus the clamp bias, in gray levels."""
    sigma = cfg.class_sigma(level)
    return 3.0 * sigma / math.sqrt(n_pixels) + clamp_bias_bound(level, sigma)


# --------------------------------------------------------------------------- #
# Corpus, splits, resize
# --------------------------------------------------------------------------- #
def generate_corpus(
    n: int,
    size: tuple[int, int] = (256, 256),
    noise: NoiseConfig | None = None,
    seed: int = 0,
    density_range: tuple[float, float] = (0.3, 0.5),
) -> list[SemSample]:
    """``n`` samples with per-sample layout and noise seeds derived from ``seed``."""
    noise = noise or NoiseConfig()
    children = np.random.SeedSequence(seed).spawn(n)
    samples = []
    for i, child in enumerate(children):
        layout_seed, noise_seed = (int(v) for v in child.generate_state(2))
        rng = np.random.default_rng(layout_seed)
        density = float(rng.uniform(*density_range))
        mask = generate_layout(size[0], size[1], density, layout_seed)
        cfg = NoiseConfig(**{**asdict(noise), "seed": noise_seed})
        samples.append(render_sem(mask, cfg, sample_id=f"sem{i:04d}"))
    return samples


def build_experiment_splits(samples: list[SemSample], plan: SplitPlan) -> list[ClientDataset]:
    names = [s.name for s in plan.subsets]
    if len(set(names)) != len(names):
        raise DataGenError("duplicate subset names in manifest")
    if plan.fresh_total > len(samples):
        raise DataGenError(
            f"insufficient samples: manifest needs {plan.fresh_total}, got {len(samples)}"
        )
    out: dict[str, ClientDataset] = {}
    cursor = 0
    for entry in plan.subsets:
        if entry.role == "union":
            missing = [n for n in entry.union_of if n not in out]
            if missing:
                raise DataGenError(f"subset {entry.name} references unknown subsets {missing}")
            merged = [s for n in entry.union_of for s in out[n].samples]
            out[entry.name] = ClientDataset(entry.name, merged, entry.owner)
            continue
        chunk = samples[cursor : cursor + entry.count]
        cursor += entry.count
        out[entry.name] = ClientDataset(entry.name, list(chunk), entry.owner)
    return [out[n] for n in names]


def resize_sample(sample: SemSample, height: int, width: int) -> SemSample:
    if height < MIN_DIM or width < MIN_DIM:
        raise DataGenError(f"target dimensions must be >= {MIN_DIM}")
    if sample.shape == (height, width):
        return SemSample(sample.image.copy(), sample.mask.copy(), sample.id)
    image = resize(sample.image, (height, width), order=1, mode="edge", anti_aliasing=False)
    mask = resize(
        sample.mask.astype(np.float64), (height, width), order=0, mode="edge", anti_aliasing=False
    )
    return SemSample(
        np.clip(image, 0.0, 1.0), (mask >= 0.5).astype(np.uint8), sample.id
    )


# --------------------------------------------------------------------------- #
# Export / import
# --------------------------------------------------------------------------- #
MANIFEST_NAME = "manifest.json"


def export_dataset(
    datasets: list[ClientDataset],
    out_dir: str | Path,
    noise: NoiseConfig | None = None,
    plan: SplitPlan | None = None,
    extra: dict | None = None,
) -> Path:
    """Write one directory per subset (8-bit image PNGs, 1-bit mask PNGs) plus a manifest.

    Union subsets are recorded in the manifest only; their samples live in the
    member subsets' directories.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    unions = {s.name: s for s in plan.subsets if s.role == "union"} if plan else {}
    subsets = []
    for ds in datasets:
        entry = {"name": ds.subset_name, "owner": ds.owner, "ids": ds.ids}
        if ds.subset_name in unions:
            entry["union_of"] = list(unions[ds.subset_name].union_of)
        else:
            sub = out / ds.subset_name
            sub.mkdir(exist_ok=True)
            for s in ds.samples:
                Image.fromarray(to_uint8(s.image), mode="L").save(sub / f"{s.id}_image.png")
                Image.fromarray(s.mask.astype(bool)).convert("1").save(sub / f"{s.id}_mask.png")
        subsets.append(entry)
    manifest = {
        "format": "semfl-dataset/1",
        "noise": asdict(noise) if noise else None,
        "plan": plan.to_dict() if plan else None,
        "subsets": subsets,
        **(extra or {}),
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def import_dataset(data_dir: str | Path) -> tuple[list[ClientDataset], dict]:
    root = Path(data_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    by_name: dict[str, ClientDataset] = {}
    for entry in manifest["subsets"]:
        if "union_of" in entry:
            members = [s for n in entry["union_of"] for s in by_name[n].samples]
            by_name[entry["name"]] = ClientDataset(entry["name"], members, entry.get("owner", ""))
            continue
        sub = root / entry["name"]
        samples = []
        for sid in entry["ids"]:
            img = np.asarray(Image.open(sub / f"{sid}_image.png").convert("L"), dtype=np.float64) / 255.0
            mask = (np.asarray(Image.open(sub / f"{sid}_mask.png").convert("L")) > 0).astype(np.uint8)
            samples.append(SemSample(img, mask, sid))
        by_name[entry["name"]] = ClientDataset(entry["name"], samples, entry.get("owner", ""))
    return [by_name[e["name"]] for e in manifest["subsets"]], manifest


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def manifest_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
