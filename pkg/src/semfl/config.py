"""Experiment configuration: one YAML file, validated before any work starts.

All randomness derives from the top-level ``seed`` through named sub-seeds
(``dataset``, ``model``, ``training``, ``attack``), so changing one stage's
seed never perturbs the others.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .attack import AttackConfig, AttackError
from .datagen import DataGenError, NoiseConfig, SplitPlan
from .fed import TrainConfig, TrainingError
from .model import ModelError, ModelSpec


class ConfigError(ValueError):
    pass


def sub_seed(global_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class DatasetSection:
    n_images: int = 100
    height: int = 256
    width: int = 256
    source_height: int | None = None
    source_width: int | None = None
    per_client: int = 10
    density_low: float = 0.3
    density_high: float = 0.5
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    manifest: SplitPlan = field(default_factory=SplitPlan.paper)


@dataclass(frozen=True)
class TrainingSection:
    mode: str = "fl"  # cl | fl
    subsets: tuple[str, ...] = tuple("ABCDEFGHI")
    holdout: str = "J"
    config: TrainConfig = field(default_factory=TrainConfig)
    persist_snapshots: bool = False
    snapshot_rounds: tuple[int, ...] = (1,)
    run_id: str = ""

    def resolved_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        if self.mode == "cl":
            return f"CL-{self.subsets[0]}"
        return f"FL-{len(self.subsets)}"


@dataclass(frozen=True)
class AttackSection:
    config: AttackConfig = field(default_factory=AttackConfig)
    alphas: tuple[float, ...] = ()
    victim_client: int = 1
    round: int = 1
    mode: str = "snapshots"  # snapshots | probe
    probe_image: int = 0


@dataclass(frozen=True)
class EvaluationSection:
    iou: bool = True
    mse: bool = True
    ssim: bool = True
    psnr: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSpec = field(default_factory=lambda: ModelSpec(height=256, width=256))
    training: TrainingSection = field(default_factory=TrainingSection)
    attack: AttackSection = field(default_factory=AttackSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def seed_for(self, stage: str) -> int:
        return sub_seed(self.seed, stage)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["manifest"] = self.dataset.manifest.to_dict()
        return d


# --------------------------------------------------------------------------- #
# Parsing
# --------------------------------------------------------------------------- #
def _take(cls, data: dict | None, where: str, **overrides):
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    data.update(overrides)
    try:
        return cls(**data)
    except (TypeError, DataGenError, ModelError, TrainingError, AttackError) as err:
        raise ConfigError(f"invalid {where}: {err}") from err


def _manifest(raw, per_client: int) -> SplitPlan:
    if raw in (None, "paper"):
        return SplitPlan.paper(per_client)
    if isinstance(raw, dict):
        return SplitPlan.simple({str(k): int(v) for k, v in raw.items()})
    if isinstance(raw, list):
        return SplitPlan.from_dict(raw)
    raise ConfigError(f"manifest must be 'paper', a mapping or a list, got {raw!r}")


def desk_scale_defaults() -> dict:
    """64x64 images, 40 images split 4 per subset, a depth-2 U-Net."""
    return {
        "dataset": {"n_images": 40, "height": 64, "width": 64, "per_client": 4},
        "model": {"depth": 2, "base_channels": 8},
    }


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse_config(raw: dict | None, seed: int | None = None, out_dir: str | None = None, desk_scale: bool = False) -> ExperimentConfig:
    raw = dict(raw or {})
    if desk_scale:
        raw = _merge(desk_scale_defaults(), raw)
    unknown = set(raw) - {"seed", "out_dir", "dataset", "model", "training", "attack", "evaluation"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    g_seed = int(seed if seed is not None else raw.get("seed", 0))
    tmp = ExperimentConfig(seed=g_seed)

    ds_raw = dict(raw.get("dataset") or {})
    noise = _take(NoiseConfig, ds_raw.pop("noise", None), "dataset.noise", seed=tmp.seed_for("dataset"))
    per_client = int(ds_raw.get("per_client", 10))
    manifest = _manifest(ds_raw.pop("manifest", None), per_client)
    dataset = _take(DatasetSection, ds_raw, "dataset", noise=noise, manifest=manifest)
    if manifest.fresh_total > dataset.n_images:
        raise ConfigError(
            f"manifest needs {manifest.fresh_total} images but dataset.n_images is {dataset.n_images}"
        )

    model_raw = dict(raw.get("model") or {})
    model_raw.setdefault("height", dataset.height)
    model_raw.setdefault("width", dataset.width)
    model = _take(ModelSpec, model_raw, "model")
    if (model.height, model.width) != (dataset.height, dataset.width):
        raise ConfigError("model input dims must equal dataset image dims")

    tr_raw = dict(raw.get("training") or {})
    section_keys = {"mode", "subsets", "holdout", "persist_snapshots", "snapshot_rounds", "run_id"}
    tr_cfg = {k: v for k, v in tr_raw.items() if k not in section_keys}
    tr_cfg.setdefault("seed", tmp.seed_for("training"))
    train_cfg = _take(TrainConfig, tr_cfg, "training")
    sec = {k: v for k, v in tr_raw.items() if k in section_keys}
    if "subsets" in sec:
        subs = sec["subsets"]
        sec["subsets"] = tuple([subs] if isinstance(subs, str) else subs)
    if "snapshot_rounds" in sec:
        sec["snapshot_rounds"] = tuple(int(r) for r in sec["snapshot_rounds"])
    training = _take(TrainingSection, sec, "training", config=train_cfg)
    names = {s.name for s in manifest.subsets}
    if training.mode not in ("cl", "fl"):
        raise ConfigError("training.mode must be 'cl' or 'fl'")
    missing = [s for s in (*training.subsets, training.holdout) if s not in names]
    if missing:
        raise ConfigError(f"training references subsets not in the manifest: {missing}")
    if training.mode == "cl" and len(training.subsets) != 1:
        raise ConfigError("cl mode trains on exactly one subset")
    if train_cfg.attack_compatible:
        if train_cfg.local_epochs != 1:
            raise ConfigError("attack-compatible runs need local_epochs = 1")
        sizes = _subset_sizes(manifest)
        biggest = max(sizes.get(s, 0) for s in training.subsets)
        if train_cfg.batch_size < biggest:
            raise ConfigError(
                "attack-compatible runs need batch_size >= client dataset size (one full-batch step)"
            )

    at_raw = dict(raw.get("attack") or {})
    at_keys = {"alphas", "victim_client", "round", "mode", "probe_image"}
    at_cfg = {k: v for k, v in at_raw.items() if k not in at_keys}
    at_cfg.setdefault("seed", tmp.seed_for("attack"))
    attack_cfg = _take(AttackConfig, at_cfg, "attack")
    at_sec = {k: v for k, v in at_raw.items() if k in at_keys}
    if "alphas" in at_sec:
        at_sec["alphas"] = tuple(float(a) for a in at_sec["alphas"])
        if any(not 0 <= a <= 1 for a in at_sec["alphas"]):
            raise ConfigError("attack.alphas must lie in [0, 1]")
    attack = _take(AttackSection, at_sec, "attack", config=attack_cfg)
    if attack.mode not in ("snapshots", "probe"):
        raise ConfigError("attack.mode must be 'snapshots' or 'probe'")

    evaluation = _take(EvaluationSection, raw.get("evaluation"), "evaluation")
    return ExperimentConfig(
        seed=g_seed,
        out_dir=str(out_dir or raw.get("out_dir", "runs")),
        dataset=dataset,
        model=model,
        training=training,
        attack=attack,
        evaluation=evaluation,
    )


def _subset_sizes(plan: SplitPlan) -> dict[str, int]:
    sizes: dict[str, int] = {}
    for s in plan.subsets:
        sizes[s.name] = sum(sizes[n] for n in s.union_of) if s.role == "union" else s.count
    return sizes


def load_config(path: str | Path | None, **kwargs: Any) -> ExperimentConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"cannot parse {p}: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
    return parse_config(raw, **kwargs)


def with_training(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, training=replace(cfg.training, **changes))
