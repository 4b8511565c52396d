"""Experiment configuration: JSON validated against ``config.schema.json``, unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

import jsonschema

from .data import SynthConfig
from .detect import Detector
from .errors import ConfigError
from .synth import AugmentConfig, MixupConfig

# fine-tuning defaults follow the single-epoch recipe: SGD, lr 1e-4, momentum 0.9
FINETUNE_LR = 0.0001
FINETUNE_MOMENTUM = 0.9
DEFAULT_K = 10
DEFAULT_DETECTORS = ("msp", "max_logit", "energy", "entropy", "kl_matching", "mahalanobis")


def load_schema() -> dict:
    text = resources.files("mimood").joinpath("config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    lr: float
    momentum: float
    batch_size: int
    seed: int


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = FINETUNE_LR
    momentum: float = FINETUNE_MOMENTUM
    batch_size: int = 32
    seed: int = 0
    mixup: MixupConfig = field(default_factory=lambda: MixupConfig(k=DEFAULT_K))
    # None means: resize to the classifier's input H x W, other augmentation defaults
    augment: Optional[AugmentConfig] = None
    augment_overrides: tuple = ()

    def augment_for(self, input_hw: tuple[int, int]) -> AugmentConfig:
        if self.augment is not None:
            return self.augment
        return AugmentConfig(target_hw=input_hw, **dict(self.augment_overrides))


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    base_dir: Path
    name: str
    id_dataset: dict
    ood_datasets: tuple
    architecture: Union[str, dict]
    pretrain: TrainConfig
    finetune: FinetuneConfig
    detectors: tuple
    positive_class: str
    output_dir: Path
    model_path: Optional[Path]

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    @property
    def synthetic(self) -> Optional[SynthConfig]:
        if self.id_dataset["kind"] != "synthetic":
            return None
        fields = {k: v for k, v in self.id_dataset.items() if k != "kind"}
        return SynthConfig(**fields)

    def make_detectors(self) -> list[Detector]:
        return [Detector(**spec) for spec in self.detectors]

    def resolve(self, p: str) -> Path:
        return _resolve(self.base_dir, p)


def _resolve(base_dir: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base_dir / path


def parse_config(raw: Any, base_dir: Union[str, Path] = ".", env: Optional[dict] = None) -> ExperimentConfig:
    """Validate a decoded JSON document and fill in defaults."""
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    base_dir = Path(base_dir)
    id_spec = dict(raw["id_dataset"])
    kind = id_spec["kind"]
    cifar = kind == "cifar10"

    ood = [dict(o) for o in raw.get("ood_datasets", [{"kind": "synthetic"}] if kind == "synthetic" else [])]
    if not ood:
        raise ConfigError("ood_datasets is required unless the ID dataset is synthetic")
    if kind != "synthetic" and any(o["kind"] == "synthetic" for o in ood):
        raise ConfigError("synthetic OOD sets need a synthetic ID dataset")

    pre = raw.get("pretrain", {})
    pretrain = TrainConfig(
        epochs=int(pre.get("epochs", 20 if cifar else 30)),
        lr=float(pre.get("lr", 0.01)),
        momentum=float(pre.get("momentum", 0.9)),
        batch_size=int(pre.get("batch_size", 128 if cifar else 32)),
        seed=int(pre.get("seed", 0)),
    )

    ft = raw.get("finetune", {})
    mix = ft.get("mixup", {})
    ft_batch = int(ft.get("batch_size", 128 if cifar else 32))
    mixup = MixupConfig(
        k=int(mix.get("k", DEFAULT_K)),
        weight_mode=mix.get("weight_mode", "equal"),
        alpha=float(mix.get("alpha", 1.0)),
        seed=int(ft.get("seed", 0)),
    )
    if mixup.k > ft_batch:
        raise ConfigError(f"mixup k={mixup.k} must not exceed the fine-tune batch size {ft_batch}")
    aug_raw = dict(ft.get("augment", {}))
    augment = None
    overrides = tuple(sorted((k, tuple(v)) for k, v in aug_raw.items() if k != "target_hw"))
    if "target_hw" in aug_raw:
        augment = AugmentConfig(target_hw=tuple(aug_raw["target_hw"]), **dict(overrides))
    else:
        AugmentConfig(**dict(overrides))  # validate the intervals early
    finetune = FinetuneConfig(
        lr=float(ft.get("lr", FINETUNE_LR)),
        momentum=float(ft.get("momentum", FINETUNE_MOMENTUM)),
        batch_size=ft_batch,
        seed=int(ft.get("seed", 0)),
        mixup=mixup,
        augment=augment,
        augment_overrides=overrides,
    )

    detectors = []
    for d in raw.get("detectors", DEFAULT_DETECTORS):
        spec = {"kind": d} if isinstance(d, str) else dict(d)
        Detector(**spec)
        detectors.append(spec)

    env = env if env is not None else {}
    out = env.get("MIM_OUT_DIR") or raw.get("output_dir", "runs/" + raw.get("name", "experiment"))
    out_path = _resolve(base_dir, out)
    model_path = raw.get("model_path")
    cfg = ExperimentConfig(
        raw=raw,
        base_dir=base_dir,
        name=raw.get("name", "experiment"),
        id_dataset=id_spec,
        ood_datasets=tuple(ood),
        architecture=raw.get("architecture", "cnn" if cifar else "mlp"),
        pretrain=pretrain,
        finetune=finetune,
        detectors=tuple(detectors),
        positive_class=raw.get("positive_class", "id"),
        output_dir=out_path,
        model_path=None if model_path is None else _resolve(base_dir, model_path),
    )
    cfg.synthetic  # constructing SynthConfig validates it
    return cfg


def load_config(path: Union[str, Path], env: Optional[dict] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: not valid UTF-8 JSON ({exc})") from exc
    return parse_config(raw, path.parent, env)
