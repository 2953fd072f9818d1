"""Run configuration: one JSON key tree covering data, model, training and paths."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SynthConfig
from .encoder import EncoderConfig
from .finetune import FinetuneSettings
from .pretrain import PretrainSettings


class ConfigError(ValueError):
    pass


@dataclass
class PretrainConfig(PretrainSettings):
    epochs: int = 40
    batch_size: int = 128
    lr_backbone: float = 5e-5
    lr_heads: float = 5e-4
    warmup_ratio: float = 0.06
    weight_decay: float = 0.01
    dropout: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        super().__post_init__()
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("pretrain epochs must be >= 0 and batch_size positive")
        if self.lr_backbone <= 0 or self.lr_heads <= 0:
            raise ValueError("pretrain learning rates must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")

    def settings(self) -> PretrainSettings:
        names = {f.name for f in fields(PretrainSettings)}
        return PretrainSettings(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class FinetuneConfig(FinetuneSettings):
    weight_decay: float = 0.01
    dropout: bool = True
    n_folds: int = 5
    init_checkpoint: str | None = None

    def settings(self) -> FinetuneSettings:
        names = {f.name for f in fields(FinetuneSettings)}
        return FinetuneSettings(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class EnsembleConfig:
    k: int = 256


@dataclass
class PathsConfig:
    run_dir: str = "runs/default"
    dataset: str = "runs/default/data"


@dataclass
class RunConfig:
    seed: int = 7
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        sections = {
            "paths": PathsConfig,
            "data": SynthConfig,
            "encoder": EncoderConfig,
            "pretrain": PretrainConfig,
            "finetune": FinetuneConfig,
            "ensemble": EnsembleConfig,
        }
        unknown = set(d) - set(sections) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        kwargs = {}
        for name, klass in sections.items():
            sub = d.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in fields(klass)}
            extra = set(sub) - allowed
            if extra:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
            try:
                kwargs[name] = klass(**sub)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"section {name!r}: {exc}") from exc
        cfg = cls(seed=int(d.get("seed", 7)), **kwargs)
        cfg.check()
        return cfg

    def check(self) -> None:
        if self.encoder.vocab_size != self.data.vocab_size:
            raise ConfigError(
                f"encoder.vocab_size {self.encoder.vocab_size} != data.vocab_size {self.data.vocab_size}"
            )
        if self.encoder.frame_dim != self.data.frame_dim:
            raise ConfigError(f"encoder.frame_dim {self.encoder.frame_dim} != data.frame_dim {self.data.frame_dim}")
        if self.data.frame_count_range[1] > self.encoder.max_frames:
            raise ConfigError("data.frame_count_range exceeds encoder.max_frames")
        if self.data.title_len_range[1] > self.encoder.max_title_len:
            raise ConfigError("data.title_len_range exceeds encoder.max_title_len")


def desk_preset() -> RunConfig:
    """Small model and short schedules that finish in minutes on one CPU core."""
    cfg = RunConfig()
    cfg.encoder = EncoderConfig(
        n_layers=2, hidden_dim=64, n_heads=4, ffn_dim=128,
        vocab_size=cfg.data.vocab_size, frame_dim=cfg.data.frame_dim,
        max_frames=8, max_title_len=12, dropout_rate=0.0,
    )
    cfg.pretrain = PretrainConfig(epochs=15, batch_size=32, lr_backbone=1e-3, lr_heads=1e-3, n_tags=60)
    cfg.finetune = FinetuneConfig(epochs=6, batch_size=32, lr_backbone=5e-4, lr_head=1e-3, embed_dim=256)
    cfg.ensemble = EnsembleConfig(k=256)
    return cfg


def paper_preset() -> RunConfig:
    """The published training hyperparameters (model size is still desk scale)."""
    return RunConfig()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(d)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
