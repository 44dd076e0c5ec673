"""Run configuration: one structured JSON file, flag overrides on top.

Training defaults map one-to-one onto the published hyperparameter table
(batch sizes 6/8/8, lr 1e-4 / 1e-5 / 5e-4, cosine schedule, warmup 100,
weight decay 0.01, clip norm 1, one epoch per phase when steps are unset).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .net import ModelConfig
from .taskgen import GenConfig
from .vocab import ThinkingTokenSpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    total_steps: int | None = None     # None -> one data pass per phase
    batch_size: int = 6
    recover_batch_size: int = 8
    decoder_batch_size: int = 8
    decoder_steps: int | None = None   # None -> one data pass
    lr_encoding: float = 1e-4
    lr_recover: float = 1e-5
    lr_decoder: float = 5e-4
    weight_decay: float = 0.01
    warmup: int = 100
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ModelDims:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 224

    def to_model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model,
                           n_layers=self.n_layers, n_heads=self.n_heads,
                           d_ff=self.d_ff, max_len=self.max_len)


@dataclass
class RunConfig:
    workdir: str = "runs/default"
    seed: int = 0
    n_train: int = 2000
    n_test: int = 1000
    threads: int = 1
    precision: str = "float32"
    max_new: int | None = None
    gen: GenConfig = field(default_factory=GenConfig)
    thinking: ThinkingTokenSpec = field(default_factory=ThinkingTokenSpec)
    encoder: ModelDims = field(default_factory=ModelDims)
    decoder: ModelDims = field(default_factory=ModelDims)
    train: TrainConfig = field(default_factory=TrainConfig)

    # derived paths
    @property
    def dataset_dir(self) -> Path:
        return Path(self.workdir) / "data"

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.workdir) / "checkpoints"

    @property
    def hidden_dir(self) -> Path:
        return Path(self.workdir) / "hidden"

    @property
    def report_dir(self) -> Path:
        return Path(self.workdir) / "reports"

    @property
    def vocab_path(self) -> Path:
        return self.dataset_dir / "vocab.txt"

    def dataset_path(self, split: str) -> Path:
        return self.dataset_dir / f"{split}.jsonl"

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "workdir": self.workdir,
            "seed": self.seed,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "threads": self.threads,
            "precision": self.precision,
            "max_new": self.max_new,
            "gen": asdict(self.gen),
            "thinking": asdict(self.thinking),
            "encoder": asdict(self.encoder),
            "decoder": asdict(self.decoder),
            "train": asdict(self.train),
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())


def _coerce_section(cls, data: dict, section: str, errors: list[str]):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            errors.append(f"{section}.{key}: unknown field")
            continue
        if isinstance(value, list):
            value = tuple(tuple(x) if isinstance(x, list) else x for x in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        errors.append(f"{section}: {e}")
        return cls()


def load_config(path) -> RunConfig:
    """Parse and validate a config file; all problems are reported at once."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> RunConfig:
    errors: list[str] = []
    if raw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        errors.append(f"schema_version: expected {SCHEMA_VERSION}")
    cfg = RunConfig()
    simple = {"workdir": str, "seed": int, "n_train": int, "n_test": int,
              "threads": int, "precision": str}
    for key, typ in simple.items():
        if key in raw:
            try:
                setattr(cfg, key, typ(raw[key]))
            except (TypeError, ValueError):
                errors.append(f"{key}: expected {typ.__name__}")
    if "max_new" in raw and raw["max_new"] is not None:
        cfg.max_new = int(raw["max_new"])
    for section, cls, attr in (
        ("gen", GenConfig, "gen"),
        ("thinking", ThinkingTokenSpec, "thinking"),
        ("encoder", ModelDims, "encoder"),
        ("decoder", ModelDims, "decoder"),
        ("train", TrainConfig, "train"),
    ):
        if section in raw:
            if not isinstance(raw[section], dict):
                errors.append(f"{section}: expected an object")
                continue
            setattr(cfg, attr, _coerce_section(cls, raw[section], section, errors))
    if cfg.encoder.d_model != cfg.decoder.d_model:
        errors.append(
            f"encoder.d_model {cfg.encoder.d_model} != decoder.d_model "
            f"{cfg.decoder.d_model}: hidden-state handoff requires equal widths")
    if cfg.n_train < 1 or cfg.n_test < 1:
        errors.append("n_train and n_test must be >= 1")
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` (or ``key=value``) command-line overrides."""
    data = cfg.to_dict()
    errors = []
    for item in overrides:
        if "=" not in item:
            errors.append(f"override {item!r} is not key=value")
            continue
        key, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        target = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                errors.append(f"override {key!r}: unknown section {part!r}")
                target = None
                break
            target = target[part]
        if target is None:
            continue
        if parts[-1] not in target:
            errors.append(f"override {key!r}: unknown field")
            continue
        target[parts[-1]] = parsed
    if errors:
        raise ConfigError("; ".join(errors))
    return config_from_dict(data)
