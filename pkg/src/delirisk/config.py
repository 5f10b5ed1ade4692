"""Pipeline configuration: one YAML file, one master seed.

Every stage derives its own seed from (master_seed, stage name), so a
single integer pins the whole run. Artifact files live under output_dir
at fixed relative names; timestamps go only to run.log.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(Exception):
    pass


def stage_seed(master_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 63)


@dataclass
class SynthSection:
    n_stays: int = 2000
    delirium_rate: float = 0.05
    noise_scale: float = 0.35
    missing_rate: float = 0.08
    signal_features: dict = field(default_factory=lambda: {
        "lactic_acid": 3.0, "creatinine": 2.3, "age": 1.5})
    exclusion_plant: dict = field(default_factory=dict)


@dataclass
class ReportSection:
    min_frequency: int = 2
    max_seq_len: int = 256


@dataclass
class ModelSection:
    num_layers: int = 2
    hidden_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 128
    dropout_rate: float = 0.0


@dataclass
class SearchSection:
    n_trials: int = 20
    max_epochs: int = 10
    lr_low: float = 1e-5
    lr_high: float = 1e-3
    batch_sizes: tuple = (8, 16, 32)
    mask_rate: float = 0.15


@dataclass
class BaselineSection:
    hidden: int = 64
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 64


@dataclass
class EvalSection:
    iterations: int = 200
    days: int = 7


@dataclass
class AttributionSection:
    mode: str = "auto"
    permutations: int = 200
    sample_cap: int = 24


@dataclass
class PipelineConfig:
    master_seed: int = 0
    output_dir: Path = Path("out")
    workers: int = 1
    synth: SynthSection = field(default_factory=SynthSection)
    report: ReportSection = field(default_factory=ReportSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: SearchSection = field(default_factory=SearchSection)
    finetune: SearchSection = field(default_factory=SearchSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    eval: EvalSection = field(default_factory=EvalSection)
    attribution: AttributionSection = field(default_factory=AttributionSection)

    # fixed artifact layout under output_dir
    def tables_dir(self) -> Path:
        return self.output_dir / "tables"

    def table_path(self, name: str) -> Path:
        return self.tables_dir() / f"{name}.csv"

    def features_path(self) -> Path:
        return self.tables_dir() / "features.csv"

    def artifact(self, name: str) -> Path:
        return self.output_dir / name

    def checkpoint(self, name: str) -> Path:
        return self.output_dir / "checkpoints" / f"{name}.npz"

    def seed_for(self, stage: str) -> int:
        return stage_seed(self.master_seed, stage)


_SECTIONS = {
    "synth": SynthSection,
    "report": ReportSection,
    "model": ModelSection,
    "pretrain": SearchSection,
    "finetune": SearchSection,
    "baseline": BaselineSection,
    "eval": EvalSection,
    "attribution": AttributionSection,
}


def _build_section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    valid = set(cls.__dataclass_fields__)
    unknown = set(data) - valid
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    if "batch_sizes" in data:
        data = dict(data, batch_sizes=tuple(data["batch_sizes"]))
    return cls(**data)


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")

    cfg = PipelineConfig()
    known = {"master_seed", "output_dir", "workers"} | set(_SECTIONS)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "master_seed" in raw:
        cfg.master_seed = int(raw["master_seed"])
    if "output_dir" in raw:
        cfg.output_dir = Path(raw["output_dir"])
    if "workers" in raw:
        cfg.workers = int(raw["workers"])
    for name, cls in _SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _build_section(cls, raw[name], name))
    _validate(cfg)
    return cfg


def _validate(cfg: PipelineConfig) -> None:
    checks = [
        (0 < cfg.synth.delirium_rate < 1, "synth.delirium_rate must be in (0,1)"),
        (cfg.synth.n_stays >= 1, "synth.n_stays must be positive"),
        (cfg.report.max_seq_len >= 8, "report.max_seq_len must be >= 8"),
        (cfg.model.hidden_dim % cfg.model.num_heads == 0,
         "model.num_heads must divide model.hidden_dim"),
        (0 <= cfg.model.dropout_rate < 1, "model.dropout_rate must be in [0,1)"),
        (cfg.pretrain.n_trials >= 1 and cfg.finetune.n_trials >= 1,
         "n_trials must be >= 1"),
        (0 < cfg.pretrain.mask_rate < 1, "pretrain.mask_rate must be in (0,1)"),
        (cfg.eval.iterations >= 1, "eval.iterations must be >= 1"),
        (cfg.eval.days >= 1, "eval.days must be >= 1"),
        (cfg.attribution.mode in ("auto", "exact", "monte_carlo"),
         "attribution.mode must be auto|exact|monte_carlo"),
        (cfg.attribution.permutations >= 1, "attribution.permutations must be >= 1"),
        (cfg.workers >= 1, "workers must be >= 1"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
