"""Experiment configuration: strict JSON schema, validation and seed streams."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from .cl import TrainerConfig
from .datasets import Regime, SequenceSpec
from .models import ModelConfig, Setting
from .scorers import PROTOTYPE_SCORERS, SCORERS

METHODS = ("finetune", "mas", "lwf", "er", "ssil")
REPLAY_METHODS = ("er", "ssil")

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


class ConfigError(ValueError):
    pass


def splitmix64(state: int) -> int:
    z = state & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Seed of run ``index``: the ``index``-th output of a splitmix64 stream.

    Each output depends only on ``(master_seed, index)``, so asking for
    more seeds never changes the earlier ones.
    """
    return splitmix64(master_seed + (index + 1) * GOLDEN)


@dataclass
class ScorerOptions:
    b2_n: int = 2
    vae_input: str = "raw"
    vae_epochs: int = 30
    vae_samples: int = 8
    mahalanobis_ridge: float = 1e-3


@dataclass
class ExperimentConfig:
    sequence: SequenceSpec = field(default_factory=SequenceSpec)
    data_path: Optional[str] = None
    setting: Setting = Setting.MULTI_HEAD
    method: str = "finetune"
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    scorers: tuple = ("softmax",)
    scorer_options: ScorerOptions = field(default_factory=ScorerOptions)
    seeds: int = 10
    master_seed: int = 0
    output_dir: str = "runs/default"

    # -- validation ----------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        try:
            setting = Setting(self.setting)
        except ValueError:
            raise ConfigError(f"unknown setting {self.setting!r}") from None
        if self.method in REPLAY_METHODS and setting is not Setting.SHARED_HEAD:
            raise ConfigError(f"{self.method} requires setting 'shared_head'")
        unknown = [s for s in self.scorers if s not in SCORERS]
        if unknown:
            raise ConfigError(f"unknown scorers {unknown}; choose from {SCORERS}")
        if len(set(self.scorers)) != len(self.scorers):
            raise ConfigError("duplicate scorer names")
        if any(s in PROTOTYPE_SCORERS for s in self.scorers):
            if self.model.head_bias:
                raise ConfigError("b1/b2 need a bias-free head: set model.head_bias to false")
            if setting is Setting.SHARED_HEAD and not self.model.normalized_head:
                raise ConfigError("shared-head b1/b2 need model.normalized_head true")
            if not 2 <= self.scorer_options.b2_n <= self.sequence.classes_per_stage:
                raise ConfigError("scorer_options.b2_n must be in [2, classes_per_stage]")
        if self.scorer_options.vae_input not in ("raw", "features"):
            raise ConfigError("scorer_options.vae_input must be 'raw' or 'features'")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if self.model.input_dim != self.sequence.input_dim:
            raise ConfigError("model.input_dim must equal sequence.input_dim")
        try:
            self.sequence.validate()
            self.trainer.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    # -- (de)serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        seq = self.sequence.to_dict()
        seq.pop("seed")
        trainer = asdict(self.trainer)
        trainer.pop("seed")
        model = asdict(self.model)
        model.pop("input_dim")
        model["hidden"] = list(self.model.hidden)
        return {
            "sequence": seq,
            "data_path": self.data_path,
            "setting": Setting(self.setting).value,
            "method": self.method,
            "trainer": trainer,
            "model": model,
            "scorers": list(self.scorers),
            "scorer_options": asdict(self.scorer_options),
            "seeds": self.seeds,
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
        }

    def hash(self) -> str:
        """Digest of everything that affects per-seed results.

        ``output_dir`` and the seed count are excluded, so a record can be
        extended with more seeds.
        """
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("seeds")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        top = {f.name for f in fields(cls)}
        _reject_unknown(raw, top, "config")
        kw = {}
        if "sequence" in raw:
            allowed = {f.name for f in fields(SequenceSpec)} - {"seed"}
            _reject_unknown(raw["sequence"], allowed, "sequence")
            seq = dict(raw["sequence"])
            if "regime" in seq:
                try:
                    seq["regime"] = Regime(seq["regime"])
                except ValueError:
                    raise ConfigError(f"unknown regime {seq['regime']!r}") from None
            kw["sequence"] = SequenceSpec(**seq)
        if "trainer" in raw:
            _reject_unknown(raw["trainer"], {f.name for f in fields(TrainerConfig)} - {"seed"}, "trainer")
            kw["trainer"] = TrainerConfig(**raw["trainer"])
        if "model" in raw:
            _reject_unknown(raw["model"], {f.name for f in fields(ModelConfig)} - {"input_dim"}, "model")
            m = dict(raw["model"])
            if "hidden" in m:
                m["hidden"] = tuple(m["hidden"])
            kw["model"] = ModelConfig(**m)
        if "scorer_options" in raw:
            _reject_unknown(raw["scorer_options"], {f.name for f in fields(ScorerOptions)}, "scorer_options")
            kw["scorer_options"] = ScorerOptions(**raw["scorer_options"])
        for key in ("data_path", "method", "seeds", "master_seed", "output_dir"):
            if key in raw:
                kw[key] = raw[key]
        if "setting" in raw:
            try:
                kw["setting"] = Setting(raw["setting"])
            except ValueError:
                raise ConfigError(f"unknown setting {raw['setting']!r}") from None
        if "scorers" in raw:
            kw["scorers"] = tuple(raw["scorers"])
        cfg = cls(**kw)
        cfg.model = replace(cfg.model, input_dim=cfg.sequence.input_dim)
        # prototype scorers imply a bias-free (and, shared-head, normalized)
        # final layer unless the config says otherwise explicitly
        given = raw.get("model", {})
        if any(s in PROTOTYPE_SCORERS for s in cfg.scorers):
            if "head_bias" not in given:
                cfg.model.head_bias = False
            if Setting(cfg.setting) is Setting.SHARED_HEAD and "normalized_head" not in given:
                cfg.model.normalized_head = True
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw)


def _reject_unknown(section, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(section) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {extra}")


def with_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply dotted-path overrides (``{"trainer.mas_lambda": 0.5}``) via the dict form."""
    d = cfg.to_dict()
    for path, value in overrides.items():
        node = d
        *parents, leaf = path.split(".")
        for p in parents:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"bad override path {path!r}")
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"bad override path {path!r}")
        node[leaf] = value
    return ExperimentConfig.from_dict(d)
