"""Experiment configuration: defaults, file loading, CLI overrides and validation.

Precedence is flags > file > defaults. Files are YAML or JSON with the same
flat keys as :class:`ExperimentConfig`; ``synthetic`` is a nested mapping of
:class:`~kgqa.dataset.SyntheticSpec` fields.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from ..dataset import SyntheticSpec

MODES = ("rl", "supervised", "supervised+rl", "noanswer-rl", "all")
BASELINES = ("query-mean", "ema")

PAPER_SCALE = {"d": 100, "hidden": 200, "batch_size": 256, "rollouts": 20, "beam": 100, "lr": 0.001}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mode: str = "noanswer-rl"
    seed: int = 0
    # data: a directory with graph.tsv / train.tsv / valid.tsv / test.tsv, or a synthetic spec
    data_dir: str | None = None
    synthetic: dict = field(default_factory=dict)
    # model
    d: int = 16
    hidden: int = 32
    ffnn_layers: int = 1
    # episodes and decoding
    T: int = 3
    beam: int = 20
    max_out: int = 200
    # optimisation
    batch_size: int = 64
    rollouts: int = 10
    lr: float = 0.003
    rl_epochs: int = 30
    sup_epochs: int = 20
    eval_every: int = 5
    # rewards; reward_mode follows from mode unless set. Binary rewards are 1/0.
    reward_mode: str | None = None
    r_pos: float = 10.0
    r_neg: float = -0.1
    add_noanswer: bool | None = None
    # policy-gradient details
    baseline: str = "query-mean"
    baseline_decay: float = 0.95
    entropy_weight: float = 0.02
    entropy_decay: float = 0.9
    # supervised mining
    max_paths: int = 100
    # evaluation split used for the final report
    report_split: str = "test"

    # ------------------------------------------------------------ derived
    @property
    def resolved_reward_mode(self) -> str:
        if self.reward_mode is not None:
            return self.reward_mode
        return "ternary" if self.mode in ("noanswer-rl", "all") else "binary"

    @property
    def uses_noanswer(self) -> bool:
        if self.add_noanswer is not None:
            return self.add_noanswer
        return self.mode in ("noanswer-rl", "all")

    def synthetic_spec(self) -> SyntheticSpec:
        spec = dict(self.synthetic)
        for key in ("fanout_probs", "split_fractions"):
            if key in spec:
                spec[key] = tuple(spec[key])
        spec.setdefault("seed", self.seed)
        try:
            return SyntheticSpec(**spec)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic spec: {exc}") from None

    # ------------------------------------------------------------ checks
    def validate(self) -> "ExperimentConfig":
        errs = []
        if self.mode not in MODES:
            errs.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.T < 1:
            errs.append("T must be >= 1")
        if self.beam < 1:
            errs.append("beam must be >= 1")
        for name in ("d", "hidden", "ffnn_layers", "batch_size", "rollouts", "max_out", "eval_every", "max_paths"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        for name in ("rl_epochs", "sup_epochs"):
            if getattr(self, name) < 0:
                errs.append(f"{name} must be >= 0")
        if self.lr <= 0:
            errs.append("lr must be positive")
        if self.baseline not in BASELINES:
            errs.append(f"baseline must be one of {BASELINES}")
        if not 0.0 <= self.baseline_decay < 1.0:
            errs.append("baseline_decay must lie in [0, 1)")
        if self.entropy_weight < 0 or not 0.0 < self.entropy_decay <= 1.0:
            errs.append("entropy_weight must be >= 0 and entropy_decay in (0, 1]")
        if self.report_split not in ("train", "valid", "test"):
            errs.append("report_split must be train, valid or test")
        rm = self.resolved_reward_mode
        if rm not in ("binary", "ternary"):
            errs.append(f"reward_mode must be binary or ternary, got {rm!r}")
        if rm == "ternary" and not self.uses_noanswer:
            errs.append("ternary rewards need the NO_ANSWER augmentation")
        if self.mode in ("rl", "supervised", "supervised+rl") and self.add_noanswer is None and rm == "ternary":
            errs.append(f"mode {self.mode} is binary; set add_noanswer explicitly to use ternary rewards")
        if rm == "ternary" and not self.r_neg < 0.0 < self.r_pos:
            errs.append("ternary rewards need r_neg < 0 < r_pos")
        if self.data_dir is None:
            try:
                self.synthetic_spec().validate()
            except (ConfigError, ValueError) as exc:
                errs.append(str(exc))
        if errs:
            raise ConfigError("invalid config: " + "; ".join(errs))
        return self

    # ------------------------------------------------------------ io
    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def read_config_file(path: str | Path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith(".json"):
        doc = json.loads(text)
    else:
        doc = yaml.safe_load(text)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def build_config(file: str | Path | None = None, overrides: dict | None = None,
                 paper_scale: bool = False) -> ExperimentConfig:
    """Defaults, then the preset, then the file, then explicit overrides."""
    values: dict = {}
    if paper_scale:
        values.update(PAPER_SCALE)
    if file is not None:
        values.update(read_config_file(file))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return replace(ExperimentConfig(), **values).validate()
