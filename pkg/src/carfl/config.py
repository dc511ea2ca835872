"""Run configuration: a closed set of dotted keys read from an INI file.

Key ``fed.m`` lives in section ``[fed]`` as ``m = 2``. Unknown sections or
keys are rejected, every value is parsed with the type of its default, and
``--set key=value`` overrides are applied on top of the file.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from typing import Any, Iterable, Optional

from carfl.dp import DpConfig, DpConfigError
from carfl.federation import FedConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    help: str
    choices: tuple = ()


KEYS = (
    Key("data.source", "synthetic", "where samples come from", ("synthetic", "file")),
    Key("data.path", "", "hidden-state/feature file read when data.source = file"),
    Key("data.n_per_class", 1000, "synthetic samples per class"),
    Key("data.n_classes", 2, "synthetic class count"),
    Key("data.dim", 16, "synthetic feature dimension (encoder embedding width)"),
    Key("data.spread", 1.0, "synthetic per-class standard deviation"),
    Key("data.seed", 0, "seed for blob generation and the holdout split"),
    Key("data.holdout", 0.2, "fraction of samples held out for validation"),
    Key("encoder.kind", "synthetic", "frozen encoder: seeded tanh stack or a precomputed "
        "table of hidden states", ("synthetic", "precomputed")),
    Key("encoder.d_hidden", 8, "hidden width of the synthetic encoder"),
    Key("encoder.depth", 2, "number of affine+tanh layers"),
    Key("encoder.pooling", "mean", "token pooling", ("mean", "eos")),
    Key("encoder.seed", 0, "seed of the encoder weights"),
    Key("model.mode", "classifier_only", "which tensors train",
        ("classifier_only", "adapter_and_classifier")),
    Key("model.pre_classifier", False, "add a hidden tanh layer with dropout before the output"),
    Key("model.dropout", 0.1, "dropout rate of the pre-classifier layer"),
    Key("model.seed", 0, "seed of the classifier initialisation"),
    Key("fed.m", 2, "number of clients"),
    Key("fed.T", 5, "communication rounds"),
    Key("fed.E", 2, "local epochs per round"),
    Key("fed.batch_size", 4, "minibatch size"),
    Key("fed.lr", 0.0, "learning rate; 0 picks 1e-3 (classifier_only) or 1e-4 "
        "(adapter_and_classifier)"),
    Key("fed.aggregation", "proportional", "FedAvg weights", ("proportional", "uniform")),
    Key("fed.partition", "even", "shard sizes", ("even", "proportions")),
    Key("fed.proportions", (), "comma-separated shard fractions for partition = proportions"),
    Key("fed.seed", 0, "seed of partitioning, shuffling, dropout and DP noise"),
    Key("fed.parallel", True, "run clients in worker processes"),
    Key("fed.steps_per_round", 0, "if > 0, local SGD steps per round instead of E epochs"),
    Key("dp.mode", "off", "local differential privacy", ("off", "fixed", "adaptive")),
    Key("dp.c0", 1.0, "clip threshold (initial threshold when adaptive)"),
    Key("dp.sigma0", 0.1, "fixed-DP noise multiplier"),
    Key("dp.beta", 0.1, "adaptive threshold EMA rate"),
    Key("dp.gamma", 0.9, "adaptive threshold multiplier of the update norm"),
    Key("dp.z", 0.1, "adaptive noise multiplier (must be < m/10)"),
    Key("dp.warmup_rounds", 0, "initial rounds trained without DP"),
    Key("dp.per_iteration", False, "apply DP after every SGD step instead of once per round"),
    Key("train.scenario", "fl", "train command scenario", ("fl", "centralized")),
    Key("train.epochs", 0, "centralized epochs; 0 means fed.T * fed.E"),
    Key("train.trace", False, "store every global iterate for the bound command"),
    Key("net.timeout_s", 120.0, "per-phase network deadline in seconds"),
    Key("eval.ks", (1,), "comma-separated K values for top-K accuracy"),
    Key("theory.gamma1", 2.0, "slack parameter Gamma_1 (> 1)"),
    Key("theory.gamma2", 2.0, "slack parameter Gamma_2 (> 1)"),
    Key("theory.reference_epochs", 200, "full-batch epochs of the F* reference run"),
    Key("theory.reference_lr", 0.5, "step size of the F* reference run"),
    Key("output.dir", "runs/latest", "run output directory"),
)

KEY_INDEX = {k.name: k for k in KEYS}
LR_DEFAULTS = {"classifier_only": 1e-3, "adapter_and_classifier": 1e-4}


def _parse(key: Key, raw: Any) -> Any:
    if not isinstance(raw, str):
        value = raw
        if isinstance(key.default, tuple):
            value = tuple(raw)
        elif isinstance(key.default, float) and isinstance(raw, int) and not isinstance(raw, bool):
            value = float(raw)
    else:
        text = raw.strip()
        d = key.default
        try:
            if isinstance(d, bool):
                low = text.lower()
                if low not in configparser.ConfigParser.BOOLEAN_STATES:
                    raise ValueError(text)
                value = configparser.ConfigParser.BOOLEAN_STATES[low]
            elif isinstance(d, int):
                value = int(text)
            elif isinstance(d, float):
                value = float(text)
            elif isinstance(d, tuple):
                item = type(d[0]) if d else float
                value = tuple(item(v) for v in text.split(",") if v.strip())
            else:
                value = text
        except ValueError:
            raise ConfigError(f"{key.name}: cannot parse {raw!r} as "
                              f"{type(key.default).__name__}") from None
    if key.choices and value not in key.choices:
        raise ConfigError(f"{key.name} must be one of {key.choices}, got {value!r}")
    return value


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Validated mapping from every known key to its value."""

    def __init__(self, values: Optional[dict] = None):
        self.values = {k.name: k.default for k in KEYS}
        if values:
            self.update(values)

    def update(self, values: dict) -> "RunConfig":
        for name, raw in values.items():
            if name not in KEY_INDEX:
                raise ConfigError(f"unknown config key {name!r}")
            self.values[name] = _parse(KEY_INDEX[name], raw)
        return self

    def __getitem__(self, name: str) -> Any:
        return self.values[name]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}") from None
        flat = {f"{sec}.{opt}": cp[sec][opt] for sec in cp.sections() for opt in cp[sec]}
        return cls(flat)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_ini(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    def with_overrides(self, pairs: Iterable[str]) -> "RunConfig":
        out = RunConfig(dict(self.values))
        for pair in pairs:
            name, sep, raw = pair.partition("=")
            if not sep:
                raise ConfigError(f"override {pair!r} is not key=value")
            out.update({name.strip(): raw})
        return out

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name, value in self.values.items():
            sec, opt = name.split(".", 1)
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp[sec][opt] = _format(value)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()}

    def lr(self) -> float:
        lr = self["fed.lr"]
        return lr if lr > 0 else LR_DEFAULTS[self["model.mode"]]

    def dp_config(self) -> DpConfig:
        try:
            return DpConfig(
                mode=self["dp.mode"], c0=self["dp.c0"], sigma0=self["dp.sigma0"],
                beta=self["dp.beta"], gamma=self["dp.gamma"], z=self["dp.z"],
                warmup_rounds=self["dp.warmup_rounds"], per_iteration=self["dp.per_iteration"],
            )
        except DpConfigError as exc:
            raise ConfigError(str(exc)) from None

    def fed_config(self) -> FedConfig:
        try:
            return FedConfig(
                m=self["fed.m"], T=self["fed.T"], E=self["fed.E"],
                batch_size=self["fed.batch_size"], lr=self.lr(),
                aggregation=self["fed.aggregation"], partition=self["fed.partition"],
                proportions=self["fed.proportions"], seed=self["fed.seed"],
                parallel=self["fed.parallel"], steps_per_round=self["fed.steps_per_round"],
                dp=self.dp_config(), keep_trace=self["train.trace"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def validate(self) -> "RunConfig":
        """Raise :class:`ConfigError` for inconsistent settings."""
        fed = self.fed_config()
        if fed.dp.mode == "adaptive" and not fed.dp.z < fed.m / 10:
            raise ConfigError(f"dp.z = {fed.dp.z} must be below fed.m / 10 = {fed.m / 10}")
        if self["encoder.kind"] == "precomputed" and self["model.mode"] != "classifier_only":
            raise ConfigError("encoder.kind = precomputed requires model.mode = classifier_only")
        if self["data.source"] == "file" and not self["data.path"]:
            raise ConfigError("data.source = file needs data.path")
        if not 0.0 <= self["data.holdout"] < 1.0:
            raise ConfigError("data.holdout must be in [0, 1)")
        if not 0.0 <= self["model.dropout"] < 1.0:
            raise ConfigError("model.dropout must be in [0, 1)")
        if min(self["theory.gamma1"], self["theory.gamma2"]) <= 1:
            raise ConfigError("theory.gamma1 and theory.gamma2 must exceed 1")
        if not self["eval.ks"] or min(self["eval.ks"]) < 1:
            raise ConfigError("eval.ks needs positive K values")
        if self["net.timeout_s"] <= 0:
            raise ConfigError("net.timeout_s must be positive")
        return self


def describe_keys() -> str:
    """One line per key, for ``--help``."""
    width = max(len(k.name) for k in KEYS)
    lines = []
    for k in KEYS:
        extra = f" [{'|'.join(k.choices)}]" if k.choices else ""
        lines.append(f"  {k.name.ljust(width)}  {k.help}{extra} (default: {_format(k.default)!s})")
    return "\n".join(lines)
