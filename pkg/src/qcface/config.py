"""Experiment configuration: strict JSON parsing and canonical serialization."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .margins import AdaNorm, arcface, Constant, Curricular, Identity, MagLinear, MarginSpec, MVSoftmax
from .planner import Mode, SyntheticSpec, TrainConfig
from .regularizer import BMode, RegParams

EMIT_TOKENS = ("history", "magnitudes", "projection", "metrics")
DEFAULT_EMIT = ("history", "magnitudes")

_M2_KINDS = {"constant": Constant, "maglinear": MagLinear, "adanorm": AdaNorm}
_M3_KINDS = {"constant": Constant, "adanorm": AdaNorm}
_NEG_KINDS = {"identity": Identity, "mv": MVSoftmax, "curricular": Curricular}


@dataclass(frozen=True)
class ExperimentConfig:
    loss: MarginSpec = field(default_factory=MarginSpec)
    reg: RegParams = field(default_factory=RegParams)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "run"
    emit: tuple = DEFAULT_EMIT

    def train_config(self) -> TrainConfig:
        """TrainConfig carrying this experiment's loss and regularizer."""
        return replace(self.train, spec=self.loss, reg=self.reg)


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _mode_from_json(obj, kinds, where):
    if isinstance(obj, (int, float)) and not isinstance(obj, bool):
        return Constant(float(obj))
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError(f"{where} must be a number or an object with a 'kind'")
    kind = obj["kind"]
    if kind not in kinds:
        raise ConfigError(f"{where}.kind must be one of {sorted(kinds)}, got {kind!r}")
    cls = kinds[kind]
    names = [f.name for f in fields(cls)]
    _check_keys(obj, ["kind", *names], where)
    return cls(**{k: v for k, v in obj.items() if k != "kind"})


def _mode_to_json(mode) -> dict:
    kind = {Constant: "constant", MagLinear: "maglinear", AdaNorm: "adanorm",
            Identity: "identity", MVSoftmax: "mv", Curricular: "curricular"}[type(mode)]
    out = {"kind": kind}
    for f in fields(mode):
        out[f.name] = getattr(mode, f.name)
    return out


def _fields_of(obj, cls, where, skip=()):
    names = [f.name for f in fields(cls) if f.name not in skip]
    _check_keys(obj, names, where)
    return names


def parse_config(obj: dict) -> ExperimentConfig:
    """Build a config from a parsed JSON object; unknown keys raise ConfigError."""
    _check_keys(obj, ["loss", "reg", "data", "train", "output_dir", "emit"], "config")
    try:
        loss = obj.get("loss", {})
        _fields_of(loss, MarginSpec, "loss")
        spec_kw = {}
        if "m1" in loss:
            spec_kw["m1"] = float(loss["m1"])
        if "s" in loss:
            spec_kw["s"] = float(loss["s"])
        if "m2" in loss:
            spec_kw["m2"] = _mode_from_json(loss["m2"], _M2_KINDS, "loss.m2")
        if "m3" in loss:
            spec_kw["m3"] = _mode_from_json(loss["m3"], _M3_KINDS, "loss.m3")
        if "neg" in loss:
            neg = loss["neg"]
            spec_kw["neg"] = _mode_from_json({"kind": neg} if isinstance(neg, str) else neg, _NEG_KINDS, "loss.neg")
        spec = MarginSpec(**spec_kw)

        reg_obj = obj.get("reg", {})
        _fields_of(reg_obj, RegParams, "reg")
        reg = RegParams(**{k: (BMode(v) if k == "b_mode" else v) for k, v in reg_obj.items()})

        data_obj = obj.get("data", {})
        _fields_of(data_obj, SyntheticSpec, "data")
        data_kw = dict(data_obj)
        if "noise_levels" in data_kw:
            data_kw["noise_levels"] = tuple(tuple(p) for p in data_kw["noise_levels"])
        data = SyntheticSpec(**data_kw)

        train_obj = obj.get("train", {})
        _fields_of(train_obj, TrainConfig, "train", skip=("spec", "reg"))
        train_kw = dict(train_obj)
        if "mode" in train_kw:
            train_kw["mode"] = Mode(train_kw["mode"])
        train = TrainConfig(spec=spec, reg=reg, **train_kw)

        emit = obj.get("emit", list(DEFAULT_EMIT))
        if not isinstance(emit, list) or any(t not in EMIT_TOKENS for t in emit):
            raise ConfigError(f"emit must be a list drawn from {list(EMIT_TOKENS)}")
        out_dir = obj.get("output_dir", "run")
        if not isinstance(out_dir, str) or not out_dir:
            raise ConfigError("output_dir must be a non-empty string")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(spec, reg, data, train, out_dir, tuple(dict.fromkeys(emit)))


def config_to_json(cfg: ExperimentConfig) -> dict:
    """Canonical JSON-ready form; ``parse_config`` inverts it exactly."""
    spec, reg, data, train = cfg.loss, cfg.reg, cfg.data, cfg.train
    return {
        "loss": {
            "m1": spec.m1,
            "m2": _mode_to_json(spec.m2),
            "m3": _mode_to_json(spec.m3),
            "s": spec.s,
            "neg": _mode_to_json(spec.neg),
        },
        "reg": {"l_a": reg.l_a, "u_a": reg.u_a, "k": reg.k, "b_mode": reg.b_mode.value, "lambda_g": reg.lambda_g},
        "data": {
            "C": data.C,
            "d": data.d,
            "n_per_class": data.n_per_class,
            "noise_levels": [list(p) for p in data.noise_levels],
            "mislabel_rate": data.mislabel_rate,
            "input_dim": data.input_dim,
            "seed": data.seed,
        },
        "train": {
            "mode": train.mode.value,
            "warmup_epochs": train.warmup_epochs,
            "main_epochs": train.main_epochs,
            "lr": train.lr,
            "lr_milestones": list(train.lr_milestones),
            "lr_decay": train.lr_decay,
            "batch_size": train.batch_size,
            "seed": train.seed,
        },
        "output_dir": cfg.output_dir,
        "emit": list(cfg.emit),
    }


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(obj)


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 of the canonical config without ``output_dir``."""
    obj = config_to_json(cfg)
    obj.pop("output_dir")
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def set_path(obj: dict, path: str, value) -> dict:
    """Copy of ``obj`` with the scalar at dotted ``path`` replaced."""
    out = copy.deepcopy(obj)
    keys = path.split(".")
    node = out
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"bad parameter path {path!r}")
        node = node[k]
    last = keys[-1]
    if not isinstance(node, dict) or last not in node:
        raise ConfigError(f"bad parameter path {path!r}")
    if isinstance(node[last], (dict, list)):
        raise ConfigError(f"parameter path {path!r} does not address a scalar")
    node[last] = value
    return out


def canonical_config() -> ExperimentConfig:
    """The desk-scale planning configuration used for acceptance."""
    spec = arcface(0.5, s=4.0)
    reg = RegParams(l_a=1.0, u_a=100.0, lambda_g=300.0)
    data = SyntheticSpec(C=8, d=16, n_per_class=50, noise_levels=((0.0, 0.4), (0.2, 0.4), (0.5, 0.2)),
                         mislabel_rate=0.02, input_dim=256, seed=0)
    train = TrainConfig(mode=Mode.LINEAR_ENCODER, warmup_epochs=10, main_epochs=30, lr=0.3,
                        lr_milestones=(30,), lr_decay=0.1, batch_size=25, spec=spec, reg=reg, seed=0)
    return ExperimentConfig(spec, reg, data, train, "run", ("history", "magnitudes", "projection", "metrics"))
