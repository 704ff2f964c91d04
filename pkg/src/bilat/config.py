"""Run configuration: strict JSON schema plus dataset spec strings."""
from __future__ import annotations

import json
from dataclasses import dataclass

from . import attacks, data, labels, training

__all__ = [
    "ConfigError", "RunConfig", "decode_train_config", "parse_run_config",
    "encode_run_config", "load_run_config", "load_dataset",
]


class ConfigError(ValueError):
    """A configuration document or flag value that cannot be used."""


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _only_keys(doc: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(doc) - allowed)
    _require(not unknown, f"unknown key(s) in {where}: {', '.join(unknown)}")


_ATTACK_KEYS = {"eps_x", "steps", "step_size", "random_start", "seed"}
_LABEL_ADV_KEYS = {"beta", "gamma", "top_m", "method"}
_TRAIN_KEYS = {"method", "arch", "epochs", "batch_size", "lr_schedule",
               "momentum", "weight_decay", "label_from", "seed", "attack",
               "label_adv", "ablate_label_adv", "robust_eval_every"}
_RUN_KEYS = {"train", "dataset", "take", "eps_px", "suite", "seed", "out_dir"}


def decode_train_config(doc: dict) -> training.TrainConfig:
    """Inverse of training.encode_train_config, with unknown keys rejected."""
    _require(isinstance(doc, dict), "train must be a JSON object")
    _only_keys(doc, _TRAIN_KEYS, "train")
    kw = dict(doc)
    try:
        if "lr_schedule" in kw:
            kw["lr_schedule"] = tuple((int(e), float(lr)) for e, lr in kw["lr_schedule"])
        if kw.get("attack") is not None:
            _only_keys(kw["attack"], _ATTACK_KEYS, "train.attack")
            kw["attack"] = attacks.AttackConfig(**kw["attack"])
        if kw.get("label_adv") is not None:
            _only_keys(kw["label_adv"], _LABEL_ADV_KEYS, "train.label_adv")
            kw["label_adv"] = labels.LabelAdvConfig(**kw["label_adv"])
        return training.TrainConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"train: {err}") from err


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs: training recipe, data source, eval budget."""
    train: training.TrainConfig
    dataset: str
    take: int | None = None
    eps_px: float = 8.0
    suite: tuple[str, ...] = attacks.SUITE_DEFAULT
    seed: int = 0  # drives the train/test split and evaluation attacks
    out_dir: str = "runs/out"

    def __post_init__(self):
        object.__setattr__(self, "suite", tuple(self.suite))
        if self.eps_px < 0:
            raise ConfigError("eps_px must be >= 0")
        if self.take is not None and self.take < 1:
            raise ConfigError("take must be >= 1")


def parse_run_config(doc: dict) -> RunConfig:
    _require(isinstance(doc, dict), "run config must be a JSON object")
    _only_keys(doc, _RUN_KEYS, "run config")
    _require("train" in doc, "run config is missing the 'train' section")
    _require(isinstance(doc.get("dataset"), str),
             "run config needs a 'dataset' spec string")
    kw = {k: doc[k] for k in _RUN_KEYS - {"train"} if k in doc}
    if "suite" in kw:
        _require(isinstance(kw["suite"], (list, tuple))
                 and all(isinstance(s, str) for s in kw["suite"]),
                 "suite must be a list of attack names")
    try:
        return RunConfig(train=decode_train_config(doc["train"]), **kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def encode_run_config(cfg: RunConfig) -> dict:
    doc = {
        "train": training.encode_train_config(cfg.train),
        "dataset": cfg.dataset, "eps_px": cfg.eps_px,
        "suite": list(cfg.suite), "seed": cfg.seed, "out_dir": cfg.out_dir,
    }
    if cfg.take is not None:
        doc["take"] = cfg.take
    return doc


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path} is not valid JSON: {err}") from err
    return parse_run_config(doc)


# ------------------------------------------------------------ dataset specs

def _parse_kv(body: str, where: str) -> dict:
    out = {}
    for item in filter(None, body.split(",")):
        key, sep, val = item.partition("=")
        _require(bool(sep), f"{where}: expected key=value, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def _num(kv: dict, key: str, cast, default):
    if key not in kv:
        return default
    try:
        return cast(kv[key])
    except ValueError as err:
        raise ConfigError(f"dataset option {key}={kv[key]!r}: {err}") from err


def load_dataset(spec: str, take: int | None = None) -> data.Dataset:
    """Resolve a dataset spec string.

    Forms: "cifar10:<path>", "blobs:classes=2,per_class=200,dim=8,margin=0.8,
    sigma=0.1,seed=0", "digits:per_class=100,classes=10,noise=0.0,
    contrast=1.0,seed=0" (all options optional).
    """
    scheme, sep, body = spec.partition(":")
    _require(bool(sep), f"dataset spec {spec!r} needs the form scheme:options")
    try:
        if scheme == "cifar10":
            _require(bool(body), "cifar10: needs a file path")
            return data.load_cifar10_binary(body, take)
        if scheme == "blobs":
            kv = _parse_kv(body, "blobs")
            _only_keys(kv, {"classes", "per_class", "dim", "margin", "sigma", "seed"},
                       "blobs spec")
            ds = data.synth_blobs(
                _num(kv, "classes", int, 2), _num(kv, "per_class", int, 200),
                _num(kv, "dim", int, 8), margin=_num(kv, "margin", float, 0.8),
                seed=_num(kv, "seed", int, 0), sigma=_num(kv, "sigma", float, 0.1))
        elif scheme == "digits":
            kv = _parse_kv(body, "digits")
            _only_keys(kv, {"per_class", "classes", "noise", "contrast", "seed"},
                       "digits spec")
            ds = data.load_desk_digits(
                per_class=_num(kv, "per_class", int, None),
                noise_sigma=_num(kv, "noise", float, 0.0),
                seed=_num(kv, "seed", int, 0),
                n_classes=_num(kv, "classes", int, 10),
                contrast=_num(kv, "contrast", float, 1.0))
        else:
            raise ConfigError(f"unknown dataset scheme {scheme!r} "
                              "(expected cifar10, blobs, or digits)")
    except ConfigError:
        raise
    except (OSError, ValueError) as err:
        raise ConfigError(f"dataset {spec!r}: {err}") from err
    if take is not None:
        keep = data.take_per_class(ds.x, ds.y, take)
        ds = data.Dataset(ds.x[keep], ds.y[keep], ds.n_classes, name=ds.name)
    return ds
