"""Experiment configuration: an INI file with one section per component.

Every key has a default; :func:`resolve` materialises all of them so the
persisted ``resolved.ini`` reproduces a run exactly. Overrides use dotted
``section.key=value`` strings.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

from .attacks import AttackConfig
from .data import PartitionSpec, data_dir
from .federation import FedConfig
from .losses import DefenseConfig

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0", "output_dir": "runs/default"},
    "data": {
        "source": "mnist",
        "train_images": "mnist5k/train-images-idx3-ubyte.gz",
        "train_labels": "mnist5k/train-labels-idx1-ubyte.gz",
        "test_images": "mnist5k/t10k-images-idx3-ubyte.gz",
        "test_labels": "mnist5k/t10k-labels-idx1-ubyte.gz",
        "train_csv": "",
        "test_csv": "",
        "limit_train": "0",
        "limit_test": "0",
        "num_classes": "10",
        "n": "1000",
        "n_test": "500",
        "spread": "0.08",
    },
    "partition": {
        "kind": "iid",
        "clients": "100",
        "alpha": "0.5",
        "shards_per_client": "2",
        "manifest": "",
    },
    "model": {"hidden": "128,64"},
    "federation": {
        "clients_per_round": "10",
        "local_epochs": "5",
        "batch_size": "10",
        "lr": "0.01",
        "rounds": "10",
        "prox_mu": "0.0",
        "eps_warmup_rounds": "0",
    },
    "defense": {"kind": "dbfat", "beta": "1.5", "reweight": "true"},
    "attack": {
        "kind": "pgd",
        "epsilon": "0.3",
        "alpha": "0.01",
        "steps": "20",
        "random_start": "false",
        "momentum_decay": "1.0",
    },
    "eval": {
        "attacks": "fgsm,mim,pgd",
        "epsilon": "0.3",
        "alpha": "0.01",
        "steps": "20",
        "random_start": "false",
        "momentum_decay": "1.0",
        "interval": "1",
        "wall_clock": "true",
    },
}


class ConfigError(ValueError):
    pass


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_dict(DEFAULTS)
    return cp


def load(path=None, overrides=()) -> configparser.ConfigParser:
    cp = _parser()
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            cp.read_file(f)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        set_value(cp, section, option, value.strip())
    for section in cp.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        for option in cp[section]:
            if option not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {section}.{option}")
    return cp


def set_value(cp: configparser.ConfigParser, section: str, option: str, value) -> None:
    if section not in DEFAULTS or option not in DEFAULTS[section]:
        raise ConfigError(f"unknown key {section}.{option}")
    cp[section][option] = str(value)


def dumps(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def config_hash(cp: configparser.ConfigParser) -> str:
    return hashlib.sha256(dumps(cp).encode()).hexdigest()[:12]


@dataclass
class ExperimentConfig:
    """Typed view of a resolved configuration."""

    raw: configparser.ConfigParser
    seed: int
    output_dir: Path
    partition: PartitionSpec
    fed: FedConfig
    hidden: tuple[int, ...]
    eval_attacks: list[AttackConfig]
    eval_interval: int
    wall_clock: bool
    manifest: str

    @property
    def data(self) -> configparser.SectionProxy:
        return self.raw["data"]


def _attack(section, kind: str) -> AttackConfig:
    return AttackConfig(
        kind=kind,
        epsilon=section.getfloat("epsilon"),
        alpha=section.getfloat("alpha"),
        steps=section.getint("steps"),
        random_start=section.getboolean("random_start"),
        momentum_decay=section.getfloat("momentum_decay"),
    )


def resolve(cp: configparser.ConfigParser) -> ExperimentConfig:
    """Validate every field and build the component configs."""
    try:
        seed = cp["run"].getint("seed")
        p = cp["partition"]
        partition = PartitionSpec(
            kind=p["kind"],
            num_clients=p.getint("clients"),
            alpha=p.getfloat("alpha"),
            shards_per_client=p.getint("shards_per_client"),
            seed=seed,
        )
        a = cp["attack"]
        defense = DefenseConfig(
            kind=cp["defense"]["kind"],
            beta=cp["defense"].getfloat("beta"),
            attack=_attack(a, a["kind"]),
            reweight=cp["defense"].getboolean("reweight"),
        )
        f = cp["federation"]
        fed = FedConfig(
            num_clients=partition.num_clients,
            clients_per_round=f.getint("clients_per_round"),
            local_epochs=f.getint("local_epochs"),
            batch_size=f.getint("batch_size"),
            lr=f.getfloat("lr"),
            rounds=f.getint("rounds"),
            defense=defense,
            prox_mu=f.getfloat("prox_mu"),
            seed=seed,
            eps_warmup_rounds=f.getint("eps_warmup_rounds"),
        )
        hidden_s = cp["model"]["hidden"].strip()
        hidden = tuple(int(h) for h in hidden_s.split(",") if h.strip()) if hidden_s else ()
        e = cp["eval"]
        kinds = [k.strip() for k in e["attacks"].split(",") if k.strip()]
        eval_attacks = [_attack(e, k) for k in kinds]
        interval = e.getint("interval")
        if interval < 1:
            raise ConfigError("eval.interval must be >= 1")
        if cp["data"]["source"] not in ("mnist", "synthetic", "csv"):
            raise ConfigError(f"unknown data.source {cp['data']['source']!r}")
        return ExperimentConfig(
            raw=cp,
            seed=seed,
            output_dir=Path(cp["run"]["output_dir"]),
            partition=partition,
            fed=fed,
            hidden=hidden,
            eval_attacks=eval_attacks,
            eval_interval=interval,
            wall_clock=e.getboolean("wall_clock"),
            manifest=p["manifest"],
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def data_path(value: str) -> Path:
    """Relative data paths resolve against ``$DBFAT_DATA_DIR`` (default ``data``)."""
    p = Path(value)
    return p if p.is_absolute() else data_dir() / p
