"""Run configuration: a versioned JSON document merged over built-in defaults.

Schema (version 1)::

    {
      "config_version": 1,
      "seed": 0,
      "output_dir": "runs/demo",
      "arch":    {"preset": "tiny-res", "width": 8},
      "dataset": {"num_classes": 10, "image_shape": [1, 16, 16], "n_train": 2048,
                  "n_test": 1000, "sigma": 1.0, "jitter": 2},
      "train":   {"epochs": 6, "batch_size": 32, "lr": 0.05, "momentum": 0.9},
      "sparsity": {"mode": "global_l1", "rate": 0.9}          # or {"mode": "nm", "n": 2, "m": 4}
      "repair":  {"method": "asr", "prior_mode": "median", "prior_value": 1.0,
                  "bias_correction": true, "epsilon": 1e-8},
      "calib":   {"n_images": 64, "b": 20, "batch_size": 32},
      "sweep":   {"methods": ["bn_only", "layerwise", "asr"],
                  "sparsities": [{"mode": "global_l1", "rate": 0.5}, ...],
                  "budgets": [10, 20, 30, 50]},
      "report_format": "json"
    }

Every key is optional; missing keys take the defaults below.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .pruning import SparsityConfig
from .repair import RepairConfig
from .trainer import TrainConfig

CONFIG_VERSION = 1

DEFAULTS: dict = {
    "config_version": CONFIG_VERSION,
    "seed": 0,
    "output_dir": "runs/demo",
    "arch": {"preset": "tiny-res", "width": 8},
    "dataset": {"num_classes": 10, "image_shape": [1, 16, 16], "n_train": 2048,
                "n_test": 1000, "sigma": 1.0, "jitter": 2},
    "train": {"epochs": 6, "batch_size": 32, "lr": 0.05, "momentum": 0.9},
    "sparsity": {"mode": "global_l1", "rate": 0.9},
    "repair": {"method": "asr", "prior_mode": "median", "prior_value": 1.0,
               "bias_correction": True, "epsilon": 1e-8},
    "calib": {"n_images": 64, "b": 20, "batch_size": 32},
    "sweep": {
        "methods": ["bn_only", "layerwise", "asr"],
        "sparsities": [{"mode": "global_l1", "rate": r} for r in (0.5, 0.7, 0.9)],
        "budgets": [10, 20, 30, 50],
    },
    "report_format": "json",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CalibConfig:
    n_images: int = 64
    b: int = 20
    batch_size: int = 32

    def __post_init__(self):
        if self.n_images < 1 or self.b < 1 or self.batch_size < 1:
            raise ValueError("calibration sizes must be >= 1")


@dataclass(frozen=True)
class SweepConfig:
    methods: tuple[str, ...] = ("bn_only", "layerwise", "asr")
    sparsities: tuple[SparsityConfig, ...] = ()
    budgets: tuple[int, ...] = (10, 20, 30, 50)


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: Path
    arch: str
    width: int
    dataset: DatasetSpec
    train: TrainConfig
    sparsity: SparsityConfig
    repair: RepairConfig
    calib: CalibConfig
    sweep: SweepConfig
    report_format: str = "json"
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "sparsity":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def from_dict(doc: dict) -> RunConfig:
    version = doc.get("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config_version {version}")
    d = _merge(DEFAULTS, doc)
    try:
        seed = int(d["seed"])
        ds = d["dataset"]
        dataset = DatasetSpec(num_classes=ds["num_classes"], image_shape=tuple(ds["image_shape"]),
                              n_train=ds["n_train"], n_test=ds["n_test"], sigma=ds["sigma"],
                              seed=seed, jitter=ds.get("jitter", 0))
        train = TrainConfig(seed=seed, **d["train"])
        sw = d["sweep"]
        cfg = RunConfig(
            seed=seed,
            output_dir=Path(d["output_dir"]),
            arch=d["arch"]["preset"],
            width=int(d["arch"].get("width", 8)),
            dataset=dataset,
            train=train,
            sparsity=SparsityConfig(**d["sparsity"]),
            repair=RepairConfig(**d["repair"]),
            calib=CalibConfig(**d["calib"]),
            sweep=SweepConfig(
                methods=tuple(sw["methods"]),
                sparsities=tuple(SparsityConfig(**s) for s in sw["sparsities"]),
                budgets=tuple(int(b) for b in sw["budgets"]),
            ),
            report_format=d["report_format"],
            raw=d,
        )
    except (TypeError, KeyError) as e:
        raise ConfigError(f"invalid config: {e}") from e
    for m in cfg.sweep.methods:
        RepairConfig(method=m)  # validates the name
    if cfg.report_format not in ("json", "csv"):
        raise ConfigError(f"report_format must be json or csv, got {cfg.report_format!r}")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: {e}") from e
    if overrides:
        doc = _merge(doc, overrides)
    return from_dict(doc)
