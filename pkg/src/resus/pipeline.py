"""End-to-end stages shared by the CLI commands and the sweep harness."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, generate_dataset, load_dataset, save_dataset
from .nn import NetworkSpec, Parameters, build_preset, init_parameters
from .pruning import PruneMask, SparsityConfig, apply_mask_permanent, make_mask, save_mask, sparsity_report
from .repair import RepairConfig, RepairPlan, bn_recalibrate, calibration_stream, repair_model
from .stats import PairedStats, collect_paired, collect_stats
from .trainer import evaluate, train

log = logging.getLogger(__name__)


class Workspace:
    """Artifact layout under ``output_dir``."""

    def __init__(self, root):
        self.root = Path(root)

    def data(self, split: str) -> Path:
        return self.root / "data" / f"{split}.bin"

    @property
    def dense(self) -> Path:
        return self.root / "checkpoints" / "dense.ckpt"

    def pruned(self, key: str) -> Path:
        return self.root / "checkpoints" / f"pruned-{key}.ckpt"

    def mask(self, key: str) -> Path:
        return self.root / "masks" / f"{key}.mask"

    def plan(self, key: str, tag: str) -> Path:
        return self.root / "plans" / f"{key}-{tag}.json"

    def repaired(self, key: str, tag: str, b: int) -> Path:
        return self.root / "checkpoints" / f"repaired-{key}-{tag}-b{b}.ckpt"

    def report(self, name: str, fmt: str = "json") -> Path:
        return self.root / "reports" / f"{name}.{fmt}"


def repair_tag(rc: RepairConfig) -> str:
    tag = rc.method
    if rc.method == "asr" and rc.prior_mode != "median":
        tag += f"-{rc.prior_mode}" + (f"{rc.prior_value:g}" if rc.prior_mode == "fixed" else "")
    if rc.method != "bn_only" and not rc.bias_correction:
        tag += "-nobias"
    return tag


def build_network(cfg: RunConfig) -> NetworkSpec:
    c, h, w = cfg.dataset.image_shape
    if h != w:
        raise ValueError("presets expect square images")
    return build_preset(cfg.arch, in_ch=c, size=h, num_classes=cfg.dataset.num_classes,
                        width=cfg.width)


def make_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    return generate_dataset(cfg.dataset)


def train_dense(cfg: RunConfig, train_split: Dataset) -> tuple[NetworkSpec, Parameters]:
    net = build_network(cfg)
    params = init_parameters(net, cfg.seed)
    return net, train(net, params, train_split, cfg.train)


def calibration_images(train_split: Dataset, n_images: int, seed: int) -> np.ndarray:
    """Seeded subset of training images used to estimate repair factors."""
    n = min(n_images, len(train_split))
    idx = np.sort(np.random.default_rng([seed, 1]).permutation(len(train_split))[:n])
    return train_split.images[idx]


def recalibrate(net, params, train_split: Dataset, b: int, batch_size: int, seed: int) -> Parameters:
    return bn_recalibrate(net, params, calibration_stream(train_split.images, b, batch_size, seed), b)


@dataclass
class SparsityState:
    """Everything shared by all repair methods at one sparsity level."""

    sparsity: SparsityConfig
    mask: PruneMask
    pruned: Parameters
    paired: PairedStats
    severity: float
    overshoot: float
    acc_no_repair: float


def prepare_sparsity(net, dense, sparsity: SparsityConfig, calib: np.ndarray, test: Dataset,
                     eps: float = 1e-8) -> SparsityState:
    mask = make_mask(net, dense, sparsity)
    pruned = apply_mask_permanent(dense, mask)
    paired = collect_paired((net, dense), (net, pruned), calib)
    _, ident = repair_model((net, dense), (net, pruned), calib,
                            RepairConfig(method="bn_only", epsilon=eps))
    try:
        severity = diag.pruning_severity(paired)
    except diag.DiagnosticError:
        severity = float("nan")
    return SparsityState(sparsity, mask, pruned, paired, severity,
                         diag.lw_overshoot(ident), evaluate(net, pruned, test))


def variance_snapshot(net, params, calib) -> dict[int, np.ndarray]:
    stats = collect_stats(net, params, calib, net.repairable_layer_ids)
    return {i: s.var for i, s in stats.items()}


def slopes_for(paired: PairedStats, v_final: dict[int, np.ndarray]) -> list[dict]:
    out = []
    for i in paired.layer_ids:
        try:
            alpha = diag.fit_loglog_slope(paired.dense[i].var, v_final[i]).alpha
        except diag.DiagnosticError:
            alpha = None
        out.append({"layer": i, "alpha": alpha})
    return out


def heatmap_for(paired: PairedStats, v_final: dict[int, np.ndarray], tag: str) -> list[dict]:
    rows = []
    for h in diag.heatmap_stats(paired, {tag: v_final}):
        q25, q75 = h.ratio_quartiles[tag]
        rows.append({"layer": h.layer, "frac_below_p5": h.frac_below_p5,
                     "var_ratio_q25": q25, "var_ratio_q75": q75})
    return rows


def _clean(x):
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def cell_row(cfg: RunConfig, net: NetworkSpec, state: SparsityState, rc: RepairConfig, b: int,
             final: Parameters, calib: np.ndarray, test: Dataset, acc_dense: float) -> dict:
    tag = repair_tag(rc)
    v_final = variance_snapshot(net, final, calib)
    report = sparsity_report(state.mask)
    return {
        "run_id": f"{net.arch}-s{cfg.seed}-{state.sparsity.key}-{tag}-b{b}",
        "seed": cfg.seed,
        "arch": net.arch,
        "sparsity": {**state.sparsity.describe(), "achieved": report["sparsity"],
                     "mask_sha256": state.mask.digest()},
        "method": rc.method,
        "prior": rc.prior_label,
        "bias_correction": rc.bias_correction,
        "calib": {"n_images": int(len(calib)), "b": b, "batch_size": cfg.calib.batch_size},
        "accuracy_top1": evaluate(net, final, test),
        "accuracy_dense": acc_dense,
        "accuracy_no_repair": state.acc_no_repair,
        "severity": _clean(state.severity),
        "overshoot": state.overshoot,
        "slopes": slopes_for(state.paired, v_final),
        "heatmap": heatmap_for(state.paired, v_final, tag),
        "status": "ok",
    }


def run_method(cfg: RunConfig, net, dense, state: SparsityState, rc: RepairConfig,
               budgets, train_split: Dataset, calib) -> tuple[RepairPlan, dict[int, Parameters]]:
    """Repair once, then recalibrate BN for each budget from the same repaired weights."""
    repaired, plan = repair_model((net, dense), (net, state.pruned), calib, rc)
    finals = {b: recalibrate(net, repaired, train_split, b, cfg.calib.batch_size, cfg.seed)
              for b in budgets}
    return plan, finals


def sweep(cfg: RunConfig, train_split: Dataset, test: Dataset, net: NetworkSpec, dense: Parameters,
          ws: Workspace | None = None) -> list[dict]:
    """Full factorial methods x sparsities x budgets with shared masks per sparsity.

    A failing cell becomes a row with ``status: "error"``; the sweep goes on.
    """
    calib = calibration_images(train_split, cfg.calib.n_images, cfg.seed)
    acc_dense = evaluate(net, dense, test)
    rows = []
    for sp in cfg.sweep.sparsities:
        try:
            state = prepare_sparsity(net, dense, sp, calib, test, cfg.repair.epsilon)
        except Exception as e:  # noqa: BLE001 - recorded per cell
            log.error("sparsity %s failed: %s", sp.key, e)
            for m in cfg.sweep.methods:
                for b in cfg.sweep.budgets:
                    rows.append(_error_row(cfg, net, sp, m, b, e))
            continue
        if ws is not None:
            save_checkpoint(ws.pruned(sp.key), net, state.pruned)
            ws.mask(sp.key).parent.mkdir(parents=True, exist_ok=True)
            save_mask(ws.mask(sp.key), state.mask)
        for m in cfg.sweep.methods:
            rc = _method_config(cfg.repair, m)
            try:
                plan, finals = run_method(cfg, net, dense, state, rc, cfg.sweep.budgets, train_split, calib)
                if ws is not None:
                    ws.plan(sp.key, repair_tag(rc)).parent.mkdir(parents=True, exist_ok=True)
                    plan.save(ws.plan(sp.key, repair_tag(rc)))
            except Exception as e:  # noqa: BLE001
                log.error("cell %s/%s failed: %s", sp.key, m, e)
                rows += [_error_row(cfg, net, sp, m, b, e) for b in cfg.sweep.budgets]
                continue
            for b in cfg.sweep.budgets:
                try:
                    rows.append(cell_row(cfg, net, state, rc, b, finals[b], calib, test, acc_dense))
                except Exception as e:  # noqa: BLE001
                    rows.append(_error_row(cfg, net, sp, m, b, e))
    rows.sort(key=lambda r: (r["sparsity"].get("mode"), r["sparsity"].get("rate", 0.0),
                             r["sparsity"].get("n", 0), r["method"], r["prior"],
                             r["bias_correction"], r["calib"]["b"]))
    return rows


def _method_config(base: RepairConfig, method: str) -> RepairConfig:
    return RepairConfig(method=method, prior_mode=base.prior_mode, prior_value=base.prior_value,
                        bias_correction=base.bias_correction, epsilon=base.epsilon)


def _error_row(cfg, net, sp: SparsityConfig, method: str, b: int, err: Exception) -> dict:
    return {
        "run_id": f"{net.arch}-s{cfg.seed}-{sp.key}-{method}-b{b}",
        "seed": cfg.seed,
        "arch": net.arch,
        "sparsity": sp.describe(),
        "method": method,
        "prior": cfg.repair.prior_label,
        "bias_correction": cfg.repair.bias_correction,
        "calib": {"n_images": cfg.calib.n_images, "b": b, "batch_size": cfg.calib.batch_size},
        "status": "error",
        "error": f"{type(err).__name__}: {err}",
    }


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, indent=1) + "\n")


def save_data(ws: Workspace, train_split: Dataset, test: Dataset) -> None:
    for split, ds in (("train", train_split), ("test", test)):
        ws.data(split).parent.mkdir(parents=True, exist_ok=True)
        save_dataset(ws.data(split), ds)


def load_data(ws: Workspace) -> tuple[Dataset, Dataset]:
    for split in ("train", "test"):
        if not ws.data(split).exists():
            raise FileNotFoundError(f"dataset not found: {ws.data(split)} (run gen-data first)")
    return load_dataset(ws.data("train")), load_dataset(ws.data("test"))


def load_dense(ws: Workspace) -> tuple[NetworkSpec, Parameters]:
    return load_checkpoint(ws.dense)
