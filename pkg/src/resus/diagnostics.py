"""Variance diagnostics and machine-readable run reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .repair import RepairPlan
from .stats import PairedStats

VAR_FLOOR = 1e-12
REPORT_SCHEMA_VERSION = 1

# field order of a result row; emit_report keeps it stable
ROW_FIELDS = (
    "run_id", "seed", "arch", "sparsity", "method", "prior", "bias_correction",
    "calib", "accuracy_top1", "accuracy_dense", "accuracy_no_repair",
    "severity", "overshoot", "slopes", "heatmap",
)


class DiagnosticError(ValueError):
    pass


@dataclass(frozen=True)
class SlopeFit:
    alpha: float
    intercept: float
    n_points: int
    floor: float
    n_excluded: int = 0


def fit_loglog_slope(v_dense, v_repaired, floor: float = VAR_FLOOR) -> SlopeFit:
    """Least-squares slope of log10(v_repaired) against log10(v_dense)."""
    vd = np.asarray(v_dense, dtype=np.float64)
    vr = np.asarray(v_repaired, dtype=np.float64)
    if vd.shape != vr.shape:
        raise DiagnosticError("variance vectors differ in length")
    keep = (vd > floor) & (vr > floor)
    if keep.sum() < 2:
        raise DiagnosticError(f"need at least 2 channels above the floor, have {int(keep.sum())}")
    x, y = np.log10(vd[keep]), np.log10(vr[keep])
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx == 0:
        raise DiagnosticError("dense variances are all equal; slope undefined")
    alpha = ((x - xm) * (y - ym)).sum() / sxx
    return SlopeFit(float(alpha), float(ym - alpha * xm), int(keep.sum()), floor,
                    int((~keep).sum()))


def _ratio_deviation(v_dense, v_pruned, eps, floor):
    vd = np.asarray(v_dense, dtype=np.float64)
    vp = np.asarray(v_pruned, dtype=np.float64)
    keep = vd > floor
    return np.abs(np.sqrt(vp[keep] / (vd[keep] + eps)) - 1.0), int((~keep).sum())


def pruning_severity(paired: PairedStats, eps: float = 0.0, floor: float = VAR_FLOOR) -> float:
    """Mean over all channels of |sqrt(v_pruned / (v_dense + eps)) - 1|."""
    devs = []
    for i in paired.layer_ids:
        d, _ = _ratio_deviation(paired.dense[i].var, paired.pruned[i].var, eps, floor)
        devs.append(d)
    devs = np.concatenate(devs) if devs else np.empty(0)
    if devs.size == 0:
        raise DiagnosticError("every channel fell below the variance floor")
    return float(devs.mean())


def lw_overshoot(plans) -> float:
    """Mean over layers of max(0, gamma_lw - 1).

    Accepts a :class:`RepairPlan` or any iterable of per-layer shared factors.
    """
    if isinstance(plans, RepairPlan):
        values = [lp.gamma_lw for lp in plans.layers]
    else:
        values = [getattr(v, "gamma_lw", v) for v in plans]
    if not values:
        return 0.0
    return float(np.mean([max(0.0, float(v) - 1.0) for v in values]))


@dataclass
class LayerHeatmapStats:
    layer: int
    frac_below_p5: float
    ratio_quartiles: dict[str, tuple[float, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"layer": self.layer, "frac_below_p5": self.frac_below_p5}
        for method, (q25, q75) in sorted(self.ratio_quartiles.items()):
            d[f"var_ratio_q25_{method}"] = q25
            d[f"var_ratio_q75_{method}"] = q75
        return d


def heatmap_stats(paired: PairedStats, repaired: Mapping[str, Mapping[int, np.ndarray]],
                  floor: float = VAR_FLOOR) -> list[LayerHeatmapStats]:
    """Per-layer collapse fraction and variance-ratio quartiles per method.

    ``repaired`` maps a method name to ``{layer: channel variances}``.
    Percentiles interpolate linearly between order statistics.
    """
    out = []
    for i in paired.layer_ids:
        vd = np.asarray(paired.dense[i].var, dtype=np.float64)
        vp = np.asarray(paired.pruned[i].var, dtype=np.float64)
        p5 = np.percentile(vd, 5, method="linear")
        frac = float((vp < p5).mean())
        quart = {}
        keep = vd > floor
        for method, per_layer in repaired.items():
            if i not in per_layer:
                raise DiagnosticError(f"method {method!r} has no variances for layer {i}")
            vm = np.asarray(per_layer[i], dtype=np.float64)
            ratio = vm[keep] / vd[keep]
            if ratio.size == 0:
                quart[method] = (float("nan"), float("nan"))
            else:
                q25, q75 = np.percentile(ratio, [25, 75], method="linear")
                quart[method] = (float(q25), float(q75))
        out.append(LayerHeatmapStats(i, frac, quart))
    return out


# ------------------------------------------------------------ reports


def _ordered(row: Mapping) -> dict:
    head = {k: row[k] for k in ROW_FIELDS if k in row}
    tail = {k: row[k] for k in sorted(row) if k not in head}
    return {**head, **tail}


def _flatten(row: Mapping, prefix: str = "") -> dict:
    flat = {}
    for k, v in row.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            flat.update(_flatten(v, key + "."))
        elif isinstance(v, (list, tuple)):
            flat[key] = json.dumps(v)
        else:
            flat[key] = v
    return flat


def emit_report(rows: Iterable[Mapping], path, fmt: str = "json",
                created: str | None = None) -> Path:
    """Write result rows as a JSON document or a flattened CSV table."""
    rows = [_ordered(r) for r in rows]
    path = Path(path)
    if fmt == "json":
        doc = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "created": created or datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "results": rows,
        }
        text = json.dumps(doc, indent=1) + "\n"
    elif fmt == "csv":
        flat = [_flatten(r) for r in rows]
        cols: list[str] = []
        for r in flat:
            cols += [c for c in r if c not in cols]
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        writer.writerows(flat)
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e}") from e
    return path


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


def strip_timestamp(doc: dict) -> dict:
    return {k: v for k, v in doc.items() if k != "created"}
