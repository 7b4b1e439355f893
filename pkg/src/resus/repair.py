"""Variance-matching repair of pruned conv layers, then BatchNorm recalibration.

Every repairable conv gets a per-output-channel factor ``gamma`` that
multiplies its filter (and bias), optionally followed by an additive bias
update that restores the dense per-channel mean. Methods:

``bn_only``      identity factors; only BatchNorm is recalibrated afterwards.
``layerwise``    one shared factor per layer from mean variances.
``channel_raw``  per-channel factor sqrt(v_dense / (v_pruned + eps)).
``asr``          the per-channel factor shrunk toward 1 by the weight
                 v_pruned / (v_pruned + lambda), lambda being a layer-level
                 scale of the pruned variances (median, mean or fixed).

Layers are processed in forward order and the pruned statistics of each
layer are re-measured after all earlier layers were repaired.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .nn import NetworkSpec, Parameters, run
from .stats import ChannelStats, collect_stats, iter_batches

log = logging.getLogger(__name__)

METHODS = ("bn_only", "layerwise", "channel_raw", "asr")
PRIOR_MODES = ("median", "mean", "fixed")


@dataclass(frozen=True)
class RepairConfig:
    method: str = "asr"
    prior_mode: str = "median"
    prior_value: float = 1.0  # lambda when prior_mode == "fixed"
    bias_correction: bool = True
    epsilon: float = 1e-8
    zero_lambda_policy: str = "identity_fallback"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown repair method {self.method!r}; choose from {METHODS}")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"unknown prior mode {self.prior_mode!r}; choose from {PRIOR_MODES}")
        if self.prior_mode == "fixed" and not self.prior_value > 0:
            raise ValueError("fixed prior needs a positive value")
        # epsilon == 0 is accepted for exactness checks
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.zero_lambda_policy != "identity_fallback":
            raise ValueError(f"unsupported zero_lambda_policy {self.zero_lambda_policy!r}")

    @property
    def prior_label(self) -> str:
        return f"fixed({self.prior_value:g})" if self.prior_mode == "fixed" else self.prior_mode


# ------------------------------------------------------------ factor algebra


def layerwise_gamma(v_dense, v_pruned, eps: float) -> float:
    v_dense = np.asarray(v_dense, dtype=np.float64)
    v_pruned = np.asarray(v_pruned, dtype=np.float64)
    den = v_pruned.mean() + eps
    if den == 0:
        return 1.0
    return float(np.sqrt(v_dense.mean() / den))


def raw_gamma(v_dense, v_pruned, eps: float) -> np.ndarray:
    """sqrt(v_d / (v_p + eps)); a channel with v_p + eps == 0 gets 1."""
    v_dense = np.asarray(v_dense, dtype=np.float64)
    v_pruned = np.asarray(v_pruned, dtype=np.float64)
    if v_dense.shape != v_pruned.shape:
        raise ValueError("dense and pruned variance vectors differ in length")
    den = v_pruned + eps
    out = np.ones_like(v_dense)
    ok = den > 0
    # ratio of roots stays finite for tiny positive denominators
    out[ok] = np.sqrt(v_dense[ok]) / np.sqrt(den[ok])
    return out


def shrinkage_lambda(v_pruned, prior_mode: str = "median", prior_value: float = 1.0) -> float:
    v = np.asarray(v_pruned, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty variance vector")
    if prior_mode == "median":
        return float(np.median(v))  # even length: mean of the two middle values
    if prior_mode == "mean":
        return float(v.mean())
    if prior_mode == "fixed":
        return float(prior_value)
    raise ValueError(f"unknown prior mode {prior_mode!r}")


def shrink(gamma_raw, v_pruned, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Shrinkage weights ``s`` and final factors ``gamma`` = 1 + s * (gamma_raw - 1).

    ``lam == 0`` means the layer carries no usable scale; every factor falls
    back to exactly 1 and a warning is logged.
    """
    g = np.asarray(gamma_raw, dtype=np.float64)
    v = np.asarray(v_pruned, dtype=np.float64)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0:
        log.warning("shrinkage baseline is zero; falling back to identity factors")
        return np.zeros_like(v), np.ones_like(g)
    s = v / (v + lam)
    with np.errstate(invalid="ignore"):
        # s == 0 must give exactly 1 even when gamma_raw overflowed to inf
        gamma = np.where(s == 0, 1.0, 1.0 + s * (g - 1.0))
    # rounding must not push gamma outside [min(1, g), max(1, g)]
    gamma = np.clip(gamma, np.minimum(1.0, g), np.maximum(1.0, g))
    return s, gamma


def bias_correction(gamma, mu_dense, mu_pruned, b_old) -> np.ndarray:
    """Bias that makes the rescaled channel means equal the dense means."""
    return (np.asarray(b_old, dtype=np.float64) + np.asarray(mu_dense, dtype=np.float64)
            - np.asarray(gamma, dtype=np.float64) * np.asarray(mu_pruned, dtype=np.float64))


def rescale_layer(weight: np.ndarray, bias: np.ndarray | None, gamma) -> tuple[np.ndarray, np.ndarray | None]:
    """Multiply output channel ``i`` of ``weight`` (and ``bias``) by ``gamma[i]``.

    Scaling the bias too makes the new pre-BN output exactly ``gamma * old``.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.ndim != 1 or gamma.shape[0] != weight.shape[0]:
        raise ValueError(f"gamma length {gamma.shape} != output channels {weight.shape[0]}")
    shape = (-1,) + (1,) * (weight.ndim - 1)
    w = (weight.astype(np.float64) * gamma.reshape(shape)).astype(weight.dtype)
    b = None if bias is None else (bias.astype(np.float64) * gamma).astype(bias.dtype)
    return w, b


# ------------------------------------------------------------ plans


@dataclass
class LayerPlan:
    layer: int
    gamma_raw: np.ndarray
    shrink: np.ndarray
    lam: float
    gamma: np.ndarray
    gamma_lw: float
    bias_delta: np.ndarray
    fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "lambda": self.lam,
            "gamma_lw": self.gamma_lw,
            "fallback": self.fallback,
            "channels": [
                [float(a), float(b), float(c), float(d)]
                for a, b, c, d in zip(self.gamma_raw, self.shrink, self.gamma, self.bias_delta)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerPlan":
        ch = np.asarray(d["channels"], dtype=np.float64).reshape(-1, 4)
        return cls(d["layer"], ch[:, 0].copy(), ch[:, 1].copy(), float(d["lambda"]),
                   ch[:, 2].copy(), float(d["gamma_lw"]), ch[:, 3].copy(),
                   bool(d.get("fallback", False)))


@dataclass
class RepairPlan:
    method: str
    prior: str
    bias_correction: bool
    epsilon: float
    layers: list[LayerPlan] = field(default_factory=list)
    events: list[str] = field(default_factory=list)

    def layer(self, i: int) -> LayerPlan:
        for lp in self.layers:
            if lp.layer == i:
                return lp
        raise KeyError(i)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "prior": self.prior,
            "bias_correction": self.bias_correction,
            "epsilon": self.epsilon,
            "events": list(self.events),
            "layers": [lp.to_dict() for lp in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RepairPlan":
        return cls(d["method"], d["prior"], d["bias_correction"], d["epsilon"],
                   [LayerPlan.from_dict(x) for x in d["layers"]], list(d.get("events", [])))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "RepairPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def plan_layer(dense: ChannelStats, pruned: ChannelStats, cfg: RepairConfig) -> LayerPlan:
    """Factors and bias update for one layer from its dense/pruned statistics."""
    v_d, v_p = dense.var, pruned.var
    eps = cfg.epsilon
    g_raw = raw_gamma(v_d, v_p, eps)
    g_lw = layerwise_gamma(v_d, v_p, eps)
    lam = shrinkage_lambda(v_p, cfg.prior_mode, cfg.prior_value)
    s = np.zeros_like(g_raw)
    fallback = False
    if cfg.method == "asr":
        s, gamma = shrink(g_raw, v_p, lam)
        fallback = lam == 0
    elif cfg.method == "channel_raw":
        gamma = g_raw.copy()
    elif cfg.method == "layerwise":
        gamma = np.full_like(g_raw, g_lw)
    else:
        gamma = np.ones_like(g_raw)
    if cfg.bias_correction and cfg.method != "bn_only":
        delta = bias_correction(gamma, dense.mean, pruned.mean, 0.0)
    else:
        delta = np.zeros_like(g_raw)
    return LayerPlan(dense.layer, g_raw, s, lam, gamma, g_lw, delta, fallback)


def apply_layer_plan(params: Parameters, lp: LayerPlan) -> None:
    """Rescale the conv in place and add the bias delta (materialising a bias if needed)."""
    p = params.layers[lp.layer]
    w, b = rescale_layer(p["weight"], p.get("bias"), lp.gamma)
    p["weight"] = w
    if b is not None:
        p["bias"] = b
    if np.any(lp.bias_delta != 0):
        if "bias" not in p:
            p["bias"] = np.zeros(w.shape[0], dtype=w.dtype)
        p["bias"] = (p["bias"].astype(np.float64) + lp.bias_delta).astype(w.dtype)


Model = tuple[NetworkSpec, Parameters]


def repair_model(dense_model: Model, pruned_model: Model, calib, cfg: RepairConfig,
                 batch_size: int | None = None) -> tuple[Parameters, RepairPlan]:
    """Repair every repairable conv of the pruned model, in forward order.

    Dense statistics are captured once; pruned statistics for layer ``l`` are
    captured from the model with layers before ``l`` already repaired. The
    first conv is never repaired. Returns new parameters and the plan.
    """
    net, dense = dense_model
    pnet, pruned = pruned_model
    if pnet != net:
        raise ValueError("dense and pruned models have different network specs")
    batches = list(iter_batches(calib, batch_size))
    if not batches or sum(len(b) for b in batches) == 0:
        raise ValueError("empty calibration set")
    ids = net.repairable_layer_ids
    dense_stats = collect_stats(net, dense, batches, ids)
    params = pruned.copy()
    plan = RepairPlan(cfg.method, cfg.prior_label, cfg.bias_correction, cfg.epsilon)
    for i in ids:
        cur = collect_stats(net, params, batches, [i])[i]
        lp = plan_layer(dense_stats[i], cur, cfg)
        if lp.fallback:
            msg = f"layer {i}: zero shrinkage baseline, identity factors used"
            log.info(msg)
            plan.events.append(msg)
        apply_layer_plan(params, lp)
        plan.layers.append(lp)
    return params, plan


# ------------------------------------------------------------ BN recalibration


def calibration_stream(images: np.ndarray, b: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """``b`` seeded batches drawn without replacement, reshuffling when exhausted.

    The first ``k`` batches do not depend on ``b``, so smaller budgets see a
    prefix of larger ones.
    """
    rng = np.random.default_rng(seed)
    n = len(images)
    order = rng.permutation(n)
    pos = 0
    for _ in range(b):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        yield images[np.sort(idx)]


def bn_recalibrate(net: NetworkSpec, params: Parameters, stream: Iterable[np.ndarray], b: int) -> Parameters:
    """Reset BN running statistics and re-estimate them from ``b`` batches.

    Each batch runs with batch-statistics normalization; running mean/var
    become the equal-weight average of the per-batch moments. Scale and
    shift are left alone.
    """
    if b < 1:
        raise ValueError("need at least one recalibration batch")
    bn_ids = [i for i, l in enumerate(net.layers) if l.kind == "batchnorm"]
    sums = {i: [np.zeros(net.layers[i].c), np.zeros(net.layers[i].c)] for i in bn_ids}
    seen = 0
    for batch in stream:
        if seen == b:
            break
        trace = run(net, params, batch, train=True)
        for i in bn_ids:
            mu, var = trace.bn_moments[i]
            sums[i][0] += mu
            sums[i][1] += var
        seen += 1
    if seen == 0:
        raise ValueError("empty recalibration stream")
    if seen < b:
        raise ValueError(f"recalibration stream ended after {seen} of {b} batches")
    out = params.copy()
    for i in bn_ids:
        dt = out.layers[i]["running_mean"].dtype
        out.layers[i]["running_mean"] = (sums[i][0] / seen).astype(dt)
        out.layers[i]["running_var"] = (sums[i][1] / seen).astype(dt)
    return out
