"""Manual-gradient training, evaluation and finite-difference gradient checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .nn import NetworkSpec, Parameters, avgpool_backward, batchnorm_train_backward, conv2d_backward, run

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64) if logits.dtype != np.float64 else logits
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


def loss_and_grads(net: NetworkSpec, params: Parameters, x, labels):
    """Train-mode forward plus reverse pass.

    Returns ``(loss, grads, trace)`` where ``grads`` mirrors the layout of
    ``params`` for every trainable field (BN running statistics excluded).
    """
    trace = run(net, params, x, train=True, keep=True)
    xin = np.asarray(x, dtype=params.dtype)
    outs = trace.outputs
    loss, dlogits = cross_entropy(trace.logits, labels)

    gout: list = [None] * len(net.layers)
    gout[-1] = dlogits
    grads: dict[int, dict[str, np.ndarray]] = {}

    def push(i, g):
        if i < 0:
            return
        gout[i] = g if gout[i] is None else gout[i] + g

    for i in range(len(net.layers) - 1, -1, -1):
        g = gout[i]
        if g is None:
            continue
        l = net.layers[i]
        src = net.source(i)
        h = xin if src < 0 else outs[src]
        p = params.layers.get(i, {})
        if l.kind == "conv2d":
            dx, dw, db = conv2d_backward(g, h, p["weight"], l.stride, l.padding)
            grads[i] = {"weight": dw}
            if "bias" in p:
                grads[i]["bias"] = db
            push(src, dx)
        elif l.kind == "batchnorm":
            dx, dscale, dshift = batchnorm_train_backward(g, p["scale"], trace.cache[i])
            grads[i] = {}
            if l.learn_scale:
                grads[i]["scale"] = dscale
            if l.learn_shift:
                grads[i]["shift"] = dshift
            push(src, dx)
        elif l.kind == "relu":
            push(src, g * (outs[i] > 0))
        elif l.kind == "avgpool":
            push(src, avgpool_backward(g, h.shape, l.window, l.stride))
        elif l.kind == "global_avgpool":
            hw = h.shape[2] * h.shape[3]
            push(src, np.broadcast_to((g / hw)[:, :, None, None], h.shape).copy())
        elif l.kind == "linear":
            flat = h.reshape(h.shape[0], -1)
            grads[i] = {"weight": g.T @ flat, "bias": g.sum(axis=0)}
            push(src, (g @ p["weight"]).reshape(h.shape))
        elif l.kind == "residual_add":
            push(src, g)
            push(l.skip_source, g)
    return loss, grads, trace


def train(net: NetworkSpec, params: Parameters, data: Dataset, cfg: TrainConfig,
          history: list | None = None) -> Parameters:
    """SGD with momentum on softmax cross-entropy.

    BatchNorm running statistics are the equal-weight average of the batch
    moments seen during the most recent epoch. Mean epoch losses are appended
    to ``history`` when given.
    """
    params = params.copy()
    if cfg.lr == 0 or cfg.epochs == 0:
        return params
    velocity: dict = {}
    n = len(data)
    bn_ids = [i for i, l in enumerate(net.layers) if l.kind == "batchnorm"]
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        sums = {i: [0.0, 0.0] for i in bn_ids}
        n_batches = 0
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads, trace = loss_and_grads(net, params, data.images[idx], data.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
            losses.append(loss * len(idx))
            for i, fields_ in grads.items():
                for k, g in fields_.items():
                    v = velocity.setdefault((i, k), np.zeros_like(g))
                    v *= cfg.momentum
                    v += g
                    params.layers[i][k] -= (cfg.lr * v).astype(params.layers[i][k].dtype)
            n_batches += 1
            for i in bn_ids:
                mu, var = trace.bn_moments[i]
                sums[i][0] = sums[i][0] + mu
                sums[i][1] = sums[i][1] + var
        for i in bn_ids:
            dt = params.layers[i]["running_mean"].dtype
            params.layers[i]["running_mean"] = (sums[i][0] / n_batches).astype(dt)
            params.layers[i]["running_var"] = (sums[i][1] / n_batches).astype(dt)
        epoch_loss = sum(losses) / n
        log.info("epoch %d loss %.4f", epoch, epoch_loss)
        if history is not None:
            history.append(epoch_loss)
    return params


def predict(net: NetworkSpec, params: Parameters, images, batch_size: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        out.append(run(net, params, images[s:s + batch_size]).logits)
    return np.concatenate(out)


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return float((np.argmax(logits, axis=1) == labels).mean())


def evaluate(net: NetworkSpec, params: Parameters, split: Dataset) -> float:
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return top1(predict(net, params, split.images), split.labels)


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-5
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(net: NetworkSpec, params: Parameters, batch, labels, tol: float = 1e-5,
               step: float = 1e-5, floor: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central differences in float64.

    Element error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    entries whose true gradient is ~0 from turning roundoff into huge ratios.
    """
    p64 = params.astype(np.float64)
    x = np.asarray(batch, dtype=np.float64)
    _, grads, _ = loss_and_grads(net, p64, x, labels)
    report = GradCheckReport(tol=tol)
    for i in sorted(grads):
        for k in sorted(grads[i]):
            a = grads[i][k]
            arr = p64.layers[i][k]
            num = np.empty_like(arr)
            flat, nflat = arr.reshape(-1), num.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                lp, _ = cross_entropy(run(net, p64, x, train=True).logits, labels)
                flat[j] = orig - step
                lm, _ = cross_entropy(run(net, p64, x, train=True).logits, labels)
                flat[j] = orig
                nflat[j] = (lp - lm) / (2 * step)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
            err = float((np.abs(a - num) / denom).max()) if a.size else 0.0
            name = f"{i}.{k}"
            report.max_rel_error[name] = err
            if not err < tol:
                report.failures.append(name)
    return report
