"""Global magnitude and N:M masks, applied permanently to weights."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import NetworkSpec, Parameters

MASK_MAGIC = b"RSMK"
MASK_VERSION = 1


@dataclass(frozen=True)
class SparsityConfig:
    mode: str = "global_l1"
    rate: float = 0.0
    n: int = 2
    m: int = 4

    def __post_init__(self):
        if self.mode == "global_l1":
            if not 0.0 <= self.rate <= 1.0:
                raise ValueError(f"sparsity rate must be in [0, 1], got {self.rate}")
        elif self.mode == "nm":
            if not 0 < self.n <= self.m:
                raise ValueError(f"need 0 < n <= m, got {self.n}:{self.m}")
        else:
            raise ValueError(f"unknown sparsity mode {self.mode!r}")

    def describe(self) -> dict:
        if self.mode == "global_l1":
            return {"mode": "global_l1", "rate": self.rate}
        return {"mode": "nm", "n": self.n, "m": self.m}

    @property
    def key(self) -> str:
        return f"l1-{self.rate:g}" if self.mode == "global_l1" else f"nm-{self.n}:{self.m}"


@dataclass
class PruneMask:
    """Boolean keep-masks (True = weight survives) per prunable layer."""

    masks: dict[int, np.ndarray]
    target: dict = field(default_factory=dict)

    def report(self) -> dict:
        return sparsity_report(self)

    def digest(self) -> str:
        h = hashlib.sha256()
        for i in sorted(self.masks):
            m = self.masks[i]
            h.update(struct.pack("<I", i))
            h.update(np.asarray(m.shape, "<u4").tobytes())
            h.update(np.packbits(m.reshape(-1), bitorder="little").tobytes())
        return h.hexdigest()


def prunable_weights(net: NetworkSpec, params: Parameters) -> dict[int, np.ndarray]:
    """Conv and linear weights; biases and BN parameters are never pruned."""
    return {i: params.layers[i]["weight"] for i in net.prunable_ids}


def global_l1_mask(net: NetworkSpec, params: Parameters, rate: float) -> PruneMask:
    """Remove the ``floor(rate * total)`` smallest-magnitude weights, pooled over layers.

    Ties at equal magnitude go to the lower ``(layer, flat index)`` first, so
    the result does not depend on sort stability.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"sparsity rate must be in [0, 1], got {rate}")
    weights = prunable_weights(net, params)
    if not weights:
        raise ValueError("network has no prunable layers")
    ids = sorted(weights)
    mags = np.concatenate([np.abs(weights[i].astype(np.float64)).reshape(-1) for i in ids])
    total = mags.size
    n_prune = int(np.floor(rate * total))
    # flat position in the concatenation already encodes (layer, index) order
    order = np.lexsort((np.arange(total), mags))
    keep = np.ones(total, dtype=bool)
    keep[order[:n_prune]] = False
    masks, off = {}, 0
    for i in ids:
        size = weights[i].size
        masks[i] = keep[off:off + size].reshape(weights[i].shape)
        off += size
    return PruneMask(masks, {"mode": "global_l1", "rate": rate})


def _group_rows(w: np.ndarray) -> np.ndarray:
    # conv rows are c_in*k*k, linear rows d_in: reduction axis flattened per output
    return w.reshape(w.shape[0], -1)


def nm_mask(net: NetworkSpec, params: Parameters, n: int, m: int) -> PruneMask:
    """Keep the ``n`` largest-|w| of every ``m`` consecutive weights along each row."""
    if not 0 < n <= m:
        raise ValueError(f"need 0 < n <= m, got {n}:{m}")
    masks = {}
    for i, w in prunable_weights(net, params).items():
        rows = _group_rows(w)
        if rows.shape[1] % m:
            raise ValueError(
                f"layer {i} ({net.layers[i].name or net.layers[i].kind}): reduction axis "
                f"length {rows.shape[1]} is not divisible by m={m}"
            )
        groups = np.abs(rows.astype(np.float64)).reshape(-1, m)
        # stable sort on -|w| keeps the lowest index first among ties
        rank = np.argsort(-groups, axis=1, kind="stable")
        keep = np.zeros(groups.shape, dtype=bool)
        np.put_along_axis(keep, rank[:, :n], True, axis=1)
        masks[i] = keep.reshape(w.shape)
    return PruneMask(masks, {"mode": "nm", "n": n, "m": m})


def make_mask(net: NetworkSpec, params: Parameters, cfg: SparsityConfig) -> PruneMask:
    if cfg.mode == "global_l1":
        return global_l1_mask(net, params, cfg.rate)
    return nm_mask(net, params, cfg.n, cfg.m)


def apply_mask_permanent(params: Parameters, mask: PruneMask) -> Parameters:
    """Return a copy with masked weights set to exactly 0.0."""
    out = params.copy()
    for i, keep in mask.masks.items():
        w = out.layers[i]["weight"]
        if keep.shape != w.shape:
            raise ValueError(f"layer {i}: mask shape {keep.shape} != weight shape {w.shape}")
        w[~keep] = 0.0
    return out


def sparsity_report(mask: PruneMask) -> dict:
    layers = []
    kept_total = total = 0
    for i in sorted(mask.masks):
        m = mask.masks[i]
        kept = int(m.sum())
        layers.append({"layer": i, "total": int(m.size), "kept": kept,
                       "density": kept / m.size if m.size else 0.0})
        kept_total += kept
        total += m.size
    density = kept_total / total if total else 0.0
    return {
        "target": dict(mask.target),
        "total": int(total),
        "kept": int(kept_total),
        "zeros": int(total - kept_total),
        "density": density,
        "sparsity": 1.0 - density if total else 0.0,
        "layers": layers,
    }


def save_mask(path, mask: PruneMask) -> None:
    """Bitset export: header, then per layer its index, shape and packed bits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(MASK_MAGIC)
        f.write(struct.pack("<II", MASK_VERSION, len(mask.masks)))
        for i in sorted(mask.masks):
            m = mask.masks[i]
            f.write(struct.pack("<II", i, m.ndim))
            f.write(np.asarray(m.shape, "<u4").tobytes())
            f.write(np.packbits(m.reshape(-1), bitorder="little").tobytes())


def load_mask(path) -> PruneMask:
    raw = Path(path).read_bytes()
    if raw[:4] != MASK_MAGIC:
        raise ValueError(f"{path}: not a mask file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != MASK_VERSION:
        raise ValueError(f"{path}: unsupported mask version {version}")
    off = 12
    masks = {}
    for _ in range(count):
        i, ndim = struct.unpack_from("<II", raw, off)
        off += 8
        shape = tuple(int(s) for s in np.frombuffer(raw, "<u4", ndim, off))
        off += 4 * ndim
        size = int(np.prod(shape))
        nbytes = (size + 7) // 8
        bits = np.frombuffer(raw, np.uint8, nbytes, off)
        off += nbytes
        masks[i] = np.unpackbits(bits, count=size, bitorder="little").astype(bool).reshape(shape)
    return PruneMask(masks)
