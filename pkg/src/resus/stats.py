"""Pooled per-channel statistics of pre-BatchNorm activations."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .nn import NetworkSpec, Parameters, capture
from .tensor import channel_moments


@dataclass
class ChannelStats:
    layer: int
    mean: np.ndarray
    var: np.ndarray
    count: int


@dataclass
class PairedStats:
    dense: dict[int, ChannelStats]
    pruned: dict[int, ChannelStats]

    def __post_init__(self):
        if self.dense.keys() != self.pruned.keys():
            raise ValueError("dense and pruned stats cover different layers")

    @property
    def layer_ids(self) -> list[int]:
        return sorted(self.dense)

    def to_records(self) -> list[dict]:
        rows = []
        for i in self.layer_ids:
            d, p = self.dense[i], self.pruned[i]
            for c in range(len(d.var)):
                rows.append({
                    "layer": i,
                    "channel": c,
                    "mean_dense": float(d.mean[c]),
                    "var_dense": float(d.var[c]),
                    "mean_pruned": float(p.mean[c]),
                    "var_pruned": float(p.var[c]),
                })
        return rows


def iter_batches(calib, batch_size: int | None = None) -> Iterator[np.ndarray]:
    """Yield batches from a single 4-d array or from an iterable of 4-d arrays."""
    if isinstance(calib, np.ndarray):
        if calib.ndim != 4:
            raise ValueError("calibration array must be 4-d")
        step = batch_size or len(calib)
        for s in range(0, len(calib), step):
            yield calib[s:s + step]
    else:
        yield from calib


def collect_stats(net: NetworkSpec, params: Parameters, calib, layer_ids: Iterable[int],
                  batch_size: int | None = None) -> dict[int, ChannelStats]:
    """Mean and population variance per channel, pooled over every calibration image.

    Batches are merged with the pairwise (Chan et al.) update in float64, so
    the result does not depend on how the images are partitioned.
    """
    ids = sorted(set(layer_ids))
    repairable = set(net.repairable_layer_ids)
    stray = [i for i in ids if i not in repairable]
    if stray:
        raise ValueError(f"layers {stray} are not repairable tap points")
    acc: dict[int, tuple[int, np.ndarray, np.ndarray]] = {}
    seen = False
    for batch in iter_batches(calib, batch_size):
        if len(batch) == 0:
            continue
        seen = True
        taps = capture(net, params, batch, ids)
        for i in ids:
            nb, mb, m2b = channel_moments(taps[i], name=f"layer {i}")
            if i not in acc:
                acc[i] = (nb, mb, m2b)
                continue
            na, ma, m2a = acc[i]
            n = na + nb
            delta = mb - ma
            acc[i] = (n, ma + delta * (nb / n), m2a + m2b + delta * delta * (na * nb / n))
    if not seen:
        raise ValueError("empty calibration set")
    return {i: ChannelStats(i, acc[i][1], acc[i][2] / acc[i][0], acc[i][0]) for i in ids}


Model = tuple[NetworkSpec, Parameters]


def collect_paired(dense_model: Model, pruned_model: Model, calib,
                   layer_ids: Iterable[int] | None = None, batch_size: int | None = None) -> PairedStats:
    """Dense and pruned stats over the identical calibration batches."""
    net, dense = dense_model
    pruned_net, pruned = pruned_model
    if pruned_net != net:
        raise ValueError("dense and pruned models have different network specs")
    if isinstance(calib, Iterator):
        # both passes must see identical batches in identical order
        calib = list(calib)
    ids = list(net.repairable_layer_ids if layer_ids is None else layer_ids)
    return PairedStats(
        dense=collect_stats(net, dense, calib, ids, batch_size),
        pruned=collect_stats(net, pruned, calib, ids, batch_size),
    )


def export_stats(path, paired: PairedStats) -> None:
    Path(path).write_text(json.dumps(paired.to_records(), indent=1))
