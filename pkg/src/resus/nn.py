"""Layer graph, parameters and forward pass for small NCHW CNNs.

A network is an ordered list of :class:`LayerSpec`. Layer ``i`` reads the
output of layer ``i - 1`` unless ``input_from`` names another layer (``-1`` is
the network input). ``residual_add`` sums its input with ``skip_source``.

Convolutions immediately followed by a BatchNorm are *repairable*, except the
first convolution of the network, whose input is raw pixels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KINDS = (
    "conv2d",
    "batchnorm",
    "relu",
    "avgpool",
    "global_avgpool",
    "linear",
    "residual_add",
)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    # conv2d
    c_in: int = 0
    c_out: int = 0
    k: int = 0
    stride: int = 1
    padding: int = 0
    has_bias: bool = False
    # batchnorm
    c: int = 0
    eps_bn: float = 1e-5
    learn_scale: bool = True
    learn_shift: bool = True
    # avgpool (stride reused)
    window: int = 0
    # linear
    d_in: int = 0
    d_out: int = 0
    # wiring
    input_from: int | None = None
    skip_source: int | None = None

    def to_dict(self) -> dict:
        defaults = {f.name: f.default for f in fields(self)}
        d = {"kind": self.kind}
        for key, value in asdict(self).items():
            if key != "kind" and value != defaults[key]:
                d[key] = value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def conv(c_in, c_out, k=3, stride=1, padding=None, name="", **kw) -> LayerSpec:
    if padding is None:
        padding = k // 2
    return LayerSpec("conv2d", name=name, c_in=c_in, c_out=c_out, k=k,
                     stride=stride, padding=padding, **kw)


def bn(c, name="", **kw) -> LayerSpec:
    return LayerSpec("batchnorm", name=name, c=c, **kw)


def relu(name="") -> LayerSpec:
    return LayerSpec("relu", name=name)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    num_classes: int
    arch: str = "custom"
    _shapes: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "_shapes", tuple(_infer_shapes(self)))

    def source(self, i: int) -> int:
        src = self.layers[i].input_from
        return i - 1 if src is None else src

    def output_shape(self, i: int) -> tuple:
        """Per-sample output shape of layer ``i`` (``-1`` is the input)."""
        return self.input_shape if i < 0 else self._shapes[i]

    @property
    def conv_ids(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "conv2d"]

    @property
    def prunable_ids(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in ("conv2d", "linear")]

    def bn_after(self, i: int) -> int | None:
        """Index of the BatchNorm consuming conv ``i`` directly, if any."""
        j = i + 1
        if j < len(self.layers):
            nxt = self.layers[j]
            if nxt.kind == "batchnorm" and self.source(j) == i:
                return j
        return None

    @property
    def repairable_layer_ids(self) -> list[int]:
        convs = self.conv_ids
        return [i for i in convs[1:] if self.bn_after(i) is not None]

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            num_classes=d["num_classes"],
            arch=d.get("arch", "custom"),
        )


def _infer_shapes(net: NetworkSpec) -> list[tuple]:
    shapes: list[tuple] = []

    def get(i):
        return net.input_shape if i < 0 else shapes[i]

    for i, l in enumerate(net.layers):
        if l.kind not in KINDS:
            raise ShapeError(f"layer {i}: unknown kind {l.kind!r}")
        src = i - 1 if l.input_from is None else l.input_from
        if not -1 <= src < i:
            raise ShapeError(f"layer {i}: input_from {src} must refer to an earlier layer")
        s = get(src)
        where = f"layer {i} ({l.kind}{' ' + l.name if l.name else ''})"
        if l.kind == "conv2d":
            if len(s) != 3 or s[0] != l.c_in:
                raise ShapeError(f"{where}: expects {l.c_in} input channels, got shape {s}")
            if l.k < 1 or l.stride < 1 or l.padding < 0:
                raise ShapeError(f"{where}: bad kernel/stride/padding")
            oh = (s[1] + 2 * l.padding - l.k) // l.stride + 1
            ow = (s[2] + 2 * l.padding - l.k) // l.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"{where}: output would be empty for input {s}")
            shapes.append((l.c_out, oh, ow))
        elif l.kind == "batchnorm":
            if len(s) != 3 or s[0] != l.c:
                raise ShapeError(f"{where}: expects {l.c} channels, got shape {s}")
            shapes.append(s)
        elif l.kind == "relu":
            shapes.append(s)
        elif l.kind == "avgpool":
            if len(s) != 3:
                raise ShapeError(f"{where}: needs a 4-d input")
            oh = (s[1] - l.window) // l.stride + 1
            ow = (s[2] - l.window) // l.stride + 1
            if l.window < 1 or oh < 1 or ow < 1:
                raise ShapeError(f"{where}: bad window for input {s}")
            shapes.append((s[0], oh, ow))
        elif l.kind == "global_avgpool":
            if len(s) != 3:
                raise ShapeError(f"{where}: needs a 4-d input")
            shapes.append((s[0],))
        elif l.kind == "linear":
            d = int(np.prod(s))
            if d != l.d_in:
                raise ShapeError(f"{where}: expects d_in={l.d_in}, got {d}")
            shapes.append((l.d_out,))
        elif l.kind == "residual_add":
            if l.skip_source is None or not 0 <= l.skip_source < i:
                raise ShapeError(f"{where}: needs an earlier skip_source")
            if get(l.skip_source) != s:
                raise ShapeError(
                    f"{where}: branch shape {s} != skip shape {get(l.skip_source)}"
                )
            shapes.append(s)
    if shapes and shapes[-1] != (net.num_classes,):
        raise ShapeError(f"network output {shapes[-1]} != ({net.num_classes},)")
    return shapes


class Parameters:
    """Per-layer parameter arrays, keyed by layer index then field name.

    conv2d: ``weight`` (c_out, c_in, k, k) and optional ``bias``;
    linear: ``weight`` (d_out, d_in), ``bias``;
    batchnorm: ``running_mean``, ``running_var``, ``scale``, ``shift``.
    """

    def __init__(self, layers: dict[int, dict[str, np.ndarray]] | None = None):
        self.layers: dict[int, dict[str, np.ndarray]] = layers or {}

    def __getitem__(self, i: int) -> dict[str, np.ndarray]:
        return self.layers[i]

    def copy(self) -> "Parameters":
        return Parameters({i: {k: v.copy() for k, v in d.items()}
                           for i, d in self.layers.items()})

    def astype(self, dtype) -> "Parameters":
        return Parameters({i: {k: v.astype(dtype) for k, v in d.items()}
                           for i, d in self.layers.items()})

    @property
    def dtype(self):
        for d in self.layers.values():
            for v in d.values():
                return v.dtype
        return np.dtype(np.float32)

    def named_tensors(self) -> Iterable[tuple[str, np.ndarray]]:
        for i in sorted(self.layers):
            for k in sorted(self.layers[i]):
                yield f"{i}.{k}", self.layers[i][k]

    def equals(self, other: "Parameters") -> bool:
        a = dict(self.named_tensors())
        b = dict(other.named_tensors())
        return a.keys() == b.keys() and all(
            a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]) for k in a
        )


def init_parameters(net: NetworkSpec, seed: int, dtype=np.float32) -> Parameters:
    """He-normal conv/linear weights, zero biases, identity BatchNorm."""
    rng = np.random.default_rng(seed)
    layers: dict[int, dict[str, np.ndarray]] = {}
    for i, l in enumerate(net.layers):
        if l.kind == "conv2d":
            fan_in = l.c_in * l.k * l.k
            w = rng.standard_normal((l.c_out, l.c_in, l.k, l.k)) * np.sqrt(2.0 / fan_in)
            d = {"weight": w.astype(dtype)}
            if l.has_bias:
                d["bias"] = np.zeros(l.c_out, dtype)
            layers[i] = d
        elif l.kind == "linear":
            w = rng.standard_normal((l.d_out, l.d_in)) * np.sqrt(1.0 / l.d_in)
            layers[i] = {"weight": w.astype(dtype), "bias": np.zeros(l.d_out, dtype)}
        elif l.kind == "batchnorm":
            layers[i] = {
                "running_mean": np.zeros(l.c, dtype),
                "running_var": np.ones(l.c, dtype),
                "scale": np.ones(l.c, dtype),
                "shift": np.zeros(l.c, dtype),
            }
    return Parameters(layers)


# ---------------------------------------------------------------- kernels


def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # n, c, H', W', k, k
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Zero-padded cross-correlation. ``kernel`` is (c_out, c_in, k, k)."""
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d: input and kernel must be 4-d")
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError("conv2d: only square kernels are supported")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {c_in}")
    win = _windows(x, kh, stride, padding)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))  # n, oh, ow, c_out
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += np.asarray(bias, out.dtype)[None, :, None, None]
    return out


def conv2d_backward(dout, x, kernel, stride, padding):
    """Gradients ``(dx, dkernel, dbias)`` of :func:`conv2d`."""
    c_out, c_in, k, _ = kernel.shape
    win = _windows(x, k, stride, padding)
    dk = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # c_out, c_in, k, k
    n, _, oh, ow = dout.shape
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    dxp = np.zeros((n, c_in, hp, wp), dtype=dout.dtype)
    for a in range(k):
        for b in range(k):
            contrib = np.tensordot(dout, kernel[:, :, a, b], axes=([1], [0]))  # n, oh, ow, c_in
            dxp[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] += contrib.transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:hp - padding, padding:wp - padding] if padding else dxp
    return np.ascontiguousarray(dx), dk, dout.sum(axis=(0, 2, 3))


def batchnorm_eval(x, running_mean, running_var, scale, shift, eps_bn: float = 1e-5):
    """Inference-mode normalization with running statistics."""
    running_var = np.asarray(running_var)
    if (running_var < 0).any():
        raise ValueError("batchnorm: negative running variance")
    if x.shape[1] != running_var.shape[0]:
        raise ShapeError("batchnorm: channel count mismatch")
    dt = x.dtype
    inv = (np.asarray(scale, dt) / np.sqrt(running_var.astype(dt) + dt.type(eps_bn)))
    off = np.asarray(shift, dt) - np.asarray(running_mean, dt) * inv
    return x * inv[None, :, None, None] + off[None, :, None, None]


def batchnorm_train(x, scale, shift, eps_bn: float = 1e-5):
    """Batch-statistics normalization. Returns ``(y, mean, var, cache)``."""
    axes = (0, 2, 3)
    mean = x.mean(axis=axes, dtype=np.float64)
    var = ((x - mean.astype(x.dtype)[None, :, None, None]) ** 2).mean(axis=axes, dtype=np.float64)
    dt = x.dtype
    inv_std = (1.0 / np.sqrt(var + eps_bn)).astype(dt)
    xhat = (x - mean.astype(dt)[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * np.asarray(scale, dt)[None, :, None, None] + np.asarray(shift, dt)[None, :, None, None]
    return y, mean, var, (xhat, inv_std)


def batchnorm_train_backward(dy, scale, cache):
    xhat, inv_std = cache
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    axes = (0, 2, 3)
    dshift = dy.sum(axis=axes)
    dscale = (dy * xhat).sum(axis=axes)
    g = np.asarray(scale, dy.dtype) * inv_std
    dx = (g[None, :, None, None] / m) * (
        m * dy - dshift[None, :, None, None] - xhat * dscale[None, :, None, None]
    )
    return dx, dscale, dshift


def avgpool(x, window: int, stride: int):
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.mean(axis=(4, 5))


def avgpool_backward(dout, in_shape, window, stride):
    dx = np.zeros(in_shape, dtype=dout.dtype)
    oh, ow = dout.shape[2], dout.shape[3]
    g = dout / (window * window)
    for a in range(window):
        for b in range(window):
            dx[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] += g
    return dx


# ---------------------------------------------------------------- forward


@dataclass
class ForwardTaps:
    """Requested pre-BatchNorm tap points and what was captured there."""

    requested: tuple[int, ...] = ()
    captured: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class Trace:
    """Everything a train-mode pass produces: outputs, BN batch moments, cache."""

    logits: np.ndarray
    outputs: list
    bn_moments: dict[int, tuple[np.ndarray, np.ndarray]]
    cache: dict


def run(net: NetworkSpec, params: Parameters, x, *, train: bool = False,
        keep: bool = False, stop_after: int | None = None) -> Trace:
    """Execute the layer graph.

    ``train`` switches BatchNorm to batch statistics (moments are returned in
    ``bn_moments``). ``keep`` retains per-layer caches for backprop.
    ``stop_after`` ends the pass early once that layer has run.
    """
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != net.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    dt = params.dtype
    x = x.astype(dt, copy=False)
    outputs: list = []
    moments: dict = {}
    cache: dict = {}

    def get(i):
        return x if i < 0 else outputs[i]

    for i, l in enumerate(net.layers):
        h = get(net.source(i))
        p = params.layers.get(i, {})
        try:
            if l.kind == "conv2d":
                y = conv2d(h, p["weight"], p.get("bias"), l.stride, l.padding)
            elif l.kind == "batchnorm":
                if train:
                    y, mu, var, bc = batchnorm_train(h, p["scale"], p["shift"], l.eps_bn)
                    moments[i] = (mu, var)
                    if keep:
                        cache[i] = bc
                else:
                    y = batchnorm_eval(h, p["running_mean"], p["running_var"],
                                       p["scale"], p["shift"], l.eps_bn)
            elif l.kind == "relu":
                y = np.maximum(h, 0)
            elif l.kind == "avgpool":
                y = avgpool(h, l.window, l.stride)
            elif l.kind == "global_avgpool":
                y = h.mean(axis=(2, 3))
            elif l.kind == "linear":
                flat = h.reshape(h.shape[0], -1)
                y = flat @ p["weight"].T + p["bias"]
            elif l.kind == "residual_add":
                y = h + outputs[l.skip_source]
        except (ValueError, KeyError) as e:
            raise ShapeError(f"layer {i} ({l.kind}): {e}") from e
        outputs.append(y.astype(dt, copy=False))
        if stop_after is not None and i >= stop_after:
            break
    return Trace(logits=outputs[-1], outputs=outputs, bn_moments=moments, cache=cache)


def forward(net: NetworkSpec, params: Parameters, batch, taps: ForwardTaps | Iterable[int] | None = None,
            *, train: bool = False) -> tuple[np.ndarray, ForwardTaps]:
    """Pure forward pass returning logits and the requested pre-BN taps."""
    if taps is None:
        taps = ForwardTaps()
    elif not isinstance(taps, ForwardTaps):
        taps = ForwardTaps(requested=tuple(taps))
    for t in taps.requested:
        if not 0 <= t < len(net.layers) or net.layers[t].kind != "conv2d":
            raise ValueError(f"tap {t} is not a conv layer")
    trace = run(net, params, batch, train=train)
    out = ForwardTaps(requested=tuple(taps.requested),
                      captured={t: trace.outputs[t].copy() for t in taps.requested})
    return trace.logits, out


def capture(net: NetworkSpec, params: Parameters, batch, layer_ids: Iterable[int]) -> dict[int, np.ndarray]:
    """Eval-mode pre-BN activations at ``layer_ids``, stopping at the deepest one."""
    ids = sorted(set(layer_ids))
    if not ids:
        return {}
    trace = run(net, params, batch, stop_after=ids[-1])
    return {i: trace.outputs[i] for i in ids}


# ---------------------------------------------------------------- presets


def tiny_plain(in_ch: int = 1, size: int = 16, num_classes: int = 4, width: int = 8) -> NetworkSpec:
    """Four conv/BN/ReLU blocks without skips (VGG-like)."""
    w = width
    layers = [
        conv(in_ch, w, name="conv1"), bn(w), relu(),
        conv(w, 2 * w, name="conv2"), bn(2 * w), relu(),
        LayerSpec("avgpool", window=2, stride=2),
        conv(2 * w, 2 * w, name="conv3"), bn(2 * w), relu(),
        conv(2 * w, 4 * w, name="conv4"), bn(4 * w), relu(),
        LayerSpec("global_avgpool"),
        LayerSpec("linear", d_in=4 * w, d_out=num_classes, name="fc"),
    ]
    return NetworkSpec(tuple(layers), (in_ch, size, size), num_classes, arch="tiny-plain")


def _res_block(layers: list, c_in: int, c_out: int, stride: int, tag: str) -> None:
    start = len(layers) - 1  # block input
    layers += [
        conv(c_in, c_out, stride=stride, name=f"{tag}.conv1"), bn(c_out), relu(),
        conv(c_out, c_out, name=f"{tag}.conv2"), bn(c_out),
    ]
    main = len(layers) - 1
    if stride != 1 or c_in != c_out:
        layers += [
            conv(c_in, c_out, k=1, stride=stride, padding=0, input_from=start,
                 name=f"{tag}.proj"),
            bn(c_out),
        ]
        layers.append(LayerSpec("residual_add", skip_source=main, name=f"{tag}.add"))
    else:
        layers.append(LayerSpec("residual_add", skip_source=start, name=f"{tag}.add"))
    layers.append(relu())


def tiny_res(in_ch: int = 1, size: int = 16, num_classes: int = 4, width: int = 8) -> NetworkSpec:
    """Stem plus three residual blocks (ResNet-like)."""
    w = width
    layers: list = [conv(in_ch, w, name="stem"), bn(w), relu()]
    _res_block(layers, w, w, 1, "block1")
    _res_block(layers, w, 2 * w, 2, "block2")
    _res_block(layers, 2 * w, 4 * w, 2, "block3")
    layers += [
        LayerSpec("global_avgpool"),
        LayerSpec("linear", d_in=4 * w, d_out=num_classes, name="fc"),
    ]
    return NetworkSpec(tuple(layers), (in_ch, size, size), num_classes, arch="tiny-res")


PRESETS = {"tiny-plain": tiny_plain, "tiny-res": tiny_res}


def build_preset(name: str, **kw) -> NetworkSpec:
    try:
        return PRESETS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}") from None


def layer_label(net: NetworkSpec, i: int) -> str:
    name = net.layers[i].name
    return f"{i}:{name}" if name else str(i)
