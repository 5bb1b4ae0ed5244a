"""Quantization-aware feed-forward networks in plain NumPy.

Activations (never weights) are fake-quantized after every dense or conv
layer: each value is mapped to one of ``2**k`` uniform levels between the
smallest and largest activation the layer produced during the current epoch.
The quantized values are what the next layer sees, so the integer level
indices ("codes") are the exact discrete state of the layer. Gradients pass
straight through the quantizer.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .rng import Stream, derive_seed

ACTIVATIONS = ("tanh", "relu", "softmax")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
RECORD_CHUNK = 4096

_TAG_INIT = 0x1A1
_TAG_EPOCH = 0x1A2


# ---------------------------------------------------------------------------
# architecture description


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv | maxpool | flatten
    width: int = 0  # dense units or conv output channels
    activation: str | None = None
    window: tuple = ()  # conv kernel or pooling window (h, w)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("dense", "conv"):
            d["width"] = self.width
            d["activation"] = self.activation
        if self.kind in ("conv", "maxpool"):
            d["window"] = list(self.window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            d["kind"],
            int(d.get("width", 0)),
            d.get("activation"),
            tuple(int(v) for v in d.get("window", ())),
        )

    @property
    def measured(self) -> bool:
        return self.kind in ("dense", "conv")


def dense(width: int, activation: str) -> LayerSpec:
    return LayerSpec("dense", width, activation)


def conv(kernel_h: int, kernel_w: int, channels: int, activation: str) -> LayerSpec:
    return LayerSpec("conv", channels, activation, (kernel_h, kernel_w))


def maxpool(h: int = 2, w: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", window=(h, w))


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    quant_bits: int | None = 8  # None: no quantization
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    def validate(self) -> None:
        if not self.layers:
            raise ValueError("network has no layers")
        last = self.layers[-1]
        if last.kind != "dense" or last.activation != "softmax":
            raise ValueError("final layer must be dense with softmax activation")
        for layer in self.layers[:-1]:
            if layer.measured and layer.activation not in ("tanh", "relu"):
                raise ValueError(
                    f"hidden activation must be tanh or relu, got {layer.activation!r}"
                )
            if layer.kind not in ("dense", "conv", "maxpool", "flatten"):
                raise ValueError(f"unknown layer kind {layer.kind!r}")
        if self.quant_bits is not None and (int(self.quant_bits) != self.quant_bits or self.quant_bits < 1):
            raise ValueError(f"quant_bits must be a positive integer or None, got {self.quant_bits!r}")
        self.shapes()

    def shapes(self) -> list[tuple]:
        """Per-layer output shapes (excluding the batch axis)."""
        shape = self.input_shape
        out = []
        for layer in self.layers:
            if layer.kind == "dense":
                if len(shape) != 1:
                    raise ValueError(f"dense layer needs flat input, got shape {shape}")
                shape = (layer.width,)
            elif layer.kind == "conv":
                if len(shape) != 3:
                    raise ValueError(f"conv layer needs (c, h, w) input, got shape {shape}")
                kh, kw = layer.window
                shape = (layer.width, shape[1] - kh + 1, shape[2] - kw + 1)
                if shape[1] < 1 or shape[2] < 1:
                    raise ValueError("conv kernel larger than its input")
            elif layer.kind == "maxpool":
                if len(shape) != 3:
                    raise ValueError(f"maxpool needs (c, h, w) input, got shape {shape}")
                ph, pw = layer.window
                shape = (shape[0], shape[1] // ph, shape[2] // pw)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            out.append(shape)
        return out

    @property
    def measured_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.measured]

    @property
    def widths(self) -> list[int]:
        """Neuron count d_T of every measured layer."""
        shapes = self.shapes()
        return [int(np.prod(shapes[i])) for i in self.measured_layers]

    @property
    def activations(self) -> list[str]:
        return [self.layers[i].activation for i in self.measured_layers]

    def to_dict(self) -> dict:
        return {
            "layers": [layer.to_dict() for layer in self.layers],
            "input_shape": list(self.input_shape),
            "quant_bits": self.quant_bits,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            tuple(d["input_shape"]),
            d.get("quant_bits"),
            int(d.get("seed", 0)),
        )


def mlp_spec(input_dim, hidden, activation, num_classes, quant_bits=8, seed=0) -> NetworkSpec:
    layers = [dense(w, activation) for w in hidden] + [dense(num_classes, "softmax")]
    return NetworkSpec(tuple(layers), (input_dim,), quant_bits, seed)


# ---------------------------------------------------------------------------
# parameters and optimizer state


@dataclass(eq=False)
class Network:
    spec: NetworkSpec
    params: list  # per layer: {"W": ..., "b": ...} or None
    m: list
    v: list
    t: int = 0

    def parameters(self):
        """(layer index, name, array) for every trainable array."""
        for i, p in enumerate(self.params):
            if p is not None:
                yield i, "W", p["W"]
                yield i, "b", p["b"]

    def copy(self) -> "Network":
        dup = lambda ps: [None if p is None else {k: a.copy() for k, a in p.items()} for p in ps]
        return Network(self.spec, dup(self.params), dup(self.m), dup(self.v), self.t)


def init_network(spec: NetworkSpec, seed: int | None = None) -> Network:
    """Truncated-normal weights (std 1/sqrt(width), cut at 2 std), zero biases."""
    spec.validate()
    seed = spec.seed if seed is None else seed
    stream = Stream(derive_seed(_TAG_INIT, seed))
    in_shape = spec.input_shape
    params = []
    for layer, out_shape in zip(spec.layers, spec.shapes()):
        if layer.kind == "dense":
            std = 1.0 / np.sqrt(layer.width)
            params.append({
                "W": stream.truncated_normal((in_shape[0], layer.width), std),
                "b": np.zeros(layer.width),
            })
        elif layer.kind == "conv":
            kh, kw = layer.window
            std = 1.0 / np.sqrt(layer.width)
            params.append({
                "W": stream.truncated_normal((kh * kw * in_shape[0], layer.width), std),
                "b": np.zeros(layer.width),
            })
        else:
            params.append(None)
        in_shape = out_shape
    zeros = [None if p is None else {k: np.zeros_like(a) for k, a in p.items()} for p in params]
    zeros2 = [None if p is None else {k: np.zeros_like(a) for k, a in p.items()} for p in params]
    return Network(spec, params, zeros, zeros2, 0)


def save_network(network: Network, path: str | os.PathLike) -> None:
    """Checkpoint as an ``.npz`` archive: ``spec.json`` plus one array per
    parameter/moment (``W3``, ``m_b3``, ...) and the step counter ``t``."""
    arrays = {"spec_json": np.frombuffer(json.dumps(network.spec.to_dict()).encode(), dtype=np.uint8)}
    for i, p in enumerate(network.params):
        if p is None:
            continue
        for k in ("W", "b"):
            arrays[f"{k}{i}"] = p[k]
            arrays[f"m_{k}{i}"] = network.m[i][k]
            arrays[f"v_{k}{i}"] = network.v[i][k]
    arrays["t"] = np.array(network.t, dtype=np.int64)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_network(path: str | os.PathLike) -> Network:
    with np.load(path) as z:
        spec = NetworkSpec.from_dict(json.loads(bytes(z["spec_json"]).decode()))
        params, m, v = [], [], []
        for i, layer in enumerate(spec.layers):
            if not layer.measured:
                params.append(None), m.append(None), v.append(None)
                continue
            params.append({k: z[f"{k}{i}"] for k in ("W", "b")})
            m.append({k: z[f"m_{k}{i}"] for k in ("W", "b")})
            v.append({k: z[f"v_{k}{i}"] for k in ("W", "b")})
        return Network(spec, params, m, v, int(z["t"]))


# ---------------------------------------------------------------------------
# quantization


def code_dtype(bits: int):
    if bits <= 8:
        return np.uint8
    if bits <= 16:
        return np.uint16
    if bits <= 32:
        return np.uint32
    return np.uint64


def quantize(values, bits: int, lo: float, hi: float):
    """Map values onto ``2**bits`` uniform levels in ``[lo, hi]``.

    Returns ``(codes, dequantized)``. Values outside the range are clamped;
    a degenerate range (``lo == hi``) sends everything to code 0.
    """
    values = np.asarray(values, dtype=np.float64)
    top = (1 << int(bits)) - 1
    if not hi > lo:
        return np.zeros(values.shape, dtype=code_dtype(bits)), np.full(values.shape, float(lo))
    span = hi - lo
    codes = np.rint((np.clip(values, lo, hi) - lo) * (top / span))
    deq = lo + codes * (span / top)
    deq[codes == top] = hi
    return codes.astype(code_dtype(bits)), deq


@dataclass(eq=False)
class QuantState:
    """Per-layer activation range accumulated over the current epoch."""

    bits: int | None
    lo: np.ndarray
    hi: np.ndarray
    # layers whose lower bound is pinned at 0 (softmax output)
    pinned_zero: np.ndarray = field(default=None)

    @classmethod
    def for_spec(cls, spec: NetworkSpec) -> "QuantState":
        n = len(spec.measured_layers)
        pinned = np.array([a == "softmax" for a in spec.activations])
        return cls(spec.quant_bits, np.full(n, np.nan), np.full(n, np.nan), pinned)

    @property
    def enabled(self) -> bool:
        return self.bits is not None

    @property
    def ready(self) -> bool:
        return not (np.isnan(self.lo).any() or np.isnan(self.hi).any())

    def reset(self) -> None:
        self.lo[:] = np.nan
        self.hi[:] = np.nan

    def observe(self, j: int, a: np.ndarray) -> None:
        lo = 0.0 if self.pinned_zero[j] else float(a.min())
        hi = float(a.max())
        if np.isnan(self.lo[j]):
            self.lo[j], self.hi[j] = lo, hi
        else:
            self.lo[j] = min(self.lo[j], lo)
            self.hi[j] = max(self.hi[j], hi)

    def copy(self) -> "QuantState":
        return QuantState(self.bits, self.lo.copy(), self.hi.copy(), self.pinned_zero.copy())


# ---------------------------------------------------------------------------
# forward / backward


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # valid cross-correlation, stride 1, channels first; w rows ordered (dy, dx, c_in).
    # Channel counts are tiny, so per-tap scaled adds beat im2col here.
    n, cin, hh, ww = x.shape
    oh, ow = hh - kh + 1, ww - kw + 1
    wt = w.reshape(kh, kw, cin, -1)
    cout = wt.shape[-1]
    z = np.empty((n, cout, oh, ow))
    for o in range(cout):
        zo = z[:, o]
        zo[...] = b[o]
        for c in range(cin):
            for dy in range(kh):
                for dx in range(kw):
                    zo += wt[dy, dx, c, o] * x[:, c, dy:dy + oh, dx:dx + ow]
    return z


def _conv_backward(x: np.ndarray, w: np.ndarray, dz: np.ndarray, kh: int, kw: int, need_input: bool):
    n, cin, hh, ww = x.shape
    cout, oh, ow = dz.shape[1:]
    wt = w.reshape(kh, kw, cin, cout)
    gw = np.empty_like(wt)
    gx = np.zeros(x.shape) if need_input else None
    for c in range(cin):
        for dy in range(kh):
            for dx in range(kw):
                xs = x[:, c, dy:dy + oh, dx:dx + ow]
                for o in range(cout):
                    gw[dy, dx, c, o] = np.vdot(xs, dz[:, o]) if xs.flags.c_contiguous else (xs * dz[:, o]).sum()
                    if need_input:
                        gx[:, c, dy:dy + oh, dx:dx + ow] += wt[dy, dx, c, o] * dz[:, o]
    return gw.reshape(w.shape), dz.sum(axis=(0, 2, 3)), gx


@dataclass(eq=False)
class Trace:
    """Everything a forward pass produced, indexed by layer position."""

    inputs: list  # layer input (dequantized output of the previous layer)
    continuous: list  # post-activation, before quantization (measured layers)
    codes: list  # integer levels (measured layers, quantization on)
    outputs: list  # what the next layer sees
    aux: list  # max-pooling argmax indices
    probs: np.ndarray = None
    log_probs: np.ndarray = None
    ranges: list = None  # (lo, hi) used per measured layer


def forward(network: Network, batch: np.ndarray, quant: QuantState, mode: str = "train") -> Trace:
    """Fake-quantized forward pass.

    In ``train`` mode the quantizer ranges are widened by this batch before
    quantizing; in ``record`` mode they are frozen (layers whose range was
    never observed fall back to the range of this batch alone).
    """
    spec = network.spec
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        if x.ndim == 2 and x.shape[1] == int(np.prod(spec.input_shape)):
            x = x.reshape((x.shape[0],) + spec.input_shape)
        else:
            raise ValueError(f"batch shape {x.shape[1:]} does not match input shape {spec.input_shape}")
    if mode not in ("train", "record"):
        raise ValueError(f"unknown mode {mode!r}")
    n_layers = len(spec.layers)
    tr = Trace([None] * n_layers, [None] * n_layers, [None] * n_layers, [None] * n_layers, [None] * n_layers, ranges=[None] * n_layers)
    h = x
    j = -1
    for i, (layer, p) in enumerate(zip(spec.layers, network.params)):
        tr.inputs[i] = h
        if layer.kind == "dense":
            z = h @ p["W"] + p["b"]
        elif layer.kind == "conv":
            z = _conv_forward(h, p["W"], p["b"], *layer.window)
        elif layer.kind == "maxpool":
            ph, pw = layer.window
            n, c, hh, ww = h.shape
            oh, ow = hh // ph, ww // pw
            blocks = (h[:, :, :oh * ph, :ow * pw].reshape(n, c, oh, ph, ow, pw)
                      .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, ph * pw))
            arg = blocks.argmax(axis=-1)[..., None]
            tr.aux[i] = arg
            h = np.take_along_axis(blocks, arg, axis=-1)[..., 0]
            tr.outputs[i] = h
            continue
        else:
            h = h.reshape(h.shape[0], -1)
            tr.outputs[i] = h
            continue
        j += 1
        a = _activate(z, layer.activation)
        if layer.activation == "softmax":
            tr.probs = a
            zs = z - z.max(axis=1, keepdims=True)
            tr.log_probs = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
        tr.continuous[i] = a
        if quant.enabled:
            if mode == "train" or np.isnan(quant.lo[j]):
                if mode == "train":
                    quant.observe(j, a)
                    lo, hi = quant.lo[j], quant.hi[j]
                else:
                    lo = 0.0 if quant.pinned_zero[j] else float(a.min())
                    hi = float(a.max())
            else:
                lo, hi = quant.lo[j], quant.hi[j]
            codes, h = quantize(a, quant.bits, lo, hi)
            tr.codes[i] = codes
            tr.ranges[i] = (float(lo), float(hi))
        else:
            h = a
        tr.outputs[i] = h
    return tr


def _one_hot(targets, num_classes: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.ndim == 2:
        return targets.astype(np.float64)
    out = np.zeros((targets.shape[0], num_classes))
    out[np.arange(targets.shape[0]), targets] = 1.0
    return out


def cross_entropy(trace: Trace, targets) -> float:
    y = _one_hot(targets, trace.probs.shape[1])
    return float(-(y * trace.log_probs).sum() / y.shape[0])


def backward(network: Network, trace: Trace, targets) -> list:
    """Gradients of the mean cross-entropy, straight through the quantizers.

    ``targets`` is an integer label vector or a row-stochastic matrix. The
    quantizer contributes a derivative of 1 inside its range, 0 outside.
    """
    spec = network.spec
    y = _one_hot(targets, trace.probs.shape[1])
    n = y.shape[0]
    grads = [None] * len(spec.layers)
    g = None  # gradient w.r.t. the output of the current layer
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, p = spec.layers[i], network.params[i]
        if layer.kind == "flatten":
            g = g.reshape(trace.inputs[i].shape)
            continue
        if layer.kind == "maxpool":
            arg = trace.aux[i]
            ph, pw = layer.window
            nb, c, oh, ow, _ = arg.shape
            gb = np.zeros((nb, c, oh, ow, ph * pw))
            np.put_along_axis(gb, arg, g[..., None], axis=-1)
            gi = np.zeros(trace.inputs[i].shape)
            gi[:, :, :oh * ph, :ow * pw] = (gb.reshape(nb, c, oh, ow, ph, pw)
                                            .transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, oh * ph, ow * pw))
            g = gi
            continue
        a = trace.continuous[i]
        if layer.activation == "softmax":
            dz = (trace.probs - y) / n
        else:
            if trace.ranges[i] is not None:
                lo, hi = trace.ranges[i]
                g = g * ((a >= lo) & (a <= hi))
            if layer.activation == "tanh":
                dz = g * (1.0 - a * a)
            else:
                dz = g * (a > 0.0)
        if layer.kind == "dense":
            grads[i] = {"W": trace.inputs[i].T @ dz, "b": dz.sum(axis=0)}
            if i > 0:
                g = dz @ p["W"].T
        else:
            gw, gb, g = _conv_backward(trace.inputs[i], p["W"], dz, *layer.window, need_input=i > 0)
            grads[i] = {"W": gw, "b": gb}
    return grads


def adam_step(network: Network, grads: list, lr: float) -> Network:
    """One bias-corrected Adam update, in place. Returns ``network``."""
    network.t += 1
    t = network.t
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for i, p in enumerate(network.params):
        if p is None:
            continue
        for k in ("W", "b"):
            g = grads[i][k]
            if g.shape != p[k].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p[k].shape}")
            m = network.m[i][k]
            v = network.v[i][k]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            p[k] -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return network


def loss(network: Network, batch, targets, quant: QuantState | None = None) -> float:
    quant = quant or QuantState(None, np.array([]), np.array([]), np.array([]))
    return cross_entropy(forward(network, batch, quant, "train"), targets)


# ---------------------------------------------------------------------------
# epochs and recording


@dataclass
class EpochStats:
    loss: float
    accuracy: float


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return Stream(derive_seed(_TAG_EPOCH, seed, epoch)).permutation(n)


def train_epoch(network, data, quant: QuantState, batch_size: int = 256, lr: float = 1e-4,
                seed: int = 0, epoch: int = 0) -> EpochStats:
    """Reset ranges, then one pass of mini-batch Adam over shuffled ``data``."""
    quant.reset()
    n = len(data)
    order = epoch_order(n, seed, epoch)
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x, y = data.inputs[idx], data.labels[idx]
        tr = forward(network, x, quant, "train")
        total_loss += -tr.log_probs[np.arange(idx.size), y].sum()
        correct += int((tr.probs.argmax(axis=1) == y).sum())
        adam_step(network, backward(network, tr, y), lr)
    return EpochStats(total_loss / n, correct / n)


@dataclass(eq=False)
class StateRecord:
    epoch: int
    codes: list  # per measured layer: (|D|, d_T) integer matrix, or None
    continuous: list | None  # per measured layer: (|D|, d_T) floats
    ranges: list  # per measured layer: (lo, hi) or None
    activations: list
    probs: np.ndarray = field(repr=False, default=None)

    @property
    def num_layers(self) -> int:
        return len(self.activations)


def calibrate(network: Network, inputs: np.ndarray, quant: QuantState) -> None:
    """Fill unset quantizer ranges from a train-mode pass with no update."""
    for start in range(0, inputs.shape[0], RECORD_CHUNK):
        forward(network, inputs[start:start + RECORD_CHUNK], quant, "train")


def record_states(network: Network, data, quant: QuantState, keep_continuous: bool = False,
                  epoch: int = 0) -> StateRecord:
    """Frozen-range pass over every sample of ``data``; collects each layer's
    codes (and continuous activations when asked)."""
    if quant.enabled and not quant.ready:
        quant = quant.copy()
        calibrate(network, data.inputs, quant)
    spec = network.spec
    measured = spec.measured_layers
    codes = [[] for _ in measured]
    cont = [[] for _ in measured]
    probs = []
    ranges = [None] * len(measured)
    for start in range(0, len(data), RECORD_CHUNK):
        tr = forward(network, data.inputs[start:start + RECORD_CHUNK], quant, "record")
        for j, i in enumerate(measured):
            a = tr.continuous[i].reshape(tr.continuous[i].shape[0], -1)
            if quant.enabled:
                codes[j].append(tr.codes[i].reshape(a.shape))
                ranges[j] = tr.ranges[i]
            if keep_continuous or not quant.enabled:
                cont[j].append(a)
        probs.append(tr.probs)
    return StateRecord(
        epoch,
        [np.concatenate(c) for c in codes] if quant.enabled else [None] * len(measured),
        [np.concatenate(c) for c in cont] if (keep_continuous or not quant.enabled) else None,
        ranges,
        spec.activations,
        np.concatenate(probs),
    )


def evaluate(network: Network, data, quant: QuantState) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) of a record-mode pass over ``data``."""
    if quant.enabled and not quant.ready:
        quant = quant.copy()
        calibrate(network, data.inputs, quant)
    correct = 0
    total = 0.0
    for start in range(0, len(data), RECORD_CHUNK):
        x = data.inputs[start:start + RECORD_CHUNK]
        y = data.labels[start:start + RECORD_CHUNK]
        tr = forward(network, x, quant, "record")
        correct += int((tr.probs.argmax(axis=1) == y).sum())
        total += -tr.log_probs[np.arange(y.size), y].sum()
    return correct / len(data), total / len(data)


def detect_dead_layer(record: StateRecord) -> list[int]:
    """Indices of hidden ReLU layers that output 0 for every sample."""
    dead = []
    for j, act in enumerate(record.activations[:-1]):
        if act != "relu":
            continue
        if record.codes[j] is not None:
            lo, _ = record.ranges[j]
            if lo == 0.0 and not record.codes[j].any():
                dead.append(j)
        elif not record.continuous[j].any():
            dead.append(j)
    return dead
