"""Spiking conv/dense networks with quantized synapses and manual BPTT.

Activations are time-major, ``(T, B, ...)``. Synaptic and pooling layers are
stateless, so they run on all timesteps at once with time folded into the
batch axis; only LIF layers iterate over time.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import quantizer as qz
from .neuron import (
    LifParams,
    LifTape,
    SurrogateParams,
    lif_backward,
    lif_sequence,
    surrogate_region,
)

KINDS = ("conv2d", "dense", "maxpool2", "lif", "voting_avgpool")
SYNAPTIC = ("conv2d", "dense")
MODES = ("train_soft", "infer_hard")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 3
    same_padding: bool = True
    out_features: int = 0
    window: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")


def conv(out_channels: int, kernel: int = 3, same_padding: bool = True) -> LayerSpec:
    return LayerSpec("conv2d", out_channels=out_channels, kernel=kernel, same_padding=same_padding)


def dense(out_features: int) -> LayerSpec:
    return LayerSpec("dense", out_features=out_features)


def maxpool2() -> LayerSpec:
    return LayerSpec("maxpool2")


def lif() -> LayerSpec:
    return LayerSpec("lif")


def vote(window: int = 10) -> LayerSpec:
    return LayerSpec("voting_avgpool", window=window)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    timesteps: int = 10
    bits: int = 32
    neuron: LifParams = field(default_factory=LifParams)
    surrogate: SurrogateParams = field(default_factory=SurrogateParams)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.bits not in qz.SUPPORTED_BITS + (32,):
            raise ValueError(f"bits must be one of {qz.SUPPORTED_BITS + (32,)}, got {self.bits}")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if not self.layers or self.layers[-1].kind != "voting_avgpool":
            raise ValueError("network must end with a voting_avgpool layer")
        for i, layer in enumerate(self.layers):
            if layer.kind not in SYNAPTIC:
                continue
            nxt = next((l.kind for l in self.layers[i + 1:] if l.kind != "maxpool2"), None)
            if nxt != "lif":
                raise ValueError(f"synaptic layer {i} ({layer.kind}) is not followed by a lif layer")

    @property
    def n_classes(self) -> int:
        return layer_shapes(self)[-1][0]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        d = json.loads(text)
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=tuple(LayerSpec(**l) for l in d["layers"]),
            timesteps=d["timesteps"],
            bits=d["bits"],
            neuron=LifParams(**d["neuron"]),
            surrogate=SurrogateParams(**d["surrogate"]),
        )


_TOKEN = re.compile(r"^(?:(\d+)Conv(\d+)|MP2|(\d+)?Dense(\d+)|AP(\d+))$")


def parse_topology(text: str, input_shape, **kwargs) -> NetworkSpec:
    """Build a spec from compact notation such as ``5x(128Conv3-MP2)-512Dense100-AP10``.

    ``aConvk`` is a k x k same-padded conv with ``a`` output channels,
    ``aDenseb`` is two dense layers (``a`` then ``b`` units), ``Denseb`` one.
    Every synaptic layer gets its own LIF layer; a missing voting head is
    added with window 1.
    """
    text = text.replace(" ", "").replace("×", "x")
    expanded = []
    for part in re.split(r"-(?![^(]*\))", text):
        m = re.fullmatch(r"(\d+)x\((.*)\)", part)
        if m:
            expanded += int(m.group(1)) * m.group(2).split("-")
        else:
            expanded.append(part)
    layers = []
    for tok in expanded:
        m = _TOKEN.match(tok)
        if not m:
            raise ValueError(f"cannot parse topology token {tok!r}")
        if m.group(1):
            layers += [conv(int(m.group(1)), int(m.group(2))), lif()]
        elif tok == "MP2":
            layers.append(maxpool2())
        elif m.group(4):
            if m.group(3):
                layers += [dense(int(m.group(3))), lif()]
            layers += [dense(int(m.group(4))), lif()]
        else:
            layers.append(vote(int(m.group(5))))
    if layers[-1].kind != "voting_avgpool":
        layers.append(vote(1))
    return NetworkSpec(input_shape=tuple(input_shape), layers=tuple(layers), **kwargs)


PRESETS = {
    "cifar10dvs": ("5x(128Conv3-MP2)-512Dense100-AP10", (2, 128, 128)),
    "dvs128": ("5x(128Conv3-MP2)-512Dense110-AP10", (2, 128, 128)),
    "ncaltech101": ("5x(128Conv3-MP2)-512Dense1010-AP10", (2, 180, 240)),
    "nmnist": ("5x(128Conv3-MP2)-512Dense100-AP10", (2, 34, 34)),
    "nmnist-small": ("64Conv7-MP2-128Conv7-128Conv7-MP2-Dense11", (2, 34, 34)),
    "desk-tiny": ("2x(8Conv3-MP2)-64Dense30-AP10", (2, 16, 16)),
}


def preset(name: str, **kwargs) -> NetworkSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    topo, shape = PRESETS[name]
    return parse_topology(topo, shape, **kwargs)


def layer_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Per-sample output shape of every layer; raises on collapsed spatial dims."""
    shape = tuple(spec.input_shape)
    out = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv2d":
            if len(shape) != 3:
                raise ValueError(f"layer {i}: conv2d needs a (C, H, W) input, got {shape}")
            k = layer.kernel
            if layer.same_padding:
                if k % 2 == 0:
                    raise ValueError(f"layer {i}: same padding needs an odd kernel")
                shape = (layer.out_channels, shape[1], shape[2])
            else:
                shape = (layer.out_channels, shape[1] - k + 1, shape[2] - k + 1)
        elif layer.kind == "maxpool2":
            if len(shape) != 3:
                raise ValueError(f"layer {i}: maxpool2 needs a (C, H, W) input, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif layer.kind == "dense":
            shape = (layer.out_features,)
        elif layer.kind == "voting_avgpool":
            flat = int(np.prod(shape))
            if flat % layer.window:
                raise ValueError(f"layer {i}: {flat} features not divisible by window {layer.window}")
            shape = (flat // layer.window,)
        if min(shape) <= 0:
            raise ValueError(f"layer {i} ({layer.kind}): spatial size reaches 0 ({shape})")
        out.append(shape)
    return out


def param_count(spec: NetworkSpec) -> int:
    total = 0
    prev = tuple(spec.input_shape)
    for layer, shape in zip(spec.layers, layer_shapes(spec)):
        if layer.kind == "conv2d":
            total += layer.out_channels * prev[0] * layer.kernel**2
        elif layer.kind == "dense":
            total += layer.out_features * int(np.prod(prev))
        prev = shape
    return total


# ---------------------------------------------------------------------------
# layer kernels


def conv_forward(x, w, same_padding=True):
    k = w.shape[-1]
    p = k // 2 if same_padding else 0
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv_backward(dy, x, w, same_padding=True, need_dx=True):
    k = w.shape[-1]
    p = k // 2 if same_padding else 0
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))
    if not need_dx:
        return None, dw
    ho, wo = dy.shape[2:]
    dcols = np.tensordot(dy, w, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
    dxp = np.zeros(xp.shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + ho, j:j + wo] += dcols[..., i, j].transpose(0, 3, 1, 2)
    h, wd = x.shape[2:]
    return dxp[:, :, p:p + h, p:p + wd], dw


def maxpool_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = (
        x[:, :, : 2 * h2, : 2 * w2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = np.argmax(win, axis=-1)  # first index wins ties
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool_backward(dy, idx, in_shape):
    n, c, h, w = in_shape
    h2, w2 = dy.shape[2:]
    dwin = np.zeros(dy.shape + (4,), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[:, :, : 2 * h2, : 2 * w2] = (
        dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    )
    return dx


# ---------------------------------------------------------------------------


@dataclass
class SynapticLayer:
    index: int
    spec: LayerSpec
    weight: np.ndarray
    quant: qz.Quantizer | None = None

    def effective_weight(self, mode: str) -> np.ndarray:
        if self.quant is None:
            return self.weight
        if mode == "train_soft":
            return qz.quantize_soft(self.weight, self.quant.spec, self.quant.state)
        return qz.quantize_step(self.weight, self.quant.spec, self.quant.state)


@dataclass
class LayerGrad:
    index: int
    dW: np.ndarray
    dalpha: float | None = None
    dbeta: float | None = None


@dataclass
class Gradients:
    layers: list[LayerGrad]

    def __iter__(self):
        return iter(self.layers)


@dataclass
class ActivationTape:
    mode: str
    relaxed: bool
    batch: int
    inputs: dict[int, np.ndarray] = field(default_factory=dict)
    lif: dict[int, LifTape] = field(default_factory=dict)
    argmax: dict[int, np.ndarray] = field(default_factory=dict)
    weights: dict[int, np.ndarray] = field(default_factory=dict)
    weights_q: dict[int, np.ndarray] = field(default_factory=dict)
    quant_states: dict[int, qz.LayerQuantState] = field(default_factory=dict)
    voted: np.ndarray | None = None

    def regions(self, surrogate: SurrogateParams, neuron: LifParams):
        """Discrete routing signature: surrogate regions and pool winners."""
        sig = [surrogate_region(t.h - neuron.v_threshold, surrogate) for _, t in sorted(self.lif.items())]
        sig += [a for _, a in sorted(self.argmax.items())]
        return sig


class Network:
    def __init__(self, spec: NetworkSpec, layers: list[SynapticLayer], dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.synaptic = {l.index: l for l in layers}
        self.shapes = layer_shapes(spec)

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def synaptic_layers(self) -> list[SynapticLayer]:
        return [self.synaptic[i] for i in sorted(self.synaptic)]

    def param_count(self) -> int:
        return sum(l.weight.size for l in self.synaptic.values())

    def set_temperature(self, temperature: float) -> None:
        for layer in self.synaptic.values():
            if layer.quant is not None:
                layer.quant.state.temperature = float(temperature)

    def effective_weights(self, mode: str = "infer_hard") -> list[np.ndarray]:
        return [l.effective_weight(mode) for l in self.synaptic_layers]

    def _batch(self, frames):
        x = np.asarray(frames, dtype=self.dtype)
        single = x.ndim == 4
        if single:
            x = x[None]
        expected = (self.spec.timesteps,) + tuple(self.spec.input_shape)
        if x.ndim != 5 or x.shape[1:] != expected:
            raise ValueError(f"frames shape {x.shape[1:] if x.ndim == 5 else x.shape} != expected {expected}")
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4)), single

    def run(self, frames, mode: str = "infer_hard", record: bool = False, relax: bool = False,
            weights_q: dict[int, np.ndarray] | None = None):
        """Return the voted output sequence ``(T, B, N)`` and, if recorded, the tape.

        ``weights_q`` supplies precomputed effective weights by layer index.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        a, _ = self._batch(frames)
        T, B = a.shape[:2]
        tape = ActivationTape(mode, relax, B) if record else None
        neuron, sur = self.spec.neuron, self.spec.surrogate
        for i, layer in enumerate(self.spec.layers):
            if layer.kind in SYNAPTIC:
                syn = self.synaptic[i]
                if weights_q is not None and i in weights_q:
                    wq = weights_q[i]
                else:
                    wq = np.asarray(syn.effective_weight(mode), dtype=self.dtype)
                flat = a.reshape((T * B,) + a.shape[2:])
                if layer.kind == "conv2d":
                    y = conv_forward(flat, wq, layer.same_padding)
                else:
                    y = flat.reshape(T * B, -1) @ wq.T
                if record:
                    tape.inputs[i] = a
                    tape.weights[i] = syn.weight.copy()
                    tape.weights_q[i] = wq
                    if syn.quant is not None:
                        tape.quant_states[i] = replace(syn.quant.state)
                a = y.reshape((T, B) + y.shape[1:])
            elif layer.kind == "lif":
                a, lt = lif_sequence(a, neuron, relax=sur if relax else None)
                if record:
                    tape.lif[i] = lt
            elif layer.kind == "maxpool2":
                y, idx = maxpool_forward(a.reshape((T * B,) + a.shape[2:]))
                if record:
                    tape.inputs[i] = a
                    tape.argmax[i] = idx
                a = y.reshape((T, B) + y.shape[1:])
            else:
                a = a.reshape(T, B, -1, layer.window).mean(axis=-1)
        if record:
            tape.voted = a
        return a, tape

    def forward(self, frames, mode: str = "infer_hard", relax: bool = False):
        """Class rates (mean voted output over time) and the activation tape.

        The tape is recorded only in ``train_soft`` mode.
        """
        single = np.asarray(frames).ndim == 4
        voted, tape = self.run(frames, mode, record=(mode == "train_soft"), relax=relax)
        rates = voted.mean(axis=0)
        return (rates[0] if single else rates), tape

    def backward(self, tape: ActivationTape, labels) -> Gradients:
        if tape is None or tape.voted is None:
            raise ValueError("backward needs a tape recorded by a train_soft forward pass")
        for i, syn in self.synaptic.items():
            if i not in tape.weights or not np.array_equal(tape.weights[i], syn.weight):
                raise ValueError(f"tape does not match current weights of layer {i}")
        labels = np.atleast_1d(np.asarray(labels))
        if labels.shape[0] != tape.batch:
            raise ValueError(f"{labels.shape[0]} labels for a batch of {tape.batch}")
        d = mse_loss_grad(tape.voted, labels, self.n_classes)
        return self._backprop(tape, d)

    def _backprop(self, tape: ActivationTape, d) -> Gradients:
        neuron, sur = self.spec.neuron, self.spec.surrogate
        T, B = d.shape[:2]
        grads = []
        first_syn = min(self.synaptic)
        for i in range(len(self.spec.layers) - 1, -1, -1):
            layer = self.spec.layers[i]
            if layer.kind == "voting_avgpool":
                prev = self.shapes[i - 1] if i else self.spec.input_shape
                d = np.repeat(d / layer.window, layer.window, axis=-1).reshape((T, B) + tuple(prev))
            elif layer.kind == "lif":
                d = lif_backward(d, tape.lif[i], neuron, sur)
            elif layer.kind == "maxpool2":
                x = tape.inputs[i]
                flat_shape = (T * B,) + x.shape[2:]
                dx = maxpool_backward(d.reshape((T * B,) + d.shape[2:]), tape.argmax[i], flat_shape)
                d = dx.reshape(x.shape)
            else:
                x = tape.inputs[i]
                wq = tape.weights_q[i]
                need_dx = i != first_syn
                dflat = d.reshape((T * B,) + d.shape[2:])
                xflat = x.reshape((T * B,) + x.shape[2:])
                if layer.kind == "conv2d":
                    dx, dwq = conv_backward(dflat, xflat, wq, layer.same_padding, need_dx)
                else:
                    x2 = xflat.reshape(T * B, -1)
                    dwq = dflat.T @ x2
                    dx = (dflat @ wq).reshape(xflat.shape) if need_dx else None
                grads.append(self._chain_quant(i, dwq, tape))
                if not need_dx:
                    break
                d = dx.reshape(x.shape)
        grads.reverse()
        return Gradients(grads)

    def _chain_quant(self, i, dwq, tape) -> LayerGrad:
        syn = self.synaptic[i]
        if syn.quant is None:
            return LayerGrad(i, dwq)
        st = tape.quant_states[i]
        if tape.mode != "train_soft":
            raise ValueError("quantized layers need a train_soft tape for gradients")
        dq_dw, dq_da, dq_db = qz.quantize_soft_grads(tape.weights[i], syn.quant.spec, st)
        return LayerGrad(
            i,
            dwq * dq_dw,
            float(np.sum(dwq * dq_da, dtype=np.float64)),
            float(np.sum(dwq * dq_db, dtype=np.float64)),
        )

    def loss(self, frames, labels, mode: str = "train_soft", relax: bool = False) -> float:
        voted, _ = self.run(frames, mode, record=False, relax=relax)
        return mse_loss(voted, labels, self.n_classes)

    def predict(self, frames):
        rates, _ = self.forward(frames, "infer_hard")
        return predict_from_rates(rates)


def predict_from_rates(rates):
    """Argmax with ties broken toward the lowest class index."""
    rates = np.asarray(rates)
    idx = np.argmax(rates, axis=-1)
    return int(idx) if rates.ndim == 1 else idx


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    rng = np.random.default_rng(seed)
    shapes = layer_shapes(spec)
    prev = tuple(spec.input_shape)
    layers = []
    for i, (layer, shape) in enumerate(zip(spec.layers, shapes)):
        if layer.kind == "conv2d":
            wshape = (layer.out_channels, prev[0], layer.kernel, layer.kernel)
        elif layer.kind == "dense":
            wshape = (layer.out_features, int(np.prod(prev)))
        else:
            prev = shape
            continue
        fan_in = int(np.prod(wshape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=wshape).astype(dtype)
        quant = None if spec.bits == 32 else qz.make_quantizer(spec.bits, w)
        layers.append(SynapticLayer(i, layer, w, quant))
        prev = shape
    return Network(spec, layers, dtype)


def one_hot(labels, n_classes: int):
    labels = np.atleast_1d(np.asarray(labels))
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes: {labels}")
    return np.eye(n_classes)[labels]


def mse_loss(spikes_voted, label, n_classes: int) -> float:
    """Mean over time and classes of (S(t,n) - y(t,n))^2 with a one-hot target.

    Accepts a single ``(T, N)`` sequence with an integer label, or a
    time-major batch ``(T, B, N)`` with one label per sample (batch-mean).
    """
    s = np.asarray(spikes_voted, dtype=np.float64)
    if s.shape[-1] != n_classes:
        raise ValueError(f"last axis {s.shape[-1]} != n_classes {n_classes}")
    if s.ndim == 2:
        y = one_hot(label, n_classes)[0]
        return float(np.mean((s - y) ** 2))
    y = one_hot(label, n_classes)
    if y.shape[0] != s.shape[1]:
        raise ValueError("one label per batch sample required")
    return float(np.mean((s - y[None]) ** 2))


def mse_loss_grad(spikes_voted, labels, n_classes: int):
    s = np.asarray(spikes_voted)
    y = one_hot(labels, n_classes).astype(s.dtype)
    return (2.0 / s.size) * (s - y[None])


def clone_network(net: Network, dtype=None) -> Network:
    """Deep copy, optionally cast to another float dtype."""
    dtype = np.dtype(dtype or net.dtype)
    layers = []
    for syn in net.synaptic_layers:
        quant = None
        if syn.quant is not None:
            quant = qz.Quantizer(syn.quant.spec, replace(syn.quant.state), syn.quant.bits)
        layers.append(SynapticLayer(syn.index, syn.spec, syn.weight.astype(dtype, copy=True), quant))
    return Network(net.spec, layers, dtype)
