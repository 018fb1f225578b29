"""Quantization-aware training loop, optimizer, schedules and gradient checking."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .network import Network, clone_network, mse_loss
from .neuron import LifParams, SurrogateParams
from .quantizer import quantize_soft, temperature_at

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-6
HISTORY_COLUMNS = ("epoch", "lr", "temperature", "train_loss", "train_acc", "test_acc")


@dataclass
class TrainConfig:
    epochs: int = 500
    lr0: float = 1e-3
    t_max: int = 64
    batch_size: int = 16
    seed: int = 0
    bits: int = 32
    t0: float = 1.0
    rate: float = 2.0
    half_width: float = 1.0
    leak: float = 0.01
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr0 >= 0:
            raise ValueError("lr0 must be non-negative")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def neuron(self) -> LifParams:
        return LifParams(self.tau, self.v_threshold, self.v_reset)

    @property
    def surrogate(self) -> SurrogateParams:
        return SurrogateParams(self.half_width, self.leak)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    temperature: float
    train_loss: float
    train_acc: float
    test_acc: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> EpochRecord:
        return self.records[i]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()


def cosine_lr(epoch: int, lr0: float, t_max: int) -> float:
    """Single-cycle cosine annealing to zero; held at zero after ``t_max``."""
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    e = min(epoch, t_max)
    return 0.5 * lr0 * (1 + math.cos(math.pi * e / t_max))


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> dict[str, np.ndarray]:
    """Bias-corrected Adam. Returns new parameter arrays; ``state`` is updated in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.asarray(p).dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def network_params(net: Network) -> dict[str, np.ndarray]:
    params = {}
    for syn in net.synaptic_layers:
        params[f"layer{syn.index}.W"] = syn.weight
        if syn.quant is not None:
            params[f"layer{syn.index}.alpha"] = np.float64(syn.quant.state.alpha)
            params[f"layer{syn.index}.beta"] = np.float64(syn.quant.state.beta)
    return params


def gradient_dict(grads) -> dict[str, np.ndarray]:
    out = {}
    for g in grads:
        out[f"layer{g.index}.W"] = g.dW
        if g.dalpha is not None:
            out[f"layer{g.index}.alpha"] = np.float64(g.dalpha)
            out[f"layer{g.index}.beta"] = np.float64(g.dbeta)
    return out


def load_params(net: Network, params: dict[str, np.ndarray]) -> None:
    """Write parameters back into the network, clamping scales to stay positive."""
    for syn in net.synaptic_layers:
        syn.weight = np.asarray(params[f"layer{syn.index}.W"], dtype=net.dtype)
        if syn.quant is not None:
            syn.quant.state.alpha = max(float(params[f"layer{syn.index}.alpha"]), SCALE_FLOOR)
            syn.quant.state.beta = max(float(params[f"layer{syn.index}.beta"]), SCALE_FLOOR)


def evaluate(net: Network, dataset, batch_size: int = 64) -> float:
    X, y = dataset
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(y), batch_size):
        pred = net.predict(X[start:start + batch_size])
        correct += int(np.sum(pred == y[start:start + batch_size]))
    return correct / len(y)


def train(net: Network, train_set, test_set, cfg: TrainConfig, progress=None) -> TrainHistory:
    """Run QAT: soft quantizer forward, surrogate BPTT, Adam on W, alpha, beta.

    ``train_set``/``test_set`` are ``(X[B, T, 2, H, W], y[B])`` arrays. After
    each epoch both splits are scored with the hard quantizer.
    """
    X, y = train_set
    if len(y) == 0 or len(test_set[1]) == 0:
        raise ValueError("training and test sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        temp = temperature_at(epoch, cfg.t0, cfg.rate)
        lr = cosine_lr(epoch, cfg.lr0, cfg.t_max)
        net.set_temperature(temp)
        order = rng.permutation(len(y))
        losses = []
        for b, start in enumerate(range(0, len(y), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            _, tape = net.forward(X[idx], "train_soft")
            loss = mse_loss(tape.voted, y[idx], net.n_classes)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = net.backward(tape, y[idx])
            try:
                new = adam_step(network_params(net), gradient_dict(grads), adam, lr)
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch}, batch {b}: {exc}") from exc
            load_params(net, new)
            losses.append(loss * len(idx))
        rec = EpochRecord(
            epoch=epoch,
            lr=lr,
            temperature=temp,
            train_loss=float(np.sum(losses) / len(y)),
            train_acc=evaluate(net, train_set),
            test_acc=evaluate(net, test_set),
        )
        history.append(rec)
        log.info("epoch %d lr=%.3g T=%g loss=%.4f train=%.3f test=%.3f",
                 epoch, lr, temp, rec.train_loss, rec.train_acc, rec.test_acc)
        if progress is not None:
            progress(rec)
    return history


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_coordinate: tuple[str, int] | None
    flip_fraction: float
    n_checked: int
    n_flipped: int
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_err:.3e} worst={self.worst_coordinate} "
                f"flip_fraction={self.flip_fraction:.4f} ({self.n_flipped}/{self.n_checked})")


def _loss_and_regions(net: Network, frames, label, relax: bool, weights_q=None):
    voted, tape = net.run(frames, "train_soft", record=True, relax=relax, weights_q=weights_q)
    return mse_loss(voted, np.atleast_1d(label), net.n_classes), tape.regions(net.spec.surrogate, net.spec.neuron)


def _same_regions(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(net: Network, sample, h: float = 1e-5, threshold: float = 1e-3,
              atol: float = 1e-7, relax: bool = True) -> GradcheckReport:
    """Compare BPTT gradients of W, alpha, beta against central differences.

    Runs on a float64 copy of ``net``. With ``relax`` the step nonlinearity
    is replaced by the antiderivative of the surrogate so the loss is
    differentiable exactly where the backward pass claims. Coordinates whose
    +/-h perturbation changes a surrogate region or a max-pool winner sit on
    a kink; they are counted in ``flip_fraction`` and excluded from the
    error. Relative error is ``|a - f| / max(|a|, |f|, atol)``.
    """
    if not h > 0:
        raise ValueError(f"invalid step h={h}; must be positive")
    net = clone_network(net, np.float64)
    frames, label = sample
    frames = np.asarray(frames, dtype=np.float64)
    voted, tape = net.run(frames, "train_soft", record=True, relax=relax)
    base = tape.regions(net.spec.surrogate, net.spec.neuron)
    analytic = gradient_dict(net.backward(tape, np.atleast_1d(label)))

    worst, worst_err = None, 0.0
    checked = flipped = 0

    wq_base = {syn.index: syn.effective_weight("train_soft") for syn in net.synaptic_layers}

    def probe(name, k, get, put, layer=None):
        # ``layer`` set: only weight k of that layer moves, so patch its
        # effective weight instead of re-quantizing the whole network
        nonlocal worst, worst_err, checked, flipped
        x0 = get()
        evals = []
        for x in (x0 + h, x0 - h):
            put(x)
            override = None
            if layer is not None:
                wq = wq_base[layer.index].copy().reshape(-1)
                wq[k] = x if layer.quant is None else quantize_soft(x, layer.quant.spec, layer.quant.state)
                override = {**wq_base, layer.index: wq.reshape(layer.weight.shape)}
            evals.append(_loss_and_regions(net, frames, label, relax, override))
        put(x0)
        (lp, rp), (lm, rm) = evals
        checked += 1
        if not (_same_regions(rp, base) and _same_regions(rm, base)):
            flipped += 1
            return
        fd = (lp - lm) / (2 * h)
        a = float(np.ravel(analytic[name])[k])
        err = abs(a - fd) / max(abs(a), abs(fd), atol)
        if err > worst_err or worst is None:
            worst, worst_err = (name, k), err

    for syn in net.synaptic_layers:
        w = syn.weight.reshape(-1)
        name = f"layer{syn.index}.W"
        for k in range(w.size):
            probe(name, k, lambda: w[k], lambda v: w.__setitem__(k, v), syn)
        if syn.quant is not None:
            st = syn.quant.state
            probe(f"layer{syn.index}.alpha", 0, lambda: st.alpha, lambda v: setattr(st, "alpha", v))
            probe(f"layer{syn.index}.beta", 0, lambda: st.beta, lambda v: setattr(st, "beta", v))

    return GradcheckReport(
        max_rel_err=worst_err,
        worst_coordinate=worst,
        flip_fraction=flipped / max(checked, 1),
        n_checked=checked,
        n_flipped=flipped,
        threshold=threshold,
    )
