"""Weight quantizer built from a weighted sum of unit steps.

At inference the quantizer is a staircase of Heaviside steps; during training
each step is replaced by a temperature-scaled sigmoid so the mapping stays
differentiable in the weight and in both scale factors.

    hard:  Wq = alpha * (sum_i s_i * H(beta*w - b_i) - o)
    soft:  Wq = alpha * (sum_i s_i * sigmoid(T * (beta*w - b_i)) - o)

All functions accept scalars or numpy arrays for ``w``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SUPPORTED_BITS = (1, 2, 4, 8)

# |z| beyond this saturates the sigmoid to exactly 0 or 1
_SATURATE = 500.0
# elements per (weight, border) block in the soft quantizer
_CHUNK = 1 << 20


@dataclass(frozen=True)
class QuantLevels:
    """Strictly increasing, zero-symmetric set of quantization targets."""

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) < 2:
            raise ValueError("need at least 2 quantization levels")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"levels must be strictly increasing: {vals}")

    @property
    def is_symmetric(self) -> bool:
        return all(a == -b for a, b in zip(self.values, reversed(self.values)))

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class QuantSpec:
    levels: QuantLevels
    steps: tuple[float, ...]
    borders: tuple[float, ...]
    offset: float

    def __post_init__(self):
        if len(self.steps) != len(self.borders) or len(self.steps) != len(self.levels) - 1:
            raise ValueError("steps/borders must have one entry per level gap")
        if any(s <= 0 for s in self.steps):
            raise ValueError("all step sizes must be positive")
        q = self.levels.values
        for i, b in enumerate(self.borders):
            if not q[i] < b < q[i + 1]:
                raise ValueError(f"border {b} not strictly between {q[i]} and {q[i + 1]}")

    @property
    def n(self) -> int:
        return len(self.steps)


@dataclass
class LayerQuantState:
    """Learned output/input scale factors plus the current temperature."""

    alpha: float = 1.0
    beta: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.temperature > 0):
            raise ValueError(
                f"alpha, beta and temperature must be positive, got "
                f"{self.alpha}, {self.beta}, {self.temperature}"
            )


@dataclass
class Quantizer:
    """Per-layer attachment: fixed level geometry plus learned state."""

    spec: QuantSpec
    state: LayerQuantState = field(default_factory=LayerQuantState)
    bits: int | None = None


def uniform_levels(bits: int) -> QuantLevels:
    if bits == 1:
        return QuantLevels((-1.0, 1.0))
    if bits in (2, 4, 8):
        top = 2 ** (bits - 1) - 1
        return QuantLevels(tuple(float(v) for v in range(-top, top + 1)))
    raise ValueError(f"unsupported bit width {bits}; supported widths are {SUPPORTED_BITS}")


def derive_spec(levels: QuantLevels) -> QuantSpec:
    if not levels.is_symmetric:
        raise ValueError(
            f"levels {levels.values} are not symmetric about zero; "
            "the centering offset only applies to symmetric level sets"
        )
    q = levels.values
    steps = tuple(b - a for a, b in zip(q, q[1:]))
    borders = tuple((a + b) / 2 for a, b in zip(q, q[1:]))
    return QuantSpec(levels, steps, borders, 0.5 * sum(steps))


def make_quantizer(bits: int, weights=None) -> Quantizer:
    levels = uniform_levels(bits)
    state = LayerQuantState()
    if weights is not None:
        a, b = init_scales(weights, levels)
        state = LayerQuantState(alpha=a, beta=b)
    return Quantizer(derive_spec(levels), state, bits)


def sigmoid(z):
    """Two-branch logistic; exact 0/1 beyond |z| > 500."""
    z = np.asarray(z, dtype=np.result_type(z, np.float32))
    e = np.exp(-np.abs(np.clip(z, -_SATURATE, _SATURATE)))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    out = np.where(z > _SATURATE, 1.0, out)
    out = np.where(z < -_SATURATE, 0.0, out)
    return out.astype(z.dtype)


def sigmoid_prime(z):
    # sigma(z) * sigma(-z) keeps full relative precision in both tails
    return sigmoid(z) * sigmoid(-z)


def _as_float(w):
    w = np.asarray(w)
    if not np.issubdtype(w.dtype, np.floating):
        w = w.astype(np.float64)
    return w


def _scalar_or_array(x):
    return x.item() if isinstance(x, np.ndarray) and x.ndim == 0 else x


def step_sum(w, spec: QuantSpec, beta: float):
    """sum_i s_i * H(beta*w - b_i), with H(0) = 1."""
    w = _as_float(w)
    bw = w * w.dtype.type(beta)
    acc = np.zeros_like(bw)
    for s, b in zip(spec.steps, spec.borders):
        acc += w.dtype.type(s) * (bw >= b)
    return acc


def quantize_step(w, spec: QuantSpec, st: LayerQuantState):
    w = _as_float(w)
    ty = w.dtype.type
    out = ty(st.alpha) * (step_sum(w, spec, st.beta) - ty(spec.offset))
    return _scalar_or_array(out)


def level_indices(w, spec: QuantSpec, beta: float) -> np.ndarray:
    """Index k of the level that ``quantize_step`` selects for each weight."""
    w = _as_float(w)
    bw = w * w.dtype.type(beta)
    borders = np.asarray(spec.borders, dtype=w.dtype)
    return np.searchsorted(borders, bw, side="right")


def _soft_terms(w, spec: QuantSpec, st: LayerQuantState):
    w = _as_float(w)
    ty = w.dtype.type
    steps = np.asarray(spec.steps, dtype=w.dtype)
    borders = np.asarray(spec.borders, dtype=w.dtype)
    flat = w.reshape(-1) * ty(st.beta)
    T = ty(st.temperature)
    value = np.empty_like(flat)
    slope = np.empty_like(flat)
    # broadcast over borders in bounded chunks; each row sums in the same order
    chunk = max(1, _CHUNK // len(borders))
    for i in range(0, flat.size, chunk):
        z = T * (flat[i:i + chunk, None] - borders)
        sig = sigmoid(z)
        value[i:i + chunk] = np.sum(steps * sig, axis=-1)
        slope[i:i + chunk] = np.sum(steps * sig * sigmoid(-z), axis=-1)
    return w, value.reshape(w.shape) - ty(spec.offset), slope.reshape(w.shape)


def quantize_soft(w, spec: QuantSpec, st: LayerQuantState):
    w, centered, _ = _soft_terms(w, spec, st)
    return _scalar_or_array(w.dtype.type(st.alpha) * centered)


def quantize_soft_grads(w, spec: QuantSpec, st: LayerQuantState):
    """Partial derivatives of ``quantize_soft`` w.r.t. (w, alpha, beta).

    With sigma_i = sigmoid(T*(beta*w - b_i)) and S' = sum_i s_i sigma_i (1 - sigma_i):

        dWq/dw     = alpha * T * beta * S'
        dWq/dalpha = Wq / alpha
        dWq/dbeta  = alpha * T * w * S'
    """
    w, centered, slope = _soft_terms(w, spec, st)
    ty = w.dtype.type
    aT = ty(st.alpha) * ty(st.temperature)
    d_w = aT * ty(st.beta) * slope
    d_alpha = centered
    d_beta = aT * w * slope
    return tuple(_scalar_or_array(x) for x in (d_w, d_alpha, d_beta))


def temperature_at(epoch: int, t0: float = 1.0, rate: float = 2.0) -> float:
    """Linear annealing schedule ``t0 + rate * epoch``.

    ``t0 == 0`` selects the proportional schedule ``rate * epoch`` whose first
    epoch would otherwise have zero temperature; it is clamped up to ``rate``.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    temp = t0 + rate * epoch
    if t0 == 0:
        temp = max(temp, rate)
    if not temp > 0:
        raise ValueError(
            f"temperature must be positive (t0={t0}, rate={rate}, epoch={epoch})"
        )
    return float(temp)


def init_scales(weights, levels: QuantLevels) -> tuple[float, float]:
    """(alpha0, beta0) mapping the current weight range onto the level range."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot initialise scales from an empty weight collection")
    peak = float(np.max(np.abs(w)))
    if peak == 0.0:
        return 1.0, 1.0
    beta0 = levels.values[-1] / peak
    return 1.0 / beta0, beta0
