"""Leaky integrate-and-fire dynamics with hard reset and a boxcar-plus-leak surrogate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LifParams:
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not self.v_threshold > self.v_reset:
            raise ValueError("v_threshold must exceed v_reset")


@dataclass(frozen=True)
class SurrogateParams:
    """Piecewise leaky ReLU derivative: 1/(2w) inside |u| <= w, ``leak`` outside."""

    half_width: float = 1.0
    leak: float = 0.01

    def __post_init__(self):
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        if self.leak < 0:
            raise ValueError("leak must be non-negative")
        if not self.leak < 1 / (2 * self.half_width):
            raise ValueError("leak must be below the in-window slope 1/(2*half_width)")


@dataclass
class LifTape:
    """Per-timestep records, each of shape (T, *grid)."""

    h: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def steps(self) -> int:
        return self.h.shape[0]


def lif_charge(v_prev, x, p: LifParams):
    v_prev = np.asarray(v_prev)
    x = np.asarray(x)
    if v_prev.shape != x.shape:
        raise ValueError(f"shape mismatch: potential {v_prev.shape} vs input {x.shape}")
    return v_prev + (x - (v_prev - p.v_reset)) / p.tau


def fire(h, p: LifParams):
    h = np.asarray(h)
    return (h >= p.v_threshold).astype(h.dtype if np.issubdtype(h.dtype, np.floating) else np.float64)


def reset(h, s, p: LifParams):
    return h * (1 - s) + p.v_reset * s


def surrogate_grad(u, sp: SurrogateParams):
    u = np.asarray(u)
    inside = np.abs(u) <= sp.half_width
    return np.where(inside, 1.0 / (2 * sp.half_width), sp.leak).astype(
        u.dtype if np.issubdtype(u.dtype, np.floating) else np.float64
    )


def surrogate_spike(u, sp: SurrogateParams):
    """Antiderivative of ``surrogate_grad``: a continuous stand-in for the step.

    Used only for gradient checking, where the loss must be differentiable
    in the same sense as the backward pass.
    """
    u = np.asarray(u)
    w, c = sp.half_width, sp.leak
    return np.where(
        u < -w, c * (u + w), np.where(u > w, 1 + c * (u - w), (u + w) / (2 * w))
    ).astype(u.dtype)


def surrogate_region(u, sp: SurrogateParams) -> np.ndarray:
    """-1 below the window, 0 inside, +1 above; kinks of the relaxed spike sit between."""
    u = np.asarray(u)
    return np.sign(u) * (np.abs(u) > sp.half_width)


def lif_sequence(x_seq, p: LifParams, v0=None, relax: SurrogateParams | None = None):
    """Run charge -> fire -> reset over the leading (time) axis of ``x_seq``.

    Returns the spike sequence and the full tape. With ``relax`` set, spikes
    are the continuous ``surrogate_spike`` of the overshoot instead of a step.
    """
    x_seq = np.asarray(x_seq)
    if x_seq.ndim < 1 or x_seq.shape[0] < 1:
        raise ValueError("need at least one timestep")
    grid = x_seq.shape[1:]
    if v0 is None:
        v = np.full(grid, p.v_reset, dtype=x_seq.dtype)
    else:
        v = np.asarray(v0, dtype=x_seq.dtype)
        if v.shape != grid:
            raise ValueError(f"v0 shape {v.shape} does not match input grid {grid}")
    h_all = np.empty_like(x_seq)
    s_all = np.empty_like(x_seq)
    v_all = np.empty_like(x_seq)
    for t in range(x_seq.shape[0]):
        h = lif_charge(v, x_seq[t], p)
        if relax is None:
            s = fire(h, p)
        else:
            s = surrogate_spike(h - p.v_threshold, relax)
        v = reset(h, s, p)
        h_all[t], s_all[t], v_all[t] = h, s, v
    return s_all, LifTape(h_all, s_all, v_all)


def input_gain(p: LifParams) -> float:
    """dH(t)/dX(t) for the charge rule."""
    return 1.0 / p.tau


def lif_backward(ds_seq, tape: LifTape, p: LifParams, sp: SurrogateParams):
    """Backpropagate dL/dS(t) through the recursion, returning dL/dX(t).

    Credit flows through V(t) -> H(t+1) as well as through the reset's
    dependence on S(t), so every timestep sees gradient from its future.
    """
    ds_seq = np.asarray(ds_seq)
    if ds_seq.shape != tape.h.shape:
        raise ValueError(f"gradient shape {ds_seq.shape} does not match tape {tape.h.shape}")
    decay = 1.0 - 1.0 / p.tau
    gain = input_gain(p)
    dx = np.empty_like(ds_seq)
    dv = np.zeros(ds_seq.shape[1:], dtype=ds_seq.dtype)
    for t in range(ds_seq.shape[0] - 1, -1, -1):
        h, s = tape.h[t], tape.s[t]
        g = surrogate_grad(h - p.v_threshold, sp)
        dh = dv * (1 - s) + (ds_seq[t] + dv * (p.v_reset - h)) * g
        dx[t] = dh * gain
        dv = dh * decay
    return dx
