"""Uniform quantizer with a learnable interval and element-wise gradient scaling.

Forward path for one weight or activation tensor ``x``::

    x_n = clip((x - l) / (u - l), 0, 1)            # latent values
    x_q = round((2**b - 1) * x_n) / (2**b - 1)      # discrete values
    Q(x) = 2 * (x_q - 0.5)  (weights)  |  x_q  (activations)

The round step is non-differentiable; its backward pass is replaced by the
EWGS rule ``g_xn = g_xq * (1 + delta * sign(g_xq) * (x_n - x_q))``, which
reduces to the straight-through estimator when ``delta == 0``.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

#: Bit-width sentinel that bypasses the quantizer (the "32" in W/32, 32/A).
FULL_PRECISION = 32

#: Minimum interval width kept after each optimizer step.
MIN_INTERVAL = 1e-6

_HALF_WAVE_STD = math.sqrt(1.0 - 2.0 / math.pi)


class Mode(str, enum.Enum):
    WEIGHT = "weight"
    ACTIVATION = "activation"


def levels(bits: int) -> int:
    """Number of steps on the discrete grid, ``2**bits - 1``."""
    if bits < 1:
        raise ValueError(f"bit-width must be >= 1, got {bits}")
    return (1 << bits) - 1


def round_half_away(a: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    mag = np.abs(a)
    fl = np.floor(mag)
    return np.copysign(fl + (mag - fl >= 0.5), a).astype(a.dtype, copy=False)


# ---------------------------------------------------------------------------
# array-level pieces


def normalize_clip(x: np.ndarray, l: float, u: float) -> np.ndarray:
    if not u > l:
        raise ValueError(f"quantization interval requires u > l, got l={l}, u={u}")
    x = np.asarray(x)
    l, u = x.dtype.type(l), x.dtype.type(u)
    return np.clip((x - l) / (u - l), 0, 1)


def normalize_clip_backward(g_xn: np.ndarray, x: np.ndarray, l: float, u: float) -> tuple[np.ndarray, float, float]:
    """Gradients of the normalize/clip step w.r.t. ``x``, ``l`` and ``u``.

    Only elements strictly inside ``(l, u)`` contribute; clipped elements get
    zero for all three partials.
    """
    g_xn, x = np.asarray(g_xn), np.asarray(x)
    if g_xn.shape != x.shape:
        raise ValueError(f"gradient shape {g_xn.shape} does not match input {x.shape}")
    if not u > l:
        raise ValueError(f"quantization interval requires u > l, got l={l}, u={u}")
    inside = (x > l) & (x < u)
    width = x.dtype.type(u) - x.dtype.type(l)
    g_x = np.where(inside, g_xn / width, 0).astype(x.dtype, copy=False)
    g = np.where(inside, g_xn, 0).astype(np.float64)
    x64 = x.astype(np.float64)
    w64 = float(u) - float(l)
    g_l = float(np.sum(g * (x64 - u)) / (w64 * w64))
    g_u = float(-np.sum(g * (x64 - l)) / (w64 * w64))
    return g_x, g_l, g_u


def discretize(x_n: np.ndarray, bits: int) -> np.ndarray:
    x_n = np.asarray(x_n)
    k = x_n.dtype.type(levels(bits))
    return round_half_away(k * x_n) / k


def dequantize(x_q: np.ndarray, mode: Mode) -> np.ndarray:
    x_q = np.asarray(x_q)
    if Mode(mode) is Mode.WEIGHT:
        return (x_q - x_q.dtype.type(0.5)) * x_q.dtype.type(2)
    return x_q


def ewgs_backward(g_xq: np.ndarray, x_n: np.ndarray, x_q: np.ndarray, delta: float) -> np.ndarray:
    """Element-wise gradient scaling across the round step."""
    if delta < 0:
        raise ValueError(f"EWGS scaling factor must be non-negative, got {delta}")
    g_xq = np.asarray(g_xq)
    if not (g_xq.shape == np.shape(x_n) == np.shape(x_q)):
        raise ValueError(f"shape mismatch: g_xq {g_xq.shape}, x_n {np.shape(x_n)}, x_q {np.shape(x_q)}")
    if delta == 0:
        return g_xq.copy()
    return g_xq * (1 + delta * np.sign(g_xq) * (x_n - x_q))


def ste_backward(g_xq: np.ndarray, x_n: np.ndarray, x_q: np.ndarray, delta: float) -> np.ndarray:
    """Straight-through rule: the gradient crosses the round step unchanged."""
    return np.array(g_xq, copy=True)


def ewgs_multiplier(g_xq: np.ndarray, x_n: np.ndarray, x_q: np.ndarray, delta: float) -> np.ndarray:
    return 1 + delta * np.sign(g_xq) * (x_n - x_q)


# ---------------------------------------------------------------------------
# initialization


def init_bounds_first_batch(x: np.ndarray, mode: Mode) -> tuple[float, float]:
    """Interval covering ~99% of ``x``: +-3 sigma for weights, [0, 3 sigma / sqrt(1 - 2/pi)] for activations."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot initialize quantizer bounds from an empty tensor")
    sigma = float(np.std(x))
    if sigma == 0.0:
        raise ValueError("quantizer input has zero standard deviation; refusing to initialize (dead layer or bad data?)")
    if Mode(mode) is Mode.WEIGHT:
        return -3.0 * sigma, 3.0 * sigma
    return 0.0, 3.0 * sigma / _HALF_WAVE_STD


def init_alpha(o: np.ndarray, o_q: np.ndarray) -> float:
    o, o_q = np.asarray(o), np.asarray(o_q)
    if o.shape != o_q.shape:
        raise ValueError(f"output shapes differ: {o.shape} vs {o_q.shape}")
    denom = float(np.mean(np.abs(o_q), dtype=np.float64))
    if denom == 0.0:
        logger.warning("quantized output is all zeros at initialization; using alpha = 1")
        return 1.0
    return float(np.mean(np.abs(o), dtype=np.float64)) / denom


# ---------------------------------------------------------------------------
# quantizer state and the taped forward


GradRule = Callable[[np.ndarray, np.ndarray, np.ndarray, float], np.ndarray]


@dataclass(eq=False)
class QuantizerParams:
    """State of one weight or activation quantizer.

    ``l`` and ``u`` are learnable scalar tensors; ``delta`` is set by the
    scaling-factor schedule, never by the optimizer.  ``grad_rule`` decides
    how gradients cross the round step (EWGS by default).
    """

    bits: int
    mode: Mode
    delta: float = 0.0
    l: Tensor = field(default_factory=lambda: Tensor(0.0, requires_grad=True))
    u: Tensor = field(default_factory=lambda: Tensor(1.0, requires_grad=True))
    initialized: bool = False
    grad_rule: GradRule = ewgs_backward
    negative_multipliers: int = 0
    name: str = ""

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.bits != FULL_PRECISION:
            levels(self.bits)

    @property
    def enabled(self) -> bool:
        return self.bits != FULL_PRECISION

    def set_bounds(self, l: float, u: float) -> None:
        self.l.data[...] = l
        self.u.data[...] = u
        self.initialized = True

    def enforce_interval(self) -> None:
        lo, hi = float(self.l.data), float(self.u.data)
        if hi - lo < MIN_INTERVAL:
            self.u.data[...] = lo + MIN_INTERVAL

    def set_delta(self, delta: float) -> None:
        if not delta >= 0:
            raise ValueError(f"scaling factor must be non-negative, got {delta}")
        self.delta = float(delta)


def _normalize_clip_op(x: Tensor, l: Tensor, u: Tensor) -> Tensor:
    lo, hi = float(l.data), float(u.data)
    out = normalize_clip(x.data, lo, hi)

    def rule(g, saved):
        (xv,) = saved
        g_x, g_l, g_u = normalize_clip_backward(g, xv, lo, hi)
        return g_x, np.asarray(g_l), np.asarray(g_u)

    return ad.record("normalize_clip", (x, l, u), out, rule, saved=(x.data,))


def quantize_forward(
    x: Tensor,
    params: QuantizerParams,
    override: Optional[Tensor] = None,
    capture: Optional[dict] = None,
) -> Tensor:
    """Quantize ``x`` on the tape.

    ``override`` replaces the discrete values ``x_q`` (used to re-evaluate the
    rest of the network at perturbed ``x_q``); ``capture`` receives the
    computed ``x_q`` array under ``params.name``.
    """
    if not params.enabled:
        return x
    if not params.initialized:
        raise RuntimeError(f"quantizer {params.name or params.mode.value} used before initialization")
    if override is not None:
        if override.shape != x.shape:
            raise ad.ShapeError(f"x_q override shape {override.shape} does not match input {x.shape}")
        x_q = override
    else:
        x_n = _normalize_clip_op(x, params.l, params.u)
        bits, delta, grad_rule = params.bits, params.delta, params.grad_rule

        def rule(g, saved):
            xn, xq = saved
            if delta > 0:
                params.negative_multipliers += int(np.count_nonzero(ewgs_multiplier(g, xn, xq, delta) < 0))
            return grad_rule(g, xn, xq, delta)

        x_q = ad.custom_unary(
            x_n,
            lambda a: discretize(a, bits),
            rule,
            saved=(x_n.data, lambda out: out),
            op="round_ewgs",
        )
    if capture is not None:
        capture[params.name] = x_q.data.copy()
    if params.mode is Mode.WEIGHT:
        return (x_q - 0.5) * 2.0
    return x_q


def quantize_values(x: np.ndarray, params: QuantizerParams) -> np.ndarray:
    """Forward-only quantization of a plain array."""
    if not params.enabled:
        return np.asarray(x)
    x_n = normalize_clip(x, float(params.l.data), float(params.u.data))
    return dequantize(discretize(x_n, params.bits), params.mode)
