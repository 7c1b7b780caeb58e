"""Adaptive EWGS scaling factors from Hessian traces.

For each quantizer the scaling factor is ``max(0, (Tr(H)/N) / G)`` where ``H``
is the Hessian of the loss w.r.t. the quantizer's discrete values ``x_q``,
``N`` the number of those values and ``G`` a representative magnitude of the
gradient ``dL/dx_q``.  ``Tr(H)`` is estimated with Rademacher probes,
``E[v^T H v]``, and ``H v`` comes from central differences of first-order
gradients (the tape has no grad-of-grad).
"""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

#: Gradient representatives below this map to delta = 0.
G_FLOOR = 1e-12

GradFn = Callable[[np.ndarray], np.ndarray]
HvpOracle = Callable[[np.ndarray], np.ndarray]


class GMode(str, enum.Enum):
    THREE_SIGMA = "three_sigma"
    MAX_ABS = "max_abs"
    MEAN_ABS = "mean_abs"


@dataclass
class HessianProbeReport:
    quantizer_id: str
    trace_estimate: float
    n_elements: int
    grad_representative: float
    delta: float
    n_probes: int
    iteration: int
    applied: bool = True

    def as_row(self) -> dict:
        row = asdict(self)
        return {
            "iteration": row["iteration"],
            "quantizer_id": row["quantizer_id"],
            "trace": row["trace_estimate"],
            "N": row["n_elements"],
            "G": row["grad_representative"],
            "delta": row["delta"],
            "n_probes": row["n_probes"],
        }


REPORT_COLUMNS = ["iteration", "quantizer_id", "trace", "N", "G", "delta", "n_probes"]


def default_step(x_q: np.ndarray) -> float:
    return 1e-3 * (1.0 + float(np.max(np.abs(x_q)))) if np.size(x_q) else 1e-3


def hvp_finite_difference(grad_fn: GradFn, x_q: np.ndarray, v: np.ndarray, h: float | None = None) -> np.ndarray:
    """``(grad(x_q + h v) - grad(x_q - h v)) / 2h``.

    ``grad_fn`` re-runs the network from ``x_q`` onwards and returns
    ``dL/dx_q`` at the given point.
    """
    x_q = np.asarray(x_q)
    v = np.asarray(v, dtype=x_q.dtype)
    if v.shape != x_q.shape:
        raise ad.ShapeError(f"direction shape {v.shape} does not match x_q {x_q.shape}")
    if h is None:
        h = default_step(x_q)
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    if not np.any(v):
        return np.zeros_like(x_q)
    g_plus = np.asarray(grad_fn(x_q + h * v), dtype=np.float64)
    g_minus = np.asarray(grad_fn(x_q - h * v), dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        hv = (g_plus - g_minus) / (2.0 * h)
    ad.check_finite(hv, "Hessian-vector product")
    return hv


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def hutchinson_trace(oracle: HvpOracle, shape, m_probes: int, rng: np.random.Generator) -> float:
    """Mean of ``v^T (H v)`` over ``m_probes`` Rademacher vectors.

    ``shape`` is the probe shape (an int for flat problems).
    """
    return float(np.mean(hutchinson_samples(oracle, shape, m_probes, rng)))


def hutchinson_samples(oracle: HvpOracle, shape, m_probes: int, rng: np.random.Generator) -> np.ndarray:
    if m_probes < 1:
        raise ValueError(f"need at least one probe, got {m_probes}")
    out = np.empty(m_probes)
    for j in range(m_probes):
        v = rademacher(rng, shape)
        out[j] = float(np.sum(v * np.asarray(oracle(v), dtype=np.float64)))
    return out


def gradient_representative(g_xq: np.ndarray, mode: GMode | str = GMode.THREE_SIGMA) -> float:
    g = np.asarray(g_xq, dtype=np.float64)
    if g.size == 0:
        raise ValueError("empty gradient tensor")
    mode = GMode(mode)
    if mode is GMode.THREE_SIGMA:
        return 3.0 * float(np.std(g))
    if mode is GMode.MAX_ABS:
        return float(np.max(np.abs(g)))
    return float(np.mean(np.abs(g)))


def update_delta(trace: float, n_elements: int, G: float) -> float:
    if n_elements < 1:
        raise ValueError(f"n_elements must be >= 1, got {n_elements}")
    if G < G_FLOOR:
        return 0.0
    return max(0.0, (trace / n_elements) / G)


def delta_update_pass(
    model,
    inputs: np.ndarray,
    labels: np.ndarray,
    n_probes: int = 16,
    g_mode: GMode | str = GMode.THREE_SIGMA,
    rng: np.random.Generator | None = None,
    iteration: int = 0,
) -> list[HessianProbeReport]:
    """Recompute delta for every enabled quantizer of ``model`` on one batch.

    Each quantizer's discrete values are captured, then replaced by a leaf
    tensor so the rest of the network can be re-run at perturbed points.
    Batch-norm layers use batch statistics without touching running stats.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    quantizers = model.quantizers()
    if not quantizers:
        return []
    dtype = model.dtype
    x = Tensor(inputs, dtype=dtype)
    captured: dict[str, np.ndarray] = {}
    with ad.no_grad():
        model.forward(x, training=True, capture=captured, update_stats=False)

    reports = []
    for q in quantizers:
        x_q0 = captured[q.name]

        def grad_fn(point, _name=q.name):
            leaf = Tensor(point, requires_grad=True, dtype=dtype)
            loss, _ = model.loss(x, labels, training=True, overrides={_name: leaf}, update_stats=False)
            ad.backward(loss)
            return leaf.grad

        g_xq = grad_fn(x_q0)
        model.zero_grad()
        n = x_q0.size
        G = gradient_representative(g_xq, g_mode)
        try:
            trace = hutchinson_trace(lambda v: hvp_finite_difference(grad_fn, x_q0, v), x_q0.shape, n_probes, rng)
        except FloatingPointError as exc:
            trace = float("nan")
            logger.warning("%s: %s; keeping delta=%g", q.name, exc, q.delta)
        finally:
            model.zero_grad()
        if not np.isfinite(trace):
            reports.append(HessianProbeReport(q.name, trace, n, G, q.delta, n_probes, iteration, applied=False))
            continue
        delta = update_delta(trace, n, G)
        q.set_delta(delta)
        reports.append(HessianProbeReport(q.name, trace, n, G, delta, n_probes, iteration))
    return reports
