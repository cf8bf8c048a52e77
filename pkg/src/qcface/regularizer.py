"""Recognizability regularizer that plans feature magnitudes from a guidance value.

For a guidance value ``p`` in [0, 1] the loss

    L_reg(|z|, p) = k*p*(1/|z| + |z|/u_a**2) + (1 - p)*(1/|z| + |z|/l_a**2) - b

is strictly convex in ``|z|`` with a unique minimizer ``z*(p)`` that rises
from ``l_a`` at ``p = 0`` to ``u_a`` at ``p = 1``. ``k`` is chosen so that
``z*(0.5)`` is the midpoint of the band, and the optional offset ``b``
shifts every minimum to zero so convergence can be monitored.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidBounds, InvalidGuidance, NonPositiveMagnitude
from .geometry import FeatureBatch, validate_proxies
from .margins import MarginSpec, forward, guidance_values

K_CONSISTENCY_RTOL = 1e-9


class BMode(str, enum.Enum):
    ZERO = "zero"
    TRACKING = "tracking"


def _check_bounds(l_a: float, u_a: float) -> None:
    if not (0.0 < l_a < u_a) or not math.isfinite(u_a):
        raise InvalidBounds(f"need 0 < l_a < u_a, got l_a={l_a}, u_a={u_a}")


def _check_guidance(p_d) -> np.ndarray:
    p = np.asarray(p_d, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise InvalidGuidance("guidance value must lie in [0, 1]")
    return p


def _z_star(k, l_a, u_a, p):
    num = (1.0 + (k - 1.0) * p) * u_a * u_a * l_a * l_a
    den = u_a * u_a + (k * l_a * l_a - u_a * u_a) * p
    return np.sqrt(num / den)


def closed_form_k(l_a: float, u_a: float) -> float:
    """``k`` from solving ``z*(0.5) = (l_a + u_a)/2`` algebraically."""
    _check_bounds(l_a, u_a)
    s = (u_a + l_a) ** 2
    return u_a**2 * (s - 4.0 * l_a**2) / (l_a**2 * (4.0 * u_a**2 - s))


def solve_k(l_a: float, u_a: float) -> float:
    """Linearizing coefficient that puts ``z*(0.5)`` at the middle of [l_a, u_a].

    Found by bisection on the increasing map ``k -> z*(0.5)`` and checked
    against the closed form.
    """
    _check_bounds(l_a, u_a)
    target = 0.5 * (l_a + u_a)

    def resid(k):
        return float(_z_star(k, l_a, u_a, 0.5)) - target

    lo, hi = 1.0, 1.0
    while resid(lo) > 0.0:
        lo *= 0.5
    while resid(hi) < 0.0:
        hi *= 2.0
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if resid(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    k = lo if abs(resid(lo)) <= abs(resid(hi)) else hi

    ref = closed_form_k(l_a, u_a)
    if abs(k - ref) > K_CONSISTENCY_RTOL * abs(ref):
        raise ArithmeticError(f"bisection k={k!r} disagrees with closed form {ref!r}")
    return k


@dataclass(frozen=True)
class RegParams:
    l_a: float = 1.0
    u_a: float = 100.0
    k: float | None = None
    b_mode: BMode = BMode.TRACKING
    lambda_g: float = 1.0

    def __post_init__(self):
        _check_bounds(self.l_a, self.u_a)
        if self.k is None:
            object.__setattr__(self, "k", solve_k(self.l_a, self.u_a))
        if not self.k > 0:
            raise ValueError("k must be positive for a strictly convex regularizer")
        if self.lambda_g < 0:
            raise ValueError("lambda_g must be non-negative")
        object.__setattr__(self, "b_mode", BMode(self.b_mode))


def expected_magnitude(params: RegParams, p_d):
    """Minimizer ``z*(p_d)`` of the regularizer; lies in [l_a, u_a]."""
    p = _check_guidance(p_d)
    z = _z_star(params.k, params.l_a, params.u_a, p)
    return float(z) if np.ndim(z) == 0 else z


def _bracket_terms(params: RegParams, z_mag, p):
    inv = 1.0 / z_mag
    upper = inv + z_mag / params.u_a**2
    lower = inv + z_mag / params.l_a**2
    return params.k * p * upper + (1.0 - p) * lower


def offset_b(params: RegParams, p_d):
    """Offset that makes the regularizer vanish at its minimizer."""
    p = _check_guidance(p_d)
    z = _z_star(params.k, params.l_a, params.u_a, p)
    b = _bracket_terms(params, z, p)
    return float(b) if np.ndim(b) == 0 else b


def reg_loss(params: RegParams, z_mag, p_d):
    """Regularizer value; ``p_d`` is a constant with respect to ``z_mag``."""
    z = np.asarray(z_mag, dtype=np.float64)
    if np.any(~(z > 0.0)):
        raise NonPositiveMagnitude("feature magnitude must be positive")
    p = _check_guidance(p_d)
    val = _bracket_terms(params, z, p)
    if params.b_mode is BMode.TRACKING:
        val = val - _bracket_terms(params, _z_star(params.k, params.l_a, params.u_a, p), p)
    return float(val) if np.ndim(val) == 0 else val


def reg_loss_dmag(params: RegParams, z_mag, p_d):
    """``dL_reg/d|z|`` with ``p_d`` held constant."""
    z = np.asarray(z_mag, dtype=np.float64)
    if np.any(~(z > 0.0)):
        raise NonPositiveMagnitude("feature magnitude must be positive")
    p = _check_guidance(p_d)
    inv2 = 1.0 / (z * z)
    g = params.k * p * (1.0 / params.u_a**2 - inv2) + (1.0 - p) * (1.0 / params.l_a**2 - inv2)
    return float(g) if np.ndim(g) == 0 else g


def linearity_deviation(params: RegParams, n_grid: int = 101) -> float:
    """Largest gap between ``z*`` and the straight line from l_a to u_a, relative to the band."""
    p = np.linspace(0.0, 1.0, n_grid)
    z = _z_star(params.k, params.l_a, params.u_a, p)
    line = params.l_a + (params.u_a - params.l_a) * p
    return float(np.max(np.abs(z - line)) / (params.u_a - params.l_a))


@dataclass
class QCFaceLoss:
    lsm: np.ndarray
    lreg: np.ndarray
    p_d: np.ndarray
    total: np.ndarray

    @property
    def mean_lsm(self) -> float:
        return float(np.mean(self.lsm))

    @property
    def mean_lreg(self) -> float:
        return float(np.mean(self.lreg))

    @property
    def mean_pd(self) -> float:
        return float(np.mean(self.p_d))

    @property
    def mean_total(self) -> float:
        return float(np.mean(self.total))


def qcface_total_loss(spec: MarginSpec, params: RegParams, batch: FeatureBatch, proxies) -> QCFaceLoss:
    """Softmax term plus ``lambda_g`` times the regularizer, per sample."""
    W = validate_proxies(proxies)
    batch.check_against(W)
    fw = forward(spec, batch.features, batch.labels, W)
    p_d = guidance_values(batch.features, batch.labels, W, spec.s)
    lreg = np.atleast_1d(reg_loss(params, fw.z_norm, p_d))
    return QCFaceLoss(fw.loss, lreg, p_d, fw.loss + params.lambda_g * lreg)
