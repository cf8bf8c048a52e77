"""Class-center softmax losses with angular, additive-angular and additive margins.

Every loss in the family shares one logit layout. For the true class the
logit is ``s * F`` with ``F = cos(m1*theta + m2) - m3``; every other class
gets ``s * N(cos)``. ``m2`` and ``m3`` may depend on the feature magnitude
(MagFace-style linear ramp, AdaFace-style batch-normalized norm). ``N`` is
the identity unless a hard-negative reweighting (MV-Softmax, CurricularFace)
is selected.

The functions here are vectorized over a batch; the per-sample helpers wrap
the batch form.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import InvalidTheta, SingularMarginDerivative
from .geometry import FeatureBatch, as_vector, cosine_matrix, validate_proxies

COT_POLE_TOL = 1e-8
BN_STD_FLOOR = 1e-6


# -- margin modes -------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    value: float = 0.0


@dataclass(frozen=True)
class MagLinear:
    """Linear ramp from ``l_m`` at ``|z| = l_a`` to ``u_m`` at ``|z| = u_a``."""

    l_m: float = 0.45
    u_m: float = 0.8
    l_a: float = 10.0
    u_a: float = 110.0

    def __post_init__(self):
        if not self.l_a < self.u_a:
            raise ValueError("MagLinear needs l_a < u_a")
        if not self.l_m < self.u_m:
            raise ValueError("MagLinear needs l_m < u_m")


@dataclass(frozen=True)
class AdaNorm:
    """Batch-normalized norm margin: ``m2 = -m*zhat`` and ``m3 = m*(zhat + 1)``.

    With ``detach`` the normalized norm is a constant during
    differentiation, as AdaFace trains it.
    """

    m: float = 0.4
    detach: bool = True


@dataclass(frozen=True)
class Identity:
    pass


@dataclass(frozen=True)
class MVSoftmax:
    t: float = 1.2


@dataclass(frozen=True)
class Curricular:
    t: float = 0.0


M2Mode = Union[Constant, MagLinear, AdaNorm]
M3Mode = Union[Constant, AdaNorm]
NegMode = Union[Identity, MVSoftmax, Curricular]


@dataclass(frozen=True)
class MarginSpec:
    m1: float = 1.0
    m2: M2Mode = field(default_factory=lambda: Constant(0.5))
    m3: M3Mode = field(default_factory=lambda: Constant(0.0))
    s: float = 64.0
    neg: NegMode = field(default_factory=Identity)

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("scale s must be positive")
        if self.m1 < 0:
            raise ValueError("m1 must be non-negative")
        if isinstance(self.m2, Constant) and not 0.0 <= self.m2.value < math.pi / 2:
            raise ValueError("constant m2 must lie in [0, pi/2)")
        if isinstance(self.m3, Constant) and self.m3.value < 0:
            raise ValueError("constant m3 must be non-negative")
        if isinstance(self.m3, MagLinear):
            raise ValueError("m3 does not support the MagLinear mode")

    @property
    def magnitude_dependent(self) -> bool:
        return not (isinstance(self.m2, Constant) and isinstance(self.m3, Constant))

    def arcface_form(self) -> MarginSpec:
        """The plain ArcFace spec used for the warm-up phase."""
        m = self.m2.value if isinstance(self.m2, Constant) else 0.5
        return MarginSpec(m1=1.0, m2=Constant(m), m3=Constant(0.0), s=self.s, neg=Identity())


def softmax_spec(s: float = 64.0) -> MarginSpec:
    return MarginSpec(m2=Constant(0.0), s=s)


def sphereface(m1: float = 1.35, s: float = 64.0) -> MarginSpec:
    return MarginSpec(m1=m1, m2=Constant(0.0), s=s)


def cosface(m: float = 0.35, s: float = 64.0) -> MarginSpec:
    return MarginSpec(m2=Constant(0.0), m3=Constant(m), s=s)


def arcface(m: float = 0.5, s: float = 64.0) -> MarginSpec:
    return MarginSpec(m2=Constant(m), s=s)


def mv_arcface(m: float = 0.5, t: float = 1.2, s: float = 64.0) -> MarginSpec:
    return MarginSpec(m2=Constant(m), s=s, neg=MVSoftmax(t))


def curricularface(m: float = 0.5, t: float = 0.0, s: float = 64.0) -> MarginSpec:
    return MarginSpec(m2=Constant(m), s=s, neg=Curricular(t))


def magface(l_m=0.45, u_m=0.8, l_a=10.0, u_a=110.0, s: float = 64.0) -> MarginSpec:
    return MarginSpec(m2=MagLinear(l_m, u_m, l_a, u_a), s=s)


def adaface(m: float = 0.4, s: float = 64.0, detach: bool = True) -> MarginSpec:
    return MarginSpec(m2=AdaNorm(m, detach), m3=AdaNorm(m, detach), s=s)


# QCFace keeps the ArcFace softmax term; the regularizer lives in regularizer.py
qcface = arcface


class StrategyClass(enum.Enum):
    CONSTANT_MARGIN = "ConstantMargin"
    SOFT_MARGIN_NO_MVP = "SoftMarginNoMVP"
    SOFT_MARGIN_MVP = "SoftMarginMVP"
    HARD_MARGIN = "HardMargin"


def classify_margin_strategy(spec: MarginSpec, has_mvp_reg: bool) -> StrategyClass:
    """Place a loss in the constant / soft / hard margin taxonomy.

    A magnitude-dependent margin is a soft margin, with or without a
    magnitude regularizer. A constant margin plus a magnitude regularizer
    driven by a detached guidance value is the hard margin.
    """
    if spec.magnitude_dependent:
        return StrategyClass.SOFT_MARGIN_MVP if has_mvp_reg else StrategyClass.SOFT_MARGIN_NO_MVP
    return StrategyClass.HARD_MARGIN if has_mvp_reg else StrategyClass.CONSTANT_MARGIN


# -- batch statistics ---------------------------------------------------------


@dataclass(frozen=True)
class BatchNormState:
    mean: float
    std: float

    def __post_init__(self):
        object.__setattr__(self, "std", max(float(self.std), BN_STD_FLOOR))

    @classmethod
    def from_magnitudes(cls, z_mag) -> BatchNormState:
        z_mag = np.asarray(z_mag, dtype=np.float64)
        std = float(np.std(z_mag)) if z_mag.size > 1 else 0.0
        return cls(float(np.mean(z_mag)), std)


# -- margin resolution --------------------------------------------------------


@dataclass
class Margins:
    """Per-sample ``m2``, ``m3`` and their derivatives in ``|z|``."""

    m2: np.ndarray
    dm2: np.ndarray
    m3: np.ndarray
    dm3: np.ndarray

    def frozen(self) -> Margins:
        zero = np.zeros_like(self.m2)
        return Margins(self.m2.copy(), zero, self.m3.copy(), zero.copy())


def _ada_zhat(z_mag, bn: BatchNormState):
    raw = (z_mag - bn.mean) / bn.std
    inside = (raw > -1.0) & (raw < 1.0)
    return np.clip(raw, -1.0, 1.0), inside


def resolve_margins(spec: MarginSpec, z_mag, bn: BatchNormState | None = None) -> Margins:
    z_mag = np.atleast_1d(np.asarray(z_mag, dtype=np.float64))
    zero = np.zeros_like(z_mag)

    mode = spec.m2
    if isinstance(mode, Constant):
        m2, dm2 = np.full_like(z_mag, mode.value), zero
    elif isinstance(mode, MagLinear):
        slope = (mode.u_m - mode.l_m) / (mode.u_a - mode.l_a)
        zc = np.clip(z_mag, mode.l_a, mode.u_a)
        m2 = slope * (zc - mode.l_a) + mode.l_m
        dm2 = np.where((z_mag >= mode.l_a) & (z_mag <= mode.u_a), slope, 0.0)
    elif isinstance(mode, AdaNorm):
        bn = bn or BatchNormState.from_magnitudes(z_mag)
        zhat, inside = _ada_zhat(z_mag, bn)
        m2 = -mode.m * zhat
        dm2 = zero if mode.detach else np.where(inside, -mode.m / bn.std, 0.0)
    else:
        raise TypeError(f"unsupported m2 mode {mode!r}")

    mode = spec.m3
    if isinstance(mode, Constant):
        m3, dm3 = np.full_like(z_mag, mode.value), zero
    elif isinstance(mode, AdaNorm):
        bn = bn or BatchNormState.from_magnitudes(z_mag)
        zhat, inside = _ada_zhat(z_mag, bn)
        m3 = mode.m * (zhat + 1.0)
        dm3 = zero if mode.detach else np.where(inside, mode.m / bn.std, 0.0)
    else:
        raise TypeError(f"unsupported m3 mode {mode!r}")

    return Margins(m2, dm2, m3, dm3)


# -- modulation functions -----------------------------------------------------


def _positive(m1: float, cos_y, mg: Margins):
    """``F``, ``dF/dcos`` and ``dF/d|z|`` for the true class."""
    theta = np.arccos(cos_y)
    sin_t = np.sqrt(1.0 - cos_y * cos_y)
    arg = m1 * theta + mg.m2
    F = np.cos(arg) - mg.m3
    if m1 == 1.0:
        dF_dcos = np.sin(arg) / sin_t
    else:
        sin_m1t = np.sin(m1 * theta)
        sin_m2 = np.sin(mg.m2)
        needs_cot = sin_m2 != 0.0
        if np.any(needs_cot & (np.abs(sin_m1t) < COT_POLE_TOL)):
            raise SingularMarginDerivative("sin(m1*theta) ~ 0 with a nonzero additive angular margin")
        safe = np.where(needs_cot, sin_m1t, 1.0)
        f = np.cos(mg.m2) + np.where(needs_cot, np.cos(m1 * theta) / safe * sin_m2, 0.0)
        dF_dcos = m1 * sin_m1t / sin_t * f
    dF_dmag = -np.sin(arg) * mg.dm2 - mg.dm3
    return F, dF_dcos, dF_dmag


def _negative(neg: NegMode, cos_k, gate):
    """``N`` and ``dN/dcos`` for non-target classes; ``gate`` marks hard negatives."""
    if isinstance(neg, Identity):
        return cos_k, np.ones_like(cos_k)
    if isinstance(neg, MVSoftmax):
        N = np.where(gate, neg.t * cos_k + neg.t - 1.0, cos_k)
        dN = np.where(gate, neg.t, 1.0)
        return N, dN
    if isinstance(neg, Curricular):
        N = np.where(gate, (neg.t + cos_k) * cos_k, cos_k)
        dN = np.where(gate, neg.t + 2.0 * cos_k, 1.0)
        return N, dN
    raise TypeError(f"unsupported negative mode {neg!r}")


def positive_modulation(spec: MarginSpec, theta: float, z_mag: float, bn: BatchNormState | None = None) -> float:
    """``cos(m1*theta + m2(|z|)) - m3(|z|)``.

    >>> round(positive_modulation(arcface(0.5), 1.0, 10.0), 6)
    0.070737
    """
    if not 0.0 <= theta <= math.pi:
        raise InvalidTheta(f"theta={theta} outside [0, pi]")
    if bn is None and (isinstance(spec.m2, AdaNorm) or isinstance(spec.m3, AdaNorm)):
        raise ValueError("AdaNorm margins need batch statistics")
    mg = resolve_margins(spec, z_mag, bn)
    return float(np.cos(spec.m1 * theta + mg.m2[0]) - mg.m3[0])


def negative_modulation(spec: MarginSpec, cos_theta: float, positive: float | None = None) -> float:
    """Non-target logit before scaling.

    ``positive`` is the modulated true-class value; the hard-negative
    reweighting applies only when ``positive < cos_theta``. Without it the
    gate is treated as open.
    """
    gate = True if positive is None else positive < cos_theta
    N, _ = _negative(spec.neg, np.asarray(float(cos_theta)), np.asarray(gate))
    return float(N)


# -- forward pass -------------------------------------------------------------


def _log_softmax(logits):
    mx = logits.max(axis=1, keepdims=True)
    shifted = logits - mx
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def _true_class_nll(logits, labels):
    """``-log softmax(logits)[y]`` without cancellation when the true logit dominates."""
    rows = np.arange(logits.shape[0])
    rel = logits - logits[rows, labels][:, None]
    rel[rows, labels] = -np.inf
    top = rel.max(axis=1)
    small = top <= 0.0
    out = np.empty(logits.shape[0])
    if np.any(small):
        out[small] = np.log1p(np.exp(rel[small]).sum(axis=1))
    if np.any(~small):
        r = rel[~small]
        t = top[~small][:, None]
        out[~small] = top[~small] + np.log(np.exp(r - t).sum(axis=1) + np.exp(-t[:, 0]))
    return out


@dataclass
class Forward:
    """Cached quantities from one evaluation of the softmax term on a batch."""

    cos: np.ndarray
    z_norm: np.ndarray
    w_norm: np.ndarray
    logits: np.ndarray
    dfnc_dcos: np.ndarray
    dfy_dmag: np.ndarray
    probs: np.ndarray
    loss: np.ndarray
    margins: Margins


def forward(
    spec: MarginSpec,
    Z,
    labels,
    W,
    bn: BatchNormState | None = None,
    margins: Margins | None = None,
) -> Forward:
    """Evaluate the margin softmax loss for every row of ``Z``.

    ``margins`` overrides the magnitude-dependent margin resolution; pass
    ``Margins.frozen()`` to hold them constant.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    W = validate_proxies(W)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = Z.shape[0]
    rows = np.arange(n)

    cos, z_norm, w_norm = cosine_matrix(Z, W)
    if margins is None:
        margins = resolve_margins(spec, z_norm, bn)
    cos_y = cos[rows, labels]
    F, dF_dcos, dF_dmag = _positive(spec.m1, cos_y, margins)

    gate = F[:, None] < cos
    Fnc, dFnc = _negative(spec.neg, cos, gate)
    Fnc = np.array(Fnc, dtype=np.float64)
    dFnc = np.array(dFnc, dtype=np.float64)
    Fnc[rows, labels] = F
    dFnc[rows, labels] = dF_dcos

    logits = spec.s * Fnc
    logp = _log_softmax(logits)
    probs = np.exp(logp)
    loss = _true_class_nll(logits, labels)
    return Forward(cos, z_norm, w_norm, logits, dFnc, dF_dmag, probs, loss, margins)


def guidance_values(Z, labels, W, s: float) -> np.ndarray:
    """Margin-free softmax probability of the true class, per row.

    Callers treat the result as a constant: it never feeds a gradient.
    """
    if not s > 0:
        raise ValueError("scale s must be positive")
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    cos, _, _ = cosine_matrix(Z, validate_proxies(W))
    logp = _log_softmax(s * cos)
    return np.exp(logp[np.arange(len(labels)), labels])


def guidance_value(z, label: int, proxies, s: float) -> float:
    return float(guidance_values(as_vector(z)[None, :], [label], proxies, s)[0])


def class_probabilities(spec: MarginSpec, z, label: int, proxies, bn: BatchNormState | None = None) -> np.ndarray:
    z = as_vector(z)
    return forward(spec, z[None, :], [label], proxies, bn).probs[0]


def softmax_loss(
    spec: MarginSpec, batch: FeatureBatch, proxies, bn: BatchNormState | None = None
) -> tuple[np.ndarray, float]:
    """Per-sample margin softmax loss and its batch mean."""
    W = validate_proxies(proxies)
    batch.check_against(W)
    fw = forward(spec, batch.features, batch.labels, W, bn)
    return fw.loss, float(np.mean(fw.loss))


__all__ = [
    "AdaNorm",
    "BatchNormState",
    "Constant",
    "Curricular",
    "Forward",
    "Identity",
    "MVSoftmax",
    "MagLinear",
    "MarginSpec",
    "Margins",
    "StrategyClass",
    "adaface",
    "arcface",
    "class_probabilities",
    "classify_margin_strategy",
    "cosface",
    "curricularface",
    "forward",
    "guidance_value",
    "guidance_values",
    "magface",
    "mv_arcface",
    "negative_modulation",
    "positive_modulation",
    "qcface",
    "resolve_margins",
    "softmax_loss",
    "softmax_spec",
    "sphereface",
]
