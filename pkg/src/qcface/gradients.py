"""Analytic gradients of the class-center loss and their direction/magnitude split.

The softmax term contributes a tangential gradient ``g_theta`` (through the
cosines) and, when a margin depends on ``|z|``, a radial gradient
``g_mag_minus``. The regularizer contributes only a radial gradient
``g_mag_plus``; the guidance value feeding it is never differentiated.

Derivatives are formed in cosine coordinates. ``theta`` itself is never
differentiated through ``arccos``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteLoss
from .geometry import as_vector, validate_proxies
from .margins import (
    AdaNorm,
    BatchNormState,
    Identity,
    MagLinear,
    MarginSpec,
    Margins,
    forward,
    guidance_values,
    resolve_margins,
)
from .regularizer import RegParams, reg_loss, reg_loss_dmag

FD_STEP = 1e-6


@dataclass
class BatchGradients:
    """Loss values and gradients for a batch; ``dW`` is summed over samples."""

    lsm: np.ndarray
    lreg: np.ndarray
    p_d: np.ndarray
    g_theta: np.ndarray
    g_mag_minus: np.ndarray
    g_mag_plus: np.ndarray
    dW: np.ndarray

    @property
    def dZ(self) -> np.ndarray:
        return self.g_theta + self.g_mag_minus + self.g_mag_plus


def _prob_residual(probs, labels):
    """``P_k - 1{k=y}`` with the true-class entry formed as ``-sum_{k!=y} P_k``."""
    rows = np.arange(probs.shape[0])
    G = probs.copy()
    others = probs.copy()
    others[rows, labels] = 0.0
    G[rows, labels] = -others.sum(axis=1)
    return G


def batch_gradients(
    spec: MarginSpec,
    Z,
    labels,
    W,
    reg: RegParams | None = None,
    lambda_g: float | None = None,
    bn: BatchNormState | None = None,
    margins: Margins | None = None,
) -> BatchGradients:
    """Per-sample losses and analytic gradients of ``L_sm + lambda_g * L_reg``.

    ``lambda_g`` defaults to ``reg.lambda_g``; with ``reg=None`` the
    regularizer is off. The guidance value is recomputed here and treated as
    a constant.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    W = validate_proxies(W)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    rows = np.arange(Z.shape[0])

    fw = forward(spec, Z, labels, W, bn, margins)
    G = _prob_residual(fw.probs, labels)
    coef = spec.s * G * fw.dfnc_dcos

    z_hat = Z / fw.z_norm[:, None]
    w_hat = W / fw.w_norm[:, None]
    raw_cos = z_hat @ w_hat.T

    # tangential: sum_k coef_k * (w_hat_k - cos_k z_hat) / |z|
    g_theta = (coef @ w_hat - (coef * raw_cos).sum(axis=1)[:, None] * z_hat) / fw.z_norm[:, None]
    g_mag_minus = (spec.s * G[rows, labels] * fw.dfy_dmag)[:, None] * z_hat
    dW = (coef.T @ z_hat - (coef * raw_cos).sum(axis=0)[:, None] * w_hat) / fw.w_norm[:, None]

    p_d = guidance_values(Z, labels, W, spec.s)
    if reg is None:
        lreg = np.zeros_like(p_d)
        g_mag_plus = np.zeros_like(Z)
    else:
        lam = reg.lambda_g if lambda_g is None else lambda_g
        lreg = np.atleast_1d(reg_loss(reg, fw.z_norm, p_d))
        g_mag_plus = (lam * np.atleast_1d(reg_loss_dmag(reg, fw.z_norm, p_d)))[:, None] * z_hat
    return BatchGradients(fw.loss, lreg, p_d, g_theta, g_mag_minus, g_mag_plus, dW)


# -- per-sample views ---------------------------------------------------------


@dataclass
class ProxyGradients:
    g_ac: np.ndarray
    g_mc: dict[int, np.ndarray]
    label: int

    @property
    def full(self) -> np.ndarray:
        C = len(self.g_mc) + 1
        out = np.zeros((C, self.g_ac.shape[0]))
        out[self.label] = self.g_ac
        for k, g in self.g_mc.items():
            out[k] = g
        return out


@dataclass
class GradientBreakdown:
    g_ac: np.ndarray
    g_mc: dict[int, np.ndarray]
    g_theta: np.ndarray
    g_mag_minus: np.ndarray
    g_mag_plus: np.ndarray
    p_d: float

    @property
    def g_mag(self) -> np.ndarray:
        return self.g_mag_minus + self.g_mag_plus

    @property
    def total(self) -> np.ndarray:
        return self.g_theta + self.g_mag


def _single(spec, z, label, proxies, bn, reg=None):
    z = as_vector(z)
    return batch_gradients(spec, z[None, :], [label], proxies, reg=reg, bn=bn)


def grad_sm_wrt_proxies(spec: MarginSpec, z, label: int, proxies, bn: BatchNormState | None = None) -> ProxyGradients:
    g = _single(spec, z, label, proxies, bn)
    mc = {k: g.dW[k].copy() for k in range(g.dW.shape[0]) if k != label}
    return ProxyGradients(g.dW[label].copy(), mc, label)


def grad_sm_wrt_feature(spec: MarginSpec, z, label: int, proxies, bn: BatchNormState | None = None):
    """``(g_theta, g_mag_minus)`` of the softmax term at ``z``."""
    g = _single(spec, z, label, proxies, bn)
    return g.g_theta[0], g.g_mag_minus[0]


def grad_reg_wrt_feature(params: RegParams, z, p_d: float) -> np.ndarray:
    """Radial gradient of the (unweighted) regularizer at fixed ``p_d``."""
    z = as_vector(z)
    r = float(np.linalg.norm(z))
    return reg_loss_dmag(params, r, p_d) * z / r if r > 0 else reg_loss_dmag(params, r, p_d) * z


def gradient_breakdown(
    spec: MarginSpec,
    params: RegParams | None,
    z,
    label: int,
    proxies,
    bn: BatchNormState | None = None,
) -> GradientBreakdown:
    g = _single(spec, z, label, proxies, bn, reg=params)
    mc = {k: g.dW[k].copy() for k in range(g.dW.shape[0]) if k != label}
    return GradientBreakdown(
        g.dW[label].copy(), mc, g.g_theta[0], g.g_mag_minus[0], g.g_mag_plus[0], float(g.p_d[0])
    )


# -- probes -------------------------------------------------------------------


def lemma1_scaling_check(spec: MarginSpec, z, label: int, proxies, c: float = 2.0) -> float:
    """``|g_theta(c*z)| / |g_theta(z)|``; equals ``1/c`` for constant margins.

    Returns NaN when the feature is aligned with every proxy and both
    directional gradients vanish.
    """
    if spec.magnitude_dependent:
        raise ValueError("the scaling law needs a constant-margin spec")
    z = as_vector(z)
    g1, _ = grad_sm_wrt_feature(spec, z, label, proxies)
    g2, _ = grad_sm_wrt_feature(spec, c * z, label, proxies)
    n1 = np.linalg.norm(g1)
    n2 = np.linalg.norm(g2)
    if n1 == 0.0:
        return math.nan
    return float(n2 / n1)


@dataclass
class CouplingReport:
    sm_scale_invariant: bool
    reg_rotation_invariant: bool
    cross_partial: float
    sm_scale_deviation: float
    reg_rotation_deviation: float


def _tangent_direction(z, w, rng):
    u = z / np.linalg.norm(z)
    v = w - np.dot(w, u) * u
    nv = np.linalg.norm(v)
    if nv < 1e-12:
        v = rng.standard_normal(z.shape[0])
        v -= np.dot(v, u) * u
        nv = np.linalg.norm(v)
    return u, v / nv


def _sm_value(spec, z, label, W, bn):
    return float(forward(spec, z[None, :], [label], W, bn).loss[0])


def coupling_probe(
    spec: MarginSpec,
    params: RegParams | None,
    z,
    label: int,
    proxies,
    bn: BatchNormState | None = None,
    seed: int = 0,
    tol: float = 1e-9,
) -> CouplingReport:
    """Check whether direction and magnitude are optimized by separate terms.

    The softmax term is scale invariant iff rescaling ``z`` leaves it
    unchanged; the regularizer is rotation invariant iff rotating ``z`` at
    fixed magnitude and fixed guidance leaves it unchanged. ``cross_partial``
    estimates d2 L_sm / (d|z| d phi) along a tangential direction ``phi``.
    """
    z = as_vector(z)
    W = validate_proxies(proxies)
    rng = np.random.default_rng(seed)
    base = _sm_value(spec, z, label, W, bn)
    sm_dev = max(abs(_sm_value(spec, c * z, label, W, bn) - base) for c in (0.5, 2.0, 5.0))

    if params is None:
        reg_dev = 0.0
    else:
        p_d = guidance_values(z[None, :], [label], W, spec.s)[0]
        r = np.linalg.norm(z)
        Q, _ = np.linalg.qr(rng.standard_normal((z.shape[0], z.shape[0])))
        zr = Q @ z
        reg_dev = abs(reg_loss(params, np.linalg.norm(zr), p_d) - reg_loss(params, r, p_d))

    u, v = _tangent_direction(z, W[label], rng)
    r = float(np.linalg.norm(z))
    hr, hp = 1e-4 * r, 1e-4

    def at(rr, phi):
        return _sm_value(spec, rr * (math.cos(phi) * u + math.sin(phi) * v), label, W, bn)

    cross = (at(r + hr, hp) - at(r + hr, -hp) - at(r - hr, hp) + at(r - hr, -hp)) / (4.0 * hr * hp)
    return CouplingReport(sm_dev < tol, reg_dev < tol, float(cross), float(sm_dev), float(reg_dev))


# -- finite differences -------------------------------------------------------


@dataclass
class FDReport:
    max_rel_error: float
    worst_coordinate: int
    step: float

    def passed(self, tol: float = 1e-6) -> bool:
        return self.max_rel_error < tol


def finite_difference_check(loss, analytic, point, step: float = FD_STEP, vectorized: bool = False) -> FDReport:
    """Compare an analytic gradient with central differences of ``loss``.

    Coordinate ``i`` is perturbed by ``step * max(1, |x_i|)``. The error at
    each coordinate is measured against the largest entry of either
    gradient, so tiny components do not dominate the report. With
    ``vectorized`` the loss maps an (m, n) stack of points to m values.
    """
    x = np.asarray(point, dtype=np.float64).ravel().copy()
    a = np.asarray(analytic, dtype=np.float64).ravel()
    if a.shape != x.shape:
        raise ValueError("analytic gradient shape does not match the point")
    f0 = float(loss(x[None, :])[0]) if vectorized else loss(x)
    if not math.isfinite(f0):
        raise NonFiniteLoss(f"loss is {f0} at the check point")
    h = step * np.maximum(1.0, np.abs(x))
    # effective step as represented in floating point
    span = (x + h) - (x - h)
    if vectorized:
        n = x.size
        pts = np.repeat(x[None, :], 2 * n, axis=0)
        idx = np.arange(n)
        pts[idx, idx] += h
        pts[n + idx, idx] -= h
        vals = np.asarray(loss(pts), dtype=np.float64)
        fp, fm = vals[:n], vals[n:]
    else:
        fp = np.empty_like(x)
        fm = np.empty_like(x)
        for i in range(x.size):
            orig = x[i]
            x[i] = orig + h[i]
            fp[i] = loss(x)
            x[i] = orig - h[i]
            fm[i] = loss(x)
            x[i] = orig
    if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
        raise NonFiniteLoss("loss not finite near the check point")
    num = (fp - fm) / span
    scale = max(np.max(np.abs(a)), np.max(np.abs(num)))
    err = np.abs(a - num)
    if scale == 0.0:
        return FDReport(0.0, 0, step)
    rel = err / scale
    worst = int(np.argmax(rel))
    return FDReport(float(rel[worst]), worst, step)


def instance_fd_check(
    spec: MarginSpec,
    z,
    label: int,
    proxies,
    reg: RegParams | None = None,
    bn: BatchNormState | None = None,
    analytic_fn=None,
) -> FDReport:
    """FD check of ``d(L_sm + lambda_g L_reg)`` with respect to ``z`` and every proxy.

    The guidance value, and any detached AdaNorm margin, are frozen at the
    check point so the reference function is the one actually optimized.
    ``analytic_fn`` replaces :func:`batch_gradients` (used for mutation tests).
    """
    z = as_vector(z)
    W = validate_proxies(proxies)
    d = z.shape[0]
    analytic_fn = analytic_fn or batch_gradients
    g = analytic_fn(spec, z[None, :], [label], W, reg=reg, bn=bn)
    analytic = np.concatenate([g.dZ[0], g.dW.ravel()])

    p_d = float(guidance_values(z[None, :], [label], W, spec.s)[0])
    frozen = None
    if any(isinstance(m, AdaNorm) and m.detach for m in (spec.m2, spec.m3)):
        frozen = resolve_margins(spec, [np.linalg.norm(z)], bn)
        for attr, mode in (("m2", spec.m2), ("m3", spec.m3)):
            if isinstance(mode, AdaNorm) and mode.detach:
                setattr(frozen, "d" + attr, np.zeros(1))

    def loss(X):
        m = X.shape[0]
        ZZ = X[:, :d]
        WW = X[:, d:].reshape((m,) + W.shape)
        mg = None
        if frozen is not None:
            mg = Margins(*(np.repeat(getattr(frozen, a), m) for a in ("m2", "dm2", "m3", "dm3")))
        val = forward(spec, ZZ, np.full(m, label), WW, bn, mg).loss
        if reg is not None:
            val = val + reg.lambda_g * reg_loss(reg, np.linalg.norm(ZZ, axis=1), np.full(m, p_d))
        return val

    return finite_difference_check(loss, analytic, np.concatenate([z, W.ravel()]), vectorized=True)


# -- randomized instances -----------------------------------------------------


@dataclass
class Instance:
    z: np.ndarray
    label: int
    W: np.ndarray
    bn: BatchNormState | None = field(default=None)


def _well_conditioned(spec: MarginSpec, inst: Instance) -> bool:
    fw = forward(spec, inst.z[None, :], [inst.label], inst.W, inst.bn)
    cos = fw.cos[0]
    cy = cos[inst.label]
    theta = math.acos(cy)
    if math.sin(theta) < 0.05:
        return False
    if spec.m1 != 1.0 and abs(math.sin(spec.m1 * theta)) < 1e-2:
        return False
    if not isinstance(spec.neg, Identity):
        Fy = fw.logits[0, inst.label] / spec.s
        others = np.delete(cos, inst.label)
        if np.any(np.abs(others - Fy) < 1e-3):
            return False
    return True


def random_instance(rng: np.random.Generator, spec: MarginSpec, reg: RegParams | None = None,
                    c_range=(2, 8), d_range=(2, 16), max_tries: int = 1000) -> Instance:
    """Draw a generic (z, label, W) away from clamps, gates and poles."""
    for _ in range(max_tries):
        C = int(rng.integers(c_range[0], c_range[1] + 1))
        d = int(rng.integers(d_range[0], d_range[1] + 1))
        W = rng.standard_normal((C, d)) * rng.uniform(0.5, 2.0, size=(C, 1))
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        if isinstance(spec.m2, MagLinear):
            lo, hi = spec.m2.l_a, spec.m2.u_a
            r = rng.uniform(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo))
        elif reg is not None:
            r = rng.uniform(1.5 * reg.l_a, 0.9 * reg.u_a)
        else:
            r = rng.uniform(0.5, 20.0)
        bn = None
        if isinstance(spec.m2, AdaNorm) or isinstance(spec.m3, AdaNorm):
            std = rng.uniform(0.2, 2.0) * r
            bn = BatchNormState(r - rng.uniform(-0.8, 0.8) * std, std)
        inst = Instance(r * u, int(rng.integers(C)), W, bn)
        if _well_conditioned(spec, inst):
            return inst
    raise RuntimeError("could not draw a well-conditioned instance")


def fd_suite(spec: MarginSpec, n_instances: int, seed: int = 0, reg: RegParams | None = None,
             analytic_fn=None) -> list[FDReport]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_instances):
        inst = random_instance(rng, spec, reg)
        out.append(instance_fd_check(spec, inst.z, inst.label, inst.W, reg, inst.bn, analytic_fn))
    return out


__all__ = [
    "BatchGradients",
    "CouplingReport",
    "FDReport",
    "GradientBreakdown",
    "Instance",
    "ProxyGradients",
    "batch_gradients",
    "coupling_probe",
    "fd_suite",
    "finite_difference_check",
    "grad_reg_wrt_feature",
    "grad_sm_wrt_feature",
    "grad_sm_wrt_proxies",
    "gradient_breakdown",
    "instance_fd_check",
    "lemma1_scaling_check",
    "random_instance",
]
