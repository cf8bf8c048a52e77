import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from qcface.geometry import FeatureBatch
from qcface.margins import (
    AdaNorm, BatchNormState, Constant, Curricular, Identity, MagLinear, MarginSpec, MVSoftmax,
    StrategyClass, adaface, arcface, class_probabilities, classify_margin_strategy, cosface,
    curricularface, forward, guidance_value, guidance_values, magface, mv_arcface,
    negative_modulation, positive_modulation, qcface, resolve_margins, softmax_loss, softmax_spec,
    sphereface,
)

import oracles


def _geom(cosines):
    """Unit feature along e0 and one proxy per requested cosine, in len+1 dims."""
    C = len(cosines)
    z = np.zeros(C + 1)
    z[0] = 1.0
    W = np.zeros((C, C + 1))
    for k, c in enumerate(cosines):
        W[k, 0] = c
        W[k, k + 1] = math.sqrt(1 - c * c)
    return z, W


# -- positive / negative modulation ------------------------------------------


def test_arcface_positive():
    assert positive_modulation(arcface(0.5), 1.0, 10.0) == pytest.approx(0.0707372016677029, abs=1e-15)


@pytest.mark.parametrize("theta", [0.1, 1.0, 2.5])
def test_margin_free_is_identity(theta):
    assert positive_modulation(softmax_spec(), theta, 3.0) == pytest.approx(math.cos(theta), abs=1e-15)


def test_cosface_positive():
    assert positive_modulation(cosface(0.35), math.pi / 3, 1.0) == pytest.approx(0.15, abs=1e-15)


def test_sphereface_positive():
    assert positive_modulation(sphereface(1.35), 0.7, 1.0) == pytest.approx(math.cos(1.35 * 0.7))


def test_maglinear_positive_ramp():
    spec = magface()
    # midpoint of [10, 110] gets the middle margin
    assert positive_modulation(spec, 1.0, 60.0) == pytest.approx(math.cos(1.0 + 0.625))
    # clamped outside the band
    assert positive_modulation(spec, 1.0, 500.0) == pytest.approx(math.cos(1.0 + 0.8))
    assert positive_modulation(spec, 1.0, 1.0) == pytest.approx(math.cos(1.0 + 0.45))


def test_adanorm_positive():
    bn = BatchNormState(mean=10.0, std=2.0)
    spec = adaface(0.4)
    # zhat = 0.5 -> m2 = -0.2, m3 = 0.6
    assert positive_modulation(spec, 1.0, 11.0, bn) == pytest.approx(math.cos(1.0 - 0.2) - 0.6)
    # zhat clipped to 1
    assert positive_modulation(spec, 1.0, 100.0, bn) == pytest.approx(math.cos(1.0 - 0.4) - 0.8)


def test_negative_identity():
    assert negative_modulation(arcface(), 0.3) == 0.3


def test_negative_mv_gated():
    spec = mv_arcface(t=1.2)
    assert negative_modulation(spec, 0.5, positive=0.1) == pytest.approx(0.8)
    # gate off: positive target already beats this class
    assert negative_modulation(spec, 0.5, positive=0.9) == 0.5


def test_negative_curricular_gated():
    spec = curricularface(t=0.0)
    assert negative_modulation(spec, 0.5, positive=0.1) == pytest.approx(0.25)
    assert negative_modulation(spec, 0.5, positive=0.6) == 0.5


def test_spec_validation():
    with pytest.raises(ValueError):
        MarginSpec(s=0.0)
    with pytest.raises(ValueError):
        MarginSpec(m2=Constant(2.0))
    with pytest.raises(ValueError):
        MarginSpec(m3=Constant(-0.1))
    with pytest.raises(ValueError):
        MarginSpec(m3=MagLinear())
    with pytest.raises(ValueError):
        MagLinear(l_a=5, u_a=5)


# -- probabilities and loss --------------------------------------------------


def test_probabilities_two_class():
    z, W = _geom([0.8, 0.1])
    P = class_probabilities(softmax_spec(s=1.0), z, 0, W)
    assert_allclose(P, [0.668187772168166, 0.331812227831834], rtol=1e-12)


def test_probabilities_single_class():
    z, W = _geom([0.3])
    assert_allclose(class_probabilities(arcface(), z, 0, W), [1.0])


def test_probabilities_symmetric():
    z, W = _geom([0.4, 0.4, 0.4])
    assert_allclose(class_probabilities(softmax_spec(), z, 1, W), [1 / 3] * 3, rtol=1e-12)


def test_loss_two_class():
    z, W = _geom([0.8, 0.1])
    per, mean = softmax_loss(softmax_spec(s=1.0), FeatureBatch([z], [0]), W)
    assert per[0] == pytest.approx(-math.log(0.668187772168166), rel=1e-12)
    # the reference figure is truncated to four decimals
    assert mean == pytest.approx(0.4031, abs=1e-4)


def test_loss_tends_to_zero_when_confident():
    z, W = _geom([0.99, -0.99])
    per, _ = softmax_loss(softmax_spec(s=64.0), FeatureBatch([z], [0]), W)
    assert 0.0 <= per[0] < 1e-50


SPECS = {
    "softmax": (softmax_spec(8.0), {}),
    "sphereface": (sphereface(1.35, 8.0), {"m1": 1.35}),
    "cosface": (cosface(0.35, 8.0), {"m3": 0.35}),
    "arcface": (arcface(0.5, 8.0), {"m2": 0.5}),
    "mv": (mv_arcface(0.5, 1.2, 8.0), {"m2": 0.5, "neg": "mv", "t": 1.2}),
    "curricular": (curricularface(0.5, 0.3, 8.0), {"m2": 0.5, "neg": "curricular", "t": 0.3}),
}


@pytest.mark.parametrize("name", sorted(SPECS))
def test_loss_matches_scalar_oracle(name, rng):
    spec, kw = SPECS[name]
    for _ in range(20):
        C, d = rng.integers(2, 7), rng.integers(2, 9)
        Z = rng.standard_normal((3, d))
        W = rng.standard_normal((C, d))
        labels = rng.integers(0, C, 3)
        fw = forward(spec, Z, labels, W)
        ref = [oracles.margin_loss(z, y, W, spec.s, **kw) for z, y in zip(Z, labels)]
        assert_allclose(fw.loss, ref, rtol=1e-10, atol=1e-12)


def test_arcface_loss_dominates_margin_free(rng):
    # holds whenever theta + m stays inside [0, pi]
    checked = 0
    for _ in range(200):
        C, d = rng.integers(2, 6), rng.integers(2, 8)
        z = rng.standard_normal(d)
        W = rng.standard_normal((C, d))
        y = int(rng.integers(C))
        theta = math.acos(oracles.cos_between(z, W[y]))
        if theta + 0.5 > math.pi:
            continue
        checked += 1
        a = forward(arcface(0.5, 16.0), z[None], [y], W).loss[0]
        b = forward(softmax_spec(16.0), z[None], [y], W).loss[0]
        assert a >= b - 1e-12
    assert checked > 100


# -- guidance value ----------------------------------------------------------


def test_guidance_two_class():
    z, W = _geom([1.0 - 1e-16, 0.0])
    assert guidance_value(z, 0, W, 1.0) == pytest.approx(math.e / (math.e + 1), rel=1e-12)


def test_guidance_equidistant():
    z, W = _geom([0.2] * 5)
    assert guidance_value(z, 3, W, 64.0) == pytest.approx(0.2, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_guidance_bounded_and_matches_oracle(seed):
    r = np.random.default_rng(seed)
    C, d = int(r.integers(2, 9)), int(r.integers(2, 17))
    z = r.standard_normal(d)
    W = r.standard_normal((C, d))
    y = int(r.integers(C))
    p = guidance_value(z, y, W, 16.0)
    assert 0.0 < p < 1.0
    assert p == pytest.approx(oracles.guidance(z, y, W, 16.0), rel=1e-10)


def test_guidance_ignores_margins(rng):
    Z = rng.standard_normal((4, 5))
    W = rng.standard_normal((3, 5))
    labels = [0, 1, 2, 0]
    p = guidance_values(Z, labels, W, 32.0)
    P = forward(softmax_spec(32.0), Z, labels, W).probs[np.arange(4), labels]
    assert_allclose(p, P, rtol=1e-13)


# -- taxonomy ----------------------------------------------------------------


@pytest.mark.parametrize(
    "spec, reg, expected",
    [
        (arcface(), False, StrategyClass.CONSTANT_MARGIN),
        (cosface(), False, StrategyClass.CONSTANT_MARGIN),
        (magface(), True, StrategyClass.SOFT_MARGIN_MVP),
        (adaface(), False, StrategyClass.SOFT_MARGIN_NO_MVP),
        (qcface(), True, StrategyClass.HARD_MARGIN),
    ],
)
def test_classify(spec, reg, expected):
    assert classify_margin_strategy(spec, reg) is expected


def test_arcface_form():
    spec = MarginSpec(m1=1.0, m2=MagLinear(), m3=AdaNorm(), s=8.0, neg=Curricular(0.2))
    w = spec.arcface_form()
    assert w == MarginSpec(1.0, Constant(0.5), Constant(0.0), 8.0, Identity())
    assert mv_arcface().arcface_form() == arcface()
    assert isinstance(mv_arcface().neg, MVSoftmax)


def test_resolve_margins_detach():
    bn = BatchNormState(mean=10.0, std=2.0)
    z = np.array([11.0])
    assert resolve_margins(adaface(detach=True), z, bn).dm2[0] == 0.0
    assert resolve_margins(adaface(detach=False), z, bn).dm2[0] == pytest.approx(-0.4 / 2.0)
