import math

import numpy as np
import pytest

from sparelab.datagen import build_binary_dataset
from sparelab.linear_proxy import (LinearModel, PsiConstants, activation_constants, coupling_gap,
                                   data_trace_term, linear_closed_form, linear_forward, linear_gd_step, psi,
                                   train_linear)
from sparelab.model import Activation, TrainTrace


def monte_carlo_constants(name, n=2_000_000, seed=0):
    g = np.random.default_rng(seed).standard_normal(n)
    act = Activation.parse(name)
    d = act.dphi(g)
    return {"zeta": d.mean(), "theta0": act.phi(g).mean(), "theta1": (g * d).mean(),
            "theta2": ((0.5 * g**3 - g) * d).mean()}


def test_relu_constants_closed_form():
    c = activation_constants("relu")
    assert abs(c.zeta - 0.5) <= 1e-10
    assert abs(c.theta0 - 1 / math.sqrt(2 * math.pi)) <= 1e-10
    assert abs(c.theta1 - 1 / math.sqrt(2 * math.pi)) <= 1e-10
    assert abs(c.theta2) <= 1e-10


@pytest.mark.parametrize("name", ["relu", "leaky(0.1)", "tanh", "erf", "softplus"])
def test_constants_match_monte_carlo(name):
    c = activation_constants(name)
    mc = monte_carlo_constants(name)
    for k in mc:
        assert getattr(c, k) == pytest.approx(mc[k], abs=5e-3), k


def test_other_closed_forms():
    assert activation_constants("leaky(0.1)").zeta == pytest.approx(0.55, abs=1e-12)
    ident = activation_constants("identity")
    assert ident.zeta == pytest.approx(1.0) and abs(ident.theta1) < 1e-12
    assert activation_constants("erf").zeta == pytest.approx(2 / math.sqrt(3 * math.pi), abs=1e-10)


def test_nu_uses_trace_term():
    X = np.random.default_rng(0).standard_normal((500, 8))
    t = data_trace_term(X)
    Xc = X - X.mean(0)
    S = Xc.T @ Xc / len(X)
    assert t == pytest.approx(math.sqrt(np.trace(S @ S) / 8))
    assert activation_constants("relu", t).nu == pytest.approx(activation_constants("relu").theta1 * t)


def test_psi_layout():
    c = PsiConstants(0.5, 0.3, 0.4, 0.4, 0.0)
    x = np.array([1.0, 2.0, 2.0, 0.0])
    p = psi(x, c)
    assert p.shape == (6,)
    np.testing.assert_allclose(p[:4], math.sqrt(2 / 4) * 0.5 * x)
    assert p[4] == pytest.approx(math.sqrt(1.5 / 4) * 0.3)
    r = 3.0 / 2.0 - 1.0
    assert p[5] == pytest.approx(0.4 + 0.4 * r)
    assert psi(x, c, include_bias=False).shape == (5,)


def test_gd_step_formula_and_convergence():
    ds = build_binary_dataset(d=10, majority=30, minority=5, ambient_sigma=1.0, seed=0)
    c = activation_constants("relu", data_trace_term(ds.X))
    y = ds.y.astype(float)
    mdl = linear_gd_step(LinearModel.zeros(10), ds.X, y, 0.5, c)
    P = psi(ds.X, c)
    np.testing.assert_allclose(mdl.vector(), 0.5 / len(P) * P.T @ y)


def test_gd_converges_to_closed_form():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((60, 5))
    y = np.sign(X[:, 0] + 0.3 * rng.standard_normal(60))
    c = activation_constants("relu", data_trace_term(X))
    P = psi(X, c)
    lam = np.linalg.eigvalsh(P.T @ P / len(P))
    eta = 1.0 / lam[-1]
    steps = int(40 * lam[-1] / lam[0])
    final, _ = train_linear(X, y, c, eta=eta, steps=steps, record_every=steps, record_outputs=False)
    star = linear_closed_form(X, y, c)
    np.testing.assert_allclose(final.vector(), star.vector(), atol=1e-8)


def test_coupling_gap_validation():
    a, b = TrainTrace(), TrainTrace()
    a.add(0, 0.0, np.zeros(3))
    b.add(1, 0.0, np.zeros(3))
    with pytest.raises(ValueError):
        coupling_gap(a, b)
    b2 = TrainTrace()
    b2.add(0, 0.0, np.ones(3))
    assert coupling_gap(a, b2).tolist() == [1.0]
