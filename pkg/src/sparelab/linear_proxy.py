"""Linear model on the transformed input psi(x) that tracks the network early in training.

    psi(x) = [ sqrt(2/d) zeta x ;  sqrt(3/(2d)) nu ;  theta0 + theta1 r + theta2 r^2 ],
    r = ||x|| / sqrt(d) - 1

with Gaussian moments of the activation (g ~ N(0, 1)):
    zeta = E[phi'(g)], theta0 = E[phi(g)], theta1 = E[g phi'(g)],
    theta2 = E[(g^3/2 - g) phi'(g)], nu = theta1 * sqrt(Tr[Sigma^2] / d).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import roots_genlaguerre, roots_laguerre

from .model import Activation, TrainTrace, TwoLayerNet, forward

N_NODES = 128


@dataclass(frozen=True)
class PsiConstants:
    zeta: float
    nu: float
    theta0: float
    theta1: float
    theta2: float


def _moment_integrands(phi, dphi):
    return {
        "zeta": lambda g: dphi(g),
        "theta0": lambda g: phi(g),
        "theta1": lambda g: g * dphi(g),
        "theta2": lambda g: (0.5 * g**3 - g) * dphi(g),
    }


def _gauss_expectation(f, nodes=N_NODES) -> float:
    x, w = hermegauss(nodes)
    return float(np.sum(w * f(x)) / math.sqrt(2 * math.pi))


def _half_line_expectation(f, nodes=N_NODES) -> float:
    """E[f(g); g > 0] for f analytic on the whole line.

    f is split into even and odd parts; with u = x^2/2 each part becomes a
    generalized Gauss-Laguerre integral, exact when f is a polynomial.
    """
    ue, we = roots_genlaguerre(nodes, -0.5)
    uo, wo = roots_laguerre(nodes)
    xe, xo = np.sqrt(2 * ue), np.sqrt(2 * uo)
    even = np.sum(we * 0.5 * (f(xe) + f(-xe))) / math.sqrt(2)
    odd = np.sum(wo * 0.5 * (f(xo) - f(-xo)) / xo)
    return float((even + odd) / math.sqrt(2 * math.pi))


def activation_constants(activation, trace_term: float = 1.0, nodes: int = N_NODES) -> PsiConstants:
    """Gaussian moments of the activation; ``trace_term`` is sqrt(Tr[Sigma^2]/d)."""
    act = Activation.parse(activation)
    if act.piecewise_linear:
        slope_neg = act.a if act.name == "leaky" else 0.0
        pos = _moment_integrands(lambda u: u, lambda u: np.ones_like(u))
        neg = _moment_integrands(lambda u: slope_neg * u, lambda u: np.full_like(u, slope_neg))
        vals = {k: _half_line_expectation(pos[k], nodes) + _half_line_expectation(lambda u, f=neg[k]: f(-u), nodes)
                for k in pos}
    else:
        fs = _moment_integrands(act.phi, act.dphi)
        vals = {k: _gauss_expectation(f, nodes) for k, f in fs.items()}
    return PsiConstants(vals["zeta"], vals["theta1"] * trace_term, vals["theta0"], vals["theta1"], vals["theta2"])


def data_trace_term(X: np.ndarray) -> float:
    """sqrt(Tr[Sigma^2] / d) with Sigma the sample covariance of the rows of X."""
    Xc = X - X.mean(axis=0)
    S = Xc.T @ Xc / len(X)
    return math.sqrt(float(np.sum(S * S)) / X.shape[1])


def constants_for(activation, X: np.ndarray) -> PsiConstants:
    return activation_constants(activation, data_trace_term(X))


def psi(x: np.ndarray, constants: PsiConstants, include_bias: bool = True) -> np.ndarray:
    """Transformed input, (d+2) entries (d+1 without the bias entry)."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    d = X.shape[1]
    r = np.linalg.norm(X, axis=1) / math.sqrt(d) - 1.0
    cols = [math.sqrt(2.0 / d) * constants.zeta * X]
    if include_bias:
        cols.append(np.full((len(X), 1), math.sqrt(1.5 / d) * constants.nu))
    cols.append((constants.theta0 + constants.theta1 * r + constants.theta2 * r**2)[:, None])
    out = np.hstack(cols)
    return out[0] if np.ndim(x) == 1 else out


design_matrix = psi


@dataclass
class LinearModel:
    beta_data: np.ndarray
    beta_bias: float = 0.0
    beta_norm: float = 0.0
    include_bias: bool = True

    @classmethod
    def zeros(cls, d: int, include_bias: bool = True) -> "LinearModel":
        return cls(np.zeros(d), 0.0, 0.0, include_bias)

    @classmethod
    def from_vector(cls, beta: np.ndarray, include_bias: bool = True) -> "LinearModel":
        if include_bias:
            return cls(beta[:-2].copy(), float(beta[-2]), float(beta[-1]), True)
        return cls(beta[:-1].copy(), 0.0, float(beta[-1]), False)

    def vector(self) -> np.ndarray:
        tail = [self.beta_bias, self.beta_norm] if self.include_bias else [self.beta_norm]
        return np.concatenate([self.beta_data, tail])


def linear_forward(model: LinearModel, x: np.ndarray, constants: PsiConstants):
    return psi(x, constants, model.include_bias) @ model.vector()


def linear_gd_step(model: LinearModel, X, y, eta: float, constants: PsiConstants) -> LinearModel:
    """beta <- beta - (eta/n) Psi^T (Psi beta - y)."""
    P = psi(X, constants, model.include_bias)
    beta = model.vector()
    beta = beta - eta / len(P) * P.T @ (P @ beta - np.asarray(y, float))
    return LinearModel.from_vector(beta, model.include_bias)


def train_linear(X, y, constants: PsiConstants, eta: float, steps: int, include_bias: bool = True,
                 record_every: int = 1, record_outputs: bool = True, callback=None):
    """Full-batch GD on the linear model from beta = 0, with a trace like the network's."""
    P = psi(np.asarray(X, float), constants, include_bias)
    y = np.asarray(y, float)
    beta = np.zeros(P.shape[1])
    trace = TrainTrace()
    n = len(P)
    for t in range(steps + 1):
        if t % record_every == 0:
            out = P @ beta
            trace.add(t, float(0.5 * np.mean((out - y) ** 2)), out.copy() if record_outputs else None)
            if callback is not None:
                callback(t, LinearModel.from_vector(beta, include_bias))
        if t < steps:
            beta = beta - eta / n * (P.T @ (P @ beta - y))
    return LinearModel.from_vector(beta, include_bias), trace


def linear_closed_form(X, y, constants: PsiConstants, include_bias: bool = True, rcond: float = 1e-10) -> LinearModel:
    """Minimum-norm least squares (Psi^T Psi)^+ Psi^T y via a truncated SVD."""
    P = psi(np.asarray(X, float), constants, include_bias)
    U, s, Vt = np.linalg.svd(P, full_matrices=False)
    keep = s > rcond * s[0]
    beta = Vt[keep].T @ ((U[:, keep].T @ np.asarray(y, float)) / s[keep])
    return LinearModel.from_vector(beta, include_bias)


def coupling_gap(net_trace: TrainTrace, linear_trace: TrainTrace) -> np.ndarray:
    """(1/n) sum_i (f_lin(x_i) - f(x_i))^2 at every recorded step."""
    if net_trace.steps != linear_trace.steps:
        raise ValueError("network and linear traces were recorded at different steps")
    if not net_trace.outputs or not linear_trace.outputs:
        raise ValueError("both traces need recorded outputs")
    return np.array([float(np.mean((np.ravel(a) - np.ravel(b)) ** 2))
                     for a, b in zip(net_trace.outputs, linear_trace.outputs)])


def feature_gap(net: TwoLayerNet, model: LinearModel, features: dict[str, np.ndarray],
                constants: PsiConstants) -> dict[str, float]:
    """|f_lin(v) - f(v)| with each isolated feature vector as input."""
    return {k: float(abs(linear_forward(model, v, constants) - forward(net, v)[0])) for k, v in features.items()}
