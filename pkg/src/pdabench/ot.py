"""Entropic optimal transport: balanced, KL-unbalanced and partial (dummy point) solvers.

All solvers work on dual potentials in the log domain, so costs far larger
than the regularization (e.g. ``eps = 1e-3``) do not underflow.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import TOL, ConfigError

log = logging.getLogger(__name__)


@dataclass
class TransportPlan:
    pi: np.ndarray
    a: np.ndarray
    b: np.ndarray
    converged: bool
    iterations_used: int
    dual_history: list = field(default_factory=list, repr=False)

    @property
    def transported_mass(self):
        return float(self.pi.sum())


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _check(C, a, b):
    C = np.asarray(C, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if C.ndim != 2 or C.shape != (a.size, b.size):
        raise ConfigError(f"cost {C.shape} does not match masses ({a.size}, {b.size})")
    if np.any(a <= 0) or np.any(b <= 0):
        raise ConfigError("masses must be strictly positive")
    return C, a, b


def _plan(f, g, C, eps):
    return np.exp((f[:, None] + g[None, :] - C) / eps)


def balanced_dual(f, g, C, a, b, eps):
    return float(f @ a + g @ b - eps * _plan(f, g, C, eps).sum())


def sinkhorn(C, a, b, eps, max_iter=10_000, tol=TOL.ot_tol, track=False):
    """Entropic OT with exact marginals: ``min <C, pi> + eps * sum pi (log pi - 1)``.

    Alternates exact maximization of the dual in ``f`` and ``g``; stops once
    the row-marginal violation (columns are exact after each sweep) is at most
    ``tol`` in the max norm.
    """
    C, a, b = _check(C, a, b)
    if eps <= 0:
        raise ConfigError("eps must be > 0")
    if abs(a.sum() - b.sum()) > 1e-9:
        raise ConfigError("balanced transport needs equal total masses")
    la, lb = np.log(a), np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    hist = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f = eps * (la - _lse((g[None, :] - C) / eps, axis=1))
        g = eps * (lb - _lse((f[:, None] - C) / eps, axis=0))
        if track:
            hist.append(balanced_dual(f, g, C, a, b, eps))
        pi = _plan(f, g, C, eps)
        if np.max(np.abs(pi.sum(axis=1) - a)) <= tol:
            converged = True
            break
    return TransportPlan(_plan(f, g, C, eps), a, b, converged, it, hist)


def uot_objective(pi, C, a, b, tau, eta):
    """``<C,pi> + tau sum pi (log pi - 1) + eta [KL(pi 1 | a) + KL(pi^T 1 | b)]``."""
    pi = np.asarray(pi, dtype=np.float64)

    def xlogx(x):
        return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)

    def kl(x, y):
        return float((xlogx(x) - x * np.log(y) - x + y).sum())

    ent = float((xlogx(pi) - pi).sum())
    return float((C * pi).sum()) + tau * ent + eta * (kl(pi.sum(1), a) + kl(pi.sum(0), b))


def uot_dual(f, g, C, a, b, tau, eta):
    return float(-eta * (a @ (np.exp(-f / eta) - 1.0)) - eta * (b @ (np.exp(-g / eta) - 1.0))
                 - tau * _plan(f, g, C, tau).sum())


def _scaling_change(old, new, tau):
    lo, ln = old / tau, new / tau
    top = max(lo.max(), ln.max(), 0.0)
    num = np.max(np.abs(np.exp(ln - top) - np.exp(lo - top)))
    return float(num / max(np.exp(lo.max() - top), np.exp(ln.max() - top), np.exp(-top)))


def sinkhorn_uot(C, a, b, tau, eta3, max_iter=10_000, tol=TOL.ot_tol, track=False):
    """Entropic transport with KL-penalized marginals.

    Solves ``min <C,pi> + tau sum pi (log pi - 1) + eta3 [KL(pi 1|a) + KL(pi^T 1|b)]``.
    Each dual update is the balanced one damped by ``eta3 / (eta3 + tau)``,
    followed by the closed-form shift of ``(f, g)`` that maximizes the dual;
    iteration stops when the scalings ``u = exp(f / tau)``, ``v = exp(g / tau)``
    change by at most ``tol`` relative to their largest entry
    (``max|u - u'| / max(max u, max u', 1)``, evaluated in the log domain).
    """
    C, a, b = _check(C, a, b)
    if tau <= 0 or eta3 <= 0:
        raise ConfigError("tau and eta3 must be > 0")
    k = eta3 / (eta3 + tau)
    la, lb = np.log(a), np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    hist = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f_new = k * tau * (la - _lse((g[None, :] - C) / tau, axis=1))
        g_new = k * tau * (lb - _lse((f_new[:, None] - C) / tau, axis=0))
        # exact dual ascent along (f + c, g - c), which leaves the plan unchanged;
        # without it this mode contracts only by (eta3 / (eta3 + tau))^2 per sweep
        c = 0.5 * eta3 * (_lse(la - f_new / eta3, 0) - _lse(lb - g_new / eta3, 0))
        f_new, g_new = f_new + c, g_new - c
        change = max(_scaling_change(f, f_new, tau), _scaling_change(g, g_new, tau))
        f, g = f_new, g_new
        if track:
            hist.append(uot_dual(f, g, C, a, b, tau, eta3))
        if change <= tol:
            converged = True
            break
    return TransportPlan(_plan(f, g, C, tau), a, b, converged, it, hist)


def partial_ot_entropic(C, a, b, m, eps, max_iter=10_000, tol=TOL.ot_tol):
    """Entropic partial transport of total mass ``m`` via one dummy row and column.

    The cost is padded with a zero-cost dummy row and column, masses are
    extended by ``1 - m`` each, the dummy-dummy corner is forbidden, the
    balanced problem is solved and the dummies are cropped off.
    """
    C, a, b = _check(C, a, b)
    if not 0 < m <= 1:
        raise ConfigError("mass fraction must lie in (0, 1]")
    if abs(a.sum() - 1) > 1e-9 or abs(b.sum() - 1) > 1e-9:
        raise ConfigError("partial transport expects unit total masses")
    if m == 1:
        return sinkhorn(C, a, b, eps, max_iter, tol)
    n, k = C.shape
    big = np.zeros((n + 1, k + 1))
    big[:n, :k] = C
    big[n, k] = np.inf
    plan = sinkhorn(big, np.append(a, 1.0 - m), np.append(b, 1.0 - m), eps, max_iter, tol)
    return TransportPlan(plan.pi[:n, :k].copy(), a, b, plan.converged, plan.iterations_used)


def uot_convex_oracle(C, a, b, tau, eta3, grad_tol=1e-8, max_iter=500):
    """Brute-force minimizer of the unbalanced objective, for validating ``sinkhorn_uot``.

    Damped Newton on the entries of ``pi`` with a dense Hessian, steps shrunk
    until they stay inside ``pi > 0`` and satisfy an Armijo decrease (or shrink the gradient); runs
    until the gradient norm is below ``grad_tol``. Limited to ``n * m <= 25``.
    """
    C, a, b = _check(C, a, b)
    if C.size > 25:
        raise ConfigError("convex oracle is capped at n*m <= 25 entries")
    n, m = C.shape
    rows = np.kron(np.eye(n), np.ones((1, m)))  # (n, n*m): row sums
    cols = np.kron(np.ones((1, n)), np.eye(m))  # (m, n*m): column sums

    def grad(p):
        r, c = p.sum(1), p.sum(0)
        return (C + tau * np.log(p) + eta3 * np.log(r / a)[:, None]
                + eta3 * np.log(c / b)[None, :])

    def hess(p):
        r, c = p.sum(1), p.sum(0)
        return (tau * np.diag(1.0 / p.ravel()) + eta3 * rows.T @ np.diag(1.0 / r) @ rows
                + eta3 * cols.T @ np.diag(1.0 / c) @ cols)

    p = np.outer(a, b)
    obj = uot_objective(p, C, a, b, tau, eta3)
    gp = grad(p)
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(gp) < grad_tol:
            break
        d = -np.linalg.solve(hess(p), gp.ravel()).reshape(n, m)
        step = 1.0
        neg = d < 0
        if neg.any():
            step = min(1.0, 0.99 * float(np.min(-p[neg] / d[neg])))
        while True:
            q = p + step * d
            oq = uot_objective(q, C, a, b, tau, eta3)
            gq = grad(q)
            # near the optimum objective changes drop below rounding; accept on |grad|
            if (oq <= obj + 1e-4 * step * float((gp * d).sum())
                    or np.linalg.norm(gq) < np.linalg.norm(gp) or step < 1e-12):
                break
            step *= 0.5
        p, obj, gp = q, oq, gq
    else:
        log.warning("convex oracle stopped at max_iter with |grad|=%.3g", np.linalg.norm(gp))
    return TransportPlan(p, a, b, bool(np.linalg.norm(gp) < grad_tol), it)
