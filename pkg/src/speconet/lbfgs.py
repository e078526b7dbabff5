"""
Limited-memory BFGS with a strong-Wolfe line search.

The search direction comes from the two-loop recursion over the last ``m``
curvature pairs; step lengths satisfy the strong Wolfe conditions found by
bracketing and cubic-interpolation zoom.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class LbfgsOptions:
    history_size: int = 10
    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    plateau_tolerance: float = 1e-6
    plateau_window: int = 20
    c1: float = 1e-4
    c2: float = 0.9
    max_bracket: int = 25
    max_zoom: int = 30
    max_failures: int = 3

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.history_size < 1:
            raise ValueError("history_size must be >= 1")


@dataclass
class LbfgsTrace:
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    best_losses: list = field(default_factory=list)
    evaluations: int = 0
    fallbacks: int = 0
    reason: str = ""


class LineSearchError(RuntimeError):
    pass


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolating (a, fa, da), (b, fb, db), or None."""
    d1 = da + db - 3 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    t = b - (b - a) * (db + d2 - d1) / (db - da + 2 * d2)
    return t


def strong_wolfe(phi, f0, g0, step0, opts: LbfgsOptions):
    """Step length satisfying the strong Wolfe conditions.

    ``phi(a)`` returns (f, df/da, payload). Returns (a, f, payload).
    """
    if g0 >= 0:
        raise LineSearchError("not a descent direction")
    a_prev, f_prev, d_prev = 0.0, f0, g0
    a = step0
    for i in range(opts.max_bracket):
        f, d, pay = phi(a)
        if not np.isfinite(f) or f > f0 + opts.c1 * a * g0 or (i > 0 and f >= f_prev):
            return _zoom(phi, f0, g0, a_prev, f_prev, d_prev, a, f, d, opts)
        if abs(d) <= -opts.c2 * g0:
            return a, f, pay
        if d >= 0:
            return _zoom(phi, f0, g0, a, f, d, a_prev, f_prev, d_prev, opts)
        a_prev, f_prev, d_prev = a, f, d
        a = 2.0 * a
    raise LineSearchError("bracketing failed")


def _zoom(phi, f0, g0, lo, flo, dlo, hi, fhi, dhi, opts):
    best = None
    for _ in range(opts.max_zoom):
        t = None
        if np.isfinite(fhi) and np.isfinite(dhi):
            t = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
        left, right = min(lo, hi), max(lo, hi)
        width = right - left
        if t is None or not np.isfinite(t) or t < left + 0.1 * width or t > right - 0.1 * width:
            t = 0.5 * (lo + hi)
        f, d, pay = phi(t)
        if np.isfinite(f) and f < f0 and (best is None or f < best[1]):
            best = (t, f, pay)
        if not np.isfinite(f) or f > f0 + opts.c1 * t * g0 or f >= flo:
            hi, fhi, dhi = t, f, d
        else:
            if abs(d) <= -opts.c2 * g0:
                return t, f, pay
            if d * (hi - lo) >= 0:
                hi, fhi, dhi = lo, flo, dlo
            lo, flo, dlo = t, f, d
        if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
            break
    if best is not None:
        # sufficient decrease without the curvature condition
        return best
    raise LineSearchError("zoom failed")


def lbfgs_minimize(objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
                   x0: np.ndarray, opts: LbfgsOptions | None = None,
                   callback: Callable | None = None):
    """Minimize ``objective`` from ``x0``.

    ``objective(x)`` returns (f, grad). ``callback(iteration, f, gnorm)`` is
    invoked after every accepted iterate. Returns (x_best, trace).
    """
    opts = opts or LbfgsOptions()
    x = np.array(x0, dtype=float)
    f, g = objective(x)
    trace = LbfgsTrace(evaluations=1)
    best_x, best_f = x.copy(), f
    gn = float(np.linalg.norm(g))
    trace.losses.append(f)
    trace.grad_norms.append(gn)
    trace.best_losses.append(best_f)
    if callback:
        callback(0, f, gn)
    if not np.isfinite(f):
        trace.reason = "non-finite initial loss"
        return best_x, trace
    if gn <= opts.gradient_tolerance:
        trace.reason = "gradient tolerance"
        return best_x, trace
    S, Y, R = deque(maxlen=opts.history_size), deque(maxlen=opts.history_size), deque(maxlen=opts.history_size)
    failures = 0
    for it in range(1, opts.max_iterations + 1):
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(S), reversed(Y), reversed(R)):
            a = rho * s.dot(q)
            alphas.append(a)
            q -= a * y
        if S:
            gamma = S[-1].dot(Y[-1]) / Y[-1].dot(Y[-1])
        else:
            gamma = 1.0 / max(gn, 1e-300)
        r = gamma * q
        for (s, y, rho), a in zip(zip(S, Y, R), reversed(alphas)):
            b = rho * y.dot(r)
            r += (a - b) * s
        p = -r
        dg = g.dot(p)
        if dg >= 0:
            S.clear(); Y.clear(); R.clear()
            p = -g / max(gn, 1e-300)
            dg = g.dot(p)

        def phi(a, p=p):
            xa = x + a * p
            fa, ga = objective(xa)
            trace.evaluations += 1
            return fa, float(ga.dot(p)), (xa, ga)

        try:
            a, f_new, (x_new, g_new) = strong_wolfe(phi, f, dg, 1.0, opts)
        except LineSearchError:
            # steepest descent with halving
            trace.fallbacks += 1
            failures += 1
            S.clear(); Y.clear(); R.clear()
            step = 1.0 / max(gn, 1e-300) * max(abs(f), 1e-12)
            accepted = False
            for _ in range(40):
                x_try = x - step * g
                f_try, g_try = objective(x_try)
                trace.evaluations += 1
                if np.isfinite(f_try) and f_try < f:
                    x_new, f_new, g_new = x_try, f_try, g_try
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                if failures >= opts.max_failures:
                    trace.reason = "line search failed repeatedly"
                    break
                continue
        s = x_new - x
        y = g_new - g
        sy = s.dot(y)
        if sy > 1e-12 * np.sqrt(s.dot(s) * y.dot(y)):
            S.append(s); Y.append(y); R.append(1.0 / sy)
        x, f, g = x_new, f_new, g_new
        gn = float(np.linalg.norm(g))
        if f < best_f:
            best_f, best_x = f, x.copy()
        trace.losses.append(f)
        trace.grad_norms.append(gn)
        trace.best_losses.append(best_f)
        if callback:
            callback(it, f, gn)
        if gn <= opts.gradient_tolerance:
            trace.reason = "gradient tolerance"
            break
        w = opts.plateau_window
        if len(trace.losses) > w:
            old = trace.best_losses[-w - 1]
            if abs(old - best_f) <= opts.plateau_tolerance * max(abs(old), 1e-300):
                trace.reason = "plateau"
                break
    else:
        trace.reason = "iteration budget"
    return best_x, trace
