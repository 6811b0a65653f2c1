"""First-order and quasi-Newton optimizers on flat numpy vectors."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from choicekit.errors import LineSearchFailed


def gd_update(theta, grad, lr):
    return theta - lr * grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kwargs) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kwargs)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_update(state: AdamState, theta, grad, lr):
    """One Adam step with bias-corrected moments; updates ``state`` in place."""
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def _cubic_min(x1, f1, g1, x2, f2, g2, lo, hi):
    """Minimizer of the cubic interpolating two points, clipped to [lo, hi]."""
    d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2)
    sq = d1 * d1 - g1 * g2
    if sq >= 0:
        d2 = np.sqrt(sq)
        if x1 <= x2:
            t = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        else:
            t = x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        if np.isfinite(t):
            return min(max(t, lo), hi)
    return 0.5 * (lo + hi)


def strong_wolfe(fg, x, f0, g0, d, t0=1.0, c1=1e-4, c2=0.9, max_evals=25):
    """Step length satisfying the strong Wolfe conditions along ``d``.

    Returns ``(t, f, g, evals)``.  Raises :class:`LineSearchFailed` when no
    point with sufficient decrease is found within ``max_evals`` evaluations.
    """
    gtd0 = float(g0 @ d)
    if gtd0 >= 0:
        raise LineSearchFailed("search direction is not a descent direction")
    t_prev, f_prev, g_prev, gtd_prev = 0.0, f0, g0, gtd0
    t = t0
    evals = 0
    best = None

    def note(t_, f_, g_):
        nonlocal best
        if f_ <= f0 + c1 * t_ * gtd0 and (best is None or f_ < best[1]):
            best = (t_, f_, g_)

    bracket = None
    while evals < max_evals:
        f_new, g_new = fg(x + t * d)
        evals += 1
        if not np.isfinite(f_new):
            # shrink toward the last finite point
            t = t_prev + 0.5 * (t - t_prev)
            continue
        gtd_new = float(g_new @ d)
        note(t, f_new, g_new)
        if f_new > f0 + c1 * t * gtd0 or (evals > 1 and f_new >= f_prev):
            bracket = [(t_prev, f_prev, g_prev, gtd_prev), (t, f_new, g_new, gtd_new)]
            break
        if abs(gtd_new) <= -c2 * gtd0:
            return t, f_new, g_new, evals
        if gtd_new >= 0:
            bracket = [(t, f_new, g_new, gtd_new), (t_prev, f_prev, g_prev, gtd_prev)]
            break
        lo, hi = t + 0.01 * (t - t_prev), 10.0 * t
        t_next = _cubic_min(t_prev, f_prev, gtd_prev, t, f_new, gtd_new, lo, hi)
        t_prev, f_prev, g_prev, gtd_prev = t, f_new, g_new, gtd_new
        t = t_next

    if bracket is not None:
        lo_pt, hi_pt = bracket
        while evals < max_evals:
            (t_lo, f_lo, g_lo, gtd_lo), (t_hi, f_hi, g_hi, gtd_hi) = lo_pt, hi_pt
            a, b = min(t_lo, t_hi), max(t_lo, t_hi)
            if b - a < 1e-12 * max(1.0, b):
                break
            t = _cubic_min(t_lo, f_lo, gtd_lo, t_hi, f_hi, gtd_hi, a, b)
            # keep the trial away from the bracket ends
            margin = 0.1 * (b - a)
            t = min(max(t, a + margin), b - margin)
            f_new, g_new = fg(x + t * d)
            evals += 1
            if not np.isfinite(f_new):
                hi_pt = (t, np.inf, g_hi, gtd_hi)
                continue
            gtd_new = float(g_new @ d)
            note(t, f_new, g_new)
            if f_new > f0 + c1 * t * gtd0 or f_new >= f_lo:
                hi_pt = (t, f_new, g_new, gtd_new)
            else:
                if abs(gtd_new) <= -c2 * gtd0:
                    return t, f_new, g_new, evals
                if gtd_new * (t_hi - t_lo) >= 0:
                    hi_pt = lo_pt
                lo_pt = (t, f_new, g_new, gtd_new)

    if best is not None and best[1] < f0:
        return best[0], best[1], best[2], evals
    raise LineSearchFailed(f"no sufficient decrease after {evals} evaluations")


@dataclass
class LBFGS:
    """Limited-memory BFGS driven one iteration at a time.

    ``fg(theta) -> (value, gradient)``.  The first trial step is
    ``lr * min(1, 1/||g||_1)``; later iterations start from a unit step.
    When the curvature pair is unusable or the line search fails, the
    memory is cleared and a steepest-descent step is tried instead.
    """

    fg: object
    theta: np.ndarray
    lr: float = 1.0
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_evals: int = 25
    f: float = field(init=False)
    g: np.ndarray = field(init=False)
    evals: int = field(init=False, default=0)
    iterations: int = field(init=False, default=0)

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=np.float64, copy=True)
        self.f, self.g = self.fg(self.theta)
        self.evals = 1
        self._s = deque(maxlen=self.memory)
        self._y = deque(maxlen=self.memory)

    def reset(self, theta=None, f=None, g=None):
        if theta is not None:
            self.theta = np.array(theta, dtype=np.float64, copy=True)
            if f is None:
                f, g = self.fg(self.theta)
                self.evals += 1
            self.f, self.g = f, g
        self._s.clear()
        self._y.clear()

    def direction(self):
        q = -self.g.copy()
        if not self._s:
            return q
        alphas = []
        for s, y in zip(reversed(self._s), reversed(self._y)):
            rho = 1.0 / float(y @ s)
            a = rho * float(s @ q)
            alphas.append((rho, a))
            q -= a * y
        s, y = self._s[-1], self._y[-1]
        q *= float(s @ y) / float(y @ y)
        for (s, y), (rho, a) in zip(zip(self._s, self._y), reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        return q

    def _first_step(self):
        return self.lr * min(1.0, 1.0 / max(np.abs(self.g).sum(), 1e-300))

    def step(self):
        """Run one iteration; returns ``(theta, f, g)``."""
        d = self.direction()
        steepest = not self._s
        if float(self.g @ d) >= 0:
            self.reset()
            d, steepest = -self.g, True
        t0 = self._first_step() if steepest else 1.0
        try:
            t, f_new, g_new, n = strong_wolfe(self.fg, self.theta, self.f, self.g, d,
                                              t0, self.c1, self.c2, self.max_evals)
        except LineSearchFailed:
            self.evals += self.max_evals
            if steepest:
                raise
            self.reset()
            d = -self.g
            t, f_new, g_new, n = strong_wolfe(self.fg, self.theta, self.f, self.g, d,
                                              self._first_step(), self.c1, self.c2,
                                              self.max_evals)
        self.evals += n
        s = t * d
        y = g_new - self.g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            self._s.append(s)
            self._y.append(y)
        else:
            self.reset()
        self.theta = self.theta + s
        self.f, self.g = f_new, g_new
        self.iterations += 1
        return self.theta, self.f, self.g


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    nit: int
    nfev: int
    converged: bool


def lbfgs_minimize(f, grad, theta0, max_iter=100, gtol=1e-8, memory=10, lr=1.0,
                   c1=1e-4, c2=0.9) -> MinimizeResult:
    """Minimize ``f`` with L-BFGS until ``||grad||_inf <= gtol``.

    Stops early, unconverged, if the line search can no longer decrease ``f``.
    """
    opt = LBFGS(lambda th: (f(th), grad(th)), theta0, lr=lr, memory=memory, c1=c1, c2=c2)
    converged = np.max(np.abs(opt.g)) <= gtol
    while not converged and opt.iterations < max_iter:
        try:
            opt.step()
        except LineSearchFailed:
            # no representable decrease left; report whatever tolerance was reached
            break
        converged = np.max(np.abs(opt.g)) <= gtol
    return MinimizeResult(opt.theta.copy(), float(opt.f), opt.g.copy(), opt.iterations,
                          opt.evals, bool(converged))
