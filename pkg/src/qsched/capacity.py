"""Stationary capacity region: maximum traffic slackness and workload scaling.

The slackness problem

    max delta  s.t.  sum_i alpha[i, j] <= 1             for every server j
                     sum_j alpha[i, j] mu[i, j] >= lam[i] + delta  for every type i
                     alpha >= 0

is solved directly with a dense tableau simplex. Writing delta = d - L with
L = max(lam) makes every right-hand side nonnegative, so the slack basis is
feasible and no phase one is needed.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, InfeasibleTarget

PIVOT_TOL = 1e-9


class UnboundedError(ArithmeticError):
    """The linear program has no finite optimum."""


def simplex_max(c, A, b, max_iter: int = 10_000):
    """Maximise ``c @ x`` subject to ``A @ x <= b``, ``x >= 0`` with ``b >= 0``.

    Bland's rule keeps the method finite on degenerate problems.
    Returns ``(value, x)``.
    """
    c, A, b = (np.asarray(v, dtype=float) for v in (c, A, b))
    m, n = A.shape
    if np.any(b < 0):
        raise ValueError("simplex_max needs b >= 0 (origin feasible)")
    tab = np.zeros((m + 1, n + m + 1))
    tab[:m, :n] = A
    tab[:m, n:n + m] = np.eye(m)
    tab[:m, -1] = b
    tab[m, :n] = -c
    basis = list(range(n, n + m))

    for _ in range(max_iter):
        reduced = tab[m, :-1]
        entering = next((k for k in range(n + m) if reduced[k] < -PIVOT_TOL), None)
        if entering is None:
            break
        col = tab[:m, entering]
        ratios = np.full(m, np.inf)
        pos = col > PIVOT_TOL
        ratios[pos] = tab[:m, -1][pos] / col[pos]
        if not np.isfinite(ratios).any():
            raise UnboundedError("linear program is unbounded")
        best = ratios.min()
        # Bland: among minimum-ratio rows take the smallest basic variable index
        ties = [r for r in range(m) if ratios[r] <= best + PIVOT_TOL * max(1.0, abs(best))]
        leaving = min(ties, key=lambda r: basis[r])
        tab[leaving] /= tab[leaving, entering]
        for r in range(m + 1):
            if r != leaving and tab[r, entering] != 0.0:
                tab[r] -= tab[r, entering] * tab[leaving]
        basis[leaving] = entering
    else:
        raise RuntimeError("simplex did not converge")

    x = np.zeros(n + m)
    for r, var in enumerate(basis):
        x[var] = tab[r, -1]
    return float(tab[m, -1]), x[:n]


def _check_instance(lam, mu):
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if lam.ndim != 1 or mu.ndim != 2 or mu.shape[0] != lam.shape[0]:
        raise ConfigError(f"dimension mismatch: lambda {lam.shape} vs mu {mu.shape}")
    if np.any(lam < 0):
        raise ConfigError("arrival rates must be nonnegative")
    if np.any(mu <= 0) or np.any(mu > 1):
        raise ConfigError("service rates must lie in (0, 1]")
    return lam, mu


def max_slackness(lam, mu, tol: float = 1e-6):
    """Largest delta with lam + delta*1 in the stationary capacity region.

    Returns ``(delta_max, alpha)``; delta_max is negative for overloaded
    instances. The allocation is re-checked against both constraint families.
    """
    lam, mu = _check_instance(lam, mu)
    I, J = mu.shape
    shift = float(lam.max()) if I else 0.0
    n = I * J + 1  # alpha flattened row-major, then d
    rows, rhs = [], []
    for j in range(J):
        row = np.zeros(n)
        row[[i * J + j for i in range(I)]] = 1.0
        rows.append(row)
        rhs.append(1.0)
    for i in range(I):
        row = np.zeros(n)
        row[i * J:(i + 1) * J] = -mu[i]
        row[-1] = 1.0
        rows.append(row)
        rhs.append(shift - lam[i])
    c = np.zeros(n)
    c[-1] = 1.0
    d, x = simplex_max(c, np.array(rows), np.array(rhs))
    alpha = np.clip(x[:-1].reshape(I, J), 0.0, None)
    delta = d - shift
    supplied = (alpha * mu).sum(axis=1)
    if np.any(alpha.sum(axis=0) > 1 + tol) or np.any(supplied < lam + delta - tol):
        raise ArithmeticError("simplex returned an allocation that violates the constraints")
    return delta, alpha


def scale_to_slackness(direction, mu, target: float, tol: float = 1e-10):
    """Arrival vector ``c * direction`` whose maximum slackness equals ``target``.

    ``c >= 0`` is found by bisection; slackness is nonincreasing in ``c``.
    """
    direction, mu = _check_instance(direction, mu)
    if not np.any(direction > 0):
        raise ConfigError("direction must have a positive entry")
    top, _ = max_slackness(np.zeros_like(direction), mu)
    if target > top + 1e-12:
        raise InfeasibleTarget(f"target slackness {target} exceeds the empty-system slackness {top:.6f}")
    if target >= top - 1e-12:
        return np.zeros_like(direction)

    def slack(c):
        return max_slackness(c * direction, mu)[0]

    lo, hi = 0.0, 1.0
    while slack(hi) > target:
        lo, hi = hi, hi * 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if slack(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi) * direction
