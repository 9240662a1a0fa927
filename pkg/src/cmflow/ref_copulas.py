"""Clayton, Frank, Gumbel and independence copulas in closed form.

Densities are evaluated in log space.  Points where the closed form breaks
down numerically come back as NaN; callers such as the JSD grid drop them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

FAMILIES = ("clayton", "frank", "gumbel", "independence")


@dataclass(frozen=True)
class ReferenceCopula:
    family: str
    theta: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown copula family {self.family!r}")
        t = self.theta
        if self.family == "clayton" and not t > 0:
            raise ValueError("clayton requires theta > 0")
        if self.family == "frank" and (t == 0 or not np.isfinite(t)):
            raise ValueError("frank requires a finite theta != 0")
        if self.family == "gumbel" and not t >= 1:
            raise ValueError("gumbel requires theta >= 1")

    def kendall_tau(self) -> float:
        t = self.theta
        if self.family == "clayton":
            return t / (t + 2.0)
        if self.family == "gumbel":
            return 1.0 - 1.0 / t
        if self.family == "frank":
            debye, _ = integrate.quad(lambda s: s / np.expm1(s) if s else 1.0, 0.0, abs(t))
            d1 = debye / abs(t)
            tau = 1.0 - 4.0 / abs(t) * (1.0 - d1)
            return tau if t > 0 else -tau
        return 0.0

    def to_json(self) -> dict:
        return {"family": self.family, "theta": self.theta}


def _interior(u) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 2:
        raise ValueError(f"expected pairs, got shape {u.shape}")
    if np.any((u <= 0) | (u >= 1)) or np.any(np.isnan(u)):
        raise ValueError("copula density needs points strictly inside (0, 1)^2")
    return u[..., 0], u[..., 1]


def copula_log_density(cop: ReferenceCopula, u) -> np.ndarray:
    """Log density; NaN marks an invalid (overflowed or undefined) evaluation."""
    x, y = _interior(u)
    t = cop.theta
    with np.errstate(all="ignore"):
        if cop.family == "independence":
            out = np.zeros(x.shape)
        elif cop.family == "clayton":
            lx, ly = np.log(x), np.log(y)
            la = np.logaddexp(-t * lx, -t * ly)
            lsum = la + np.log1p(-np.exp(-la))  # log(x^-t + y^-t - 1)
            out = np.log1p(t) - (t + 1.0) * (lx + ly) - (1.0 / t + 2.0) * lsum
        elif cop.family == "frank":
            em = -np.expm1(-t)
            den = em - np.expm1(-t * x) * np.expm1(-t * y)
            out = np.log(t * em) - t * (x + y) - 2.0 * np.log(np.abs(den))
        else:
            lx, ly = np.log(-np.log(x)), np.log(-np.log(y))
            la = np.logaddexp(t * lx, t * ly)  # log A, A = (-ln x)^t + (-ln y)^t
            ai = np.exp(la / t)
            out = (-ai - np.log(x) - np.log(y) + (t - 1.0) * (lx + ly)
                   + (2.0 / t - 2.0) * la + np.log1p((t - 1.0) / ai))
    out = np.where(np.isfinite(out), out, np.nan)
    return out[()] if out.ndim == 0 else out


def copula_density(cop: ReferenceCopula, u) -> np.ndarray:
    with np.errstate(over="ignore"):
        d = np.exp(copula_log_density(cop, u))
    return np.where(np.isfinite(d), d, np.nan)


def copula_cdf(cop: ReferenceCopula, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0) | (u > 1)):
        raise ValueError("copula CDF needs points in [0, 1]^2")
    x, y = u[..., 0], u[..., 1]
    t = cop.theta
    with np.errstate(all="ignore"):
        if cop.family == "independence":
            out = x * y
        elif cop.family == "clayton":
            out = (x ** -t + y ** -t - 1.0) ** (-1.0 / t)
        elif cop.family == "frank":
            out = -np.log1p(np.expm1(-t * x) * np.expm1(-t * y) / np.expm1(-t)) / t
        else:
            out = np.exp(-((-np.log(x)) ** t + (-np.log(y)) ** t) ** (1.0 / t))
    # exact boundary values
    out = np.where(x == 1.0, y, out)
    out = np.where(y == 1.0, x, out)
    out = np.where((x == 0.0) | (y == 0.0), 0.0, out)
    return out[()] if np.ndim(out) == 0 else out


def copula_conditional(cop: ReferenceCopula, u1, u2) -> np.ndarray:
    """``P(U1 <= u1 | U2 = u2) = dC/du2``, a CDF in ``u1``."""
    x = np.asarray(u1, dtype=np.float64)
    y = np.asarray(u2, dtype=np.float64)
    if np.any((y <= 0) | (y >= 1)):
        raise ValueError("conditioning value must lie strictly inside (0, 1)")
    t = cop.theta
    with np.errstate(all="ignore"):
        if cop.family == "independence":
            out = x + 0.0 * y
        elif cop.family == "clayton":
            out = y ** (-t - 1.0) * (x ** -t + y ** -t - 1.0) ** (-1.0 / t - 1.0)
        elif cop.family == "frank":
            ex, ey = np.expm1(-t * x), np.expm1(-t * y)
            out = np.exp(-t * y) * ex / (np.expm1(-t) + ex * ey)
        else:
            out = np.exp(_gumbel_log_conditional(t, x, y))
    out = np.where(x <= 0.0, 0.0, np.where(x >= 1.0, 1.0, out))
    return out[()] if np.ndim(out) == 0 else out


def _gumbel_log_conditional(t, x, y):
    lx, ly = np.log(-np.log(x)), np.log(-np.log(y))
    la = np.logaddexp(t * lx, t * ly)
    return -np.exp(la / t) - np.log(y) + (t - 1.0) * ly + (1.0 / t - 1.0) * la


def copula_conditional_inverse(cop: ReferenceCopula, p, u2, tol: float = 1e-12,
                               max_iter: int = 200) -> np.ndarray:
    """``u1`` with ``copula_conditional(cop, u1, u2) = p``."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(u2, dtype=np.float64)
    if np.any((y <= 0) | (y >= 1)):
        raise ValueError("conditioning value must lie strictly inside (0, 1)")
    t = cop.theta
    with np.errstate(all="ignore"):
        if cop.family == "independence":
            out = p + 0.0 * y
        elif cop.family == "clayton":
            out = ((p ** (-t / (1.0 + t)) - 1.0) * y ** -t + 1.0) ** (-1.0 / t)
        elif cop.family == "frank":
            out = -np.log1p(p * np.expm1(-t) / (p - (p - 1.0) * np.exp(-t * y))) / t
        else:
            out = _gumbel_inverse(t, p, y, tol, max_iter)
    out = np.where(p <= 0.0, 0.0, np.where(p >= 1.0, 1.0, out))
    return out[()] if np.ndim(out) == 0 else out


def _gumbel_inverse(t, p, y, tol, max_iter):
    """Bisection on ``log u1`` so tiny quantiles keep relative accuracy."""
    p, y = np.broadcast_arrays(p, y)
    shape = p.shape
    p, y = p.ravel(), y.ravel()
    logp = np.log(np.clip(p, 1e-300, 1.0))
    lo = np.full(p.shape, -745.0)
    hi = np.zeros(p.shape)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = _gumbel_log_conditional(t, np.exp(mid), y) < logp
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(np.exp(hi) - np.exp(lo) <= tol * np.maximum(np.exp(hi), 1e-300) + 1e-300):
            break
    else:
        raise RuntimeError("gumbel conditional inversion did not converge")
    return np.exp(0.5 * (lo + hi)).reshape(shape)


def copula_sample(cop: ReferenceCopula, n: int, seed) -> np.ndarray:
    """``n`` i.i.d. pairs by the conditional-distribution method."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tiny = 2.0 ** -53
    v = np.clip(rng.random(n), tiny, 1.0 - tiny)
    p = np.clip(rng.random(n), tiny, 1.0 - tiny)
    u = copula_conditional_inverse(cop, p, v)
    return np.column_stack([u, v])
