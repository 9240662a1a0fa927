"""Tail beliefs and marginal flows with exact tail splicing.

A marginal flow ``m: [0, 1] -> R`` equals the belief quantile ``A^{-1}`` on
``[0, a] ∪ [b, 1]`` and a learned monotone body on ``(a, b)``.  The body is
stored in the CDF direction, ``G: (alpha, beta) -> (a, b)``, built from a
DDSF rescaled so that ``G(alpha) = a`` and ``G(beta) = b``.  Densities and
their gradients are then analytic; ``m`` itself is recovered by bisection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtr, ndtri

from . import grad as G
from .ddsf import DDSF, ddsf_forward, inert_keys

FAMILIES = ("gaussian", "exponential", "gpd")
FAMILY_PARAMS = {"gaussian": {"mu", "sigma"}, "exponential": {"rate"}, "gpd": {"xi", "scale"}}


class BisectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class TailSpec:
    """Parametric law of one tail.

    ``gaussian`` uses the full normal CDF ``Phi((x - mu) / sigma)`` so its mass
    is implied by the cut point.  ``exponential`` and ``gpd`` model the
    exceedance beyond the cut point and carry their mass explicitly.
    """

    family: str
    params: dict
    mass: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown tail family {self.family!r}")
        p = self.params
        unknown = set(p) - FAMILY_PARAMS[self.family]
        if unknown:
            raise ValueError(f"unknown {self.family} parameters {sorted(unknown)}")
        if self.family == "gaussian" and not p.get("sigma", 1.0) > 0:
            raise ValueError("gaussian sigma must be positive")
        if self.family == "exponential" and not p.get("rate", 0.0) > 0:
            raise ValueError("exponential rate must be positive")
        if self.family == "gpd" and not p.get("scale", 0.0) > 0:
            raise ValueError("gpd scale must be positive")
        if not 0.0 <= self.mass <= 1.0:
            raise ValueError(f"tail mass {self.mass} outside [0, 1]")

    def to_json(self) -> dict:
        return {"family": self.family, "params": dict(self.params), "mass": self.mass}


def _gauss(spec: TailSpec) -> tuple[float, float]:
    return float(spec.params.get("mu", 0.0)), float(spec.params.get("sigma", 1.0))


def _excess_sf(spec: TailSpec, d):
    """Survival of the exceedance distance ``d >= 0`` beyond the cut point."""
    if spec.family == "exponential":
        return np.exp(-spec.params["rate"] * d)
    xi, s = float(spec.params.get("xi", 0.0)), float(spec.params["scale"])
    if xi == 0.0:
        return np.exp(-d / s)
    base = np.maximum(1.0 + xi * d / s, 0.0)
    with np.errstate(divide="ignore"):
        return base ** (-1.0 / xi)


def _excess_logpdf(spec: TailSpec, d):
    if spec.family == "exponential":
        r = spec.params["rate"]
        return math.log(r) - r * d
    xi, s = float(spec.params.get("xi", 0.0)), float(spec.params["scale"])
    if xi == 0.0:
        return -math.log(s) - d / s
    base = 1.0 + xi * d / s
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(base > 0, -math.log(s) - (1.0 / xi + 1.0) * np.log(base), -np.inf)


def _excess_isf(spec: TailSpec, q):
    """Distance ``d`` with ``_excess_sf(d) = q`` for ``q in (0, 1]``."""
    with np.errstate(divide="ignore"):
        if spec.family == "exponential":
            return -np.log(q) / spec.params["rate"]
        xi, s = float(spec.params.get("xi", 0.0)), float(spec.params["scale"])
        if xi == 0.0:
            return -s * np.log(q)
        return s / xi * (q ** (-xi) - 1.0)


@dataclass(frozen=True)
class TailBelief:
    """Trusted CDF on ``(-inf, alpha] ∪ [beta, inf)``.

    An infinite cut point means no belief on that side (mass zero).
    """

    alpha: float
    beta: float
    left: TailSpec | None = None
    right: TailSpec | None = None

    def __post_init__(self):
        if not self.alpha < self.beta:
            raise ValueError(f"need alpha < beta, got {self.alpha}, {self.beta}")
        if (self.left is None) != (self.alpha == -math.inf):
            raise ValueError("left tail spec is required exactly when alpha is finite")
        if (self.right is None) != (self.beta == math.inf):
            raise ValueError("right tail spec is required exactly when beta is finite")
        for side, spec, cut in (("left", self.left, self.alpha), ("right", self.right, self.beta)):
            if spec is not None and spec.family == "gaussian":
                mu, sig = _gauss(spec)
                implied = float(ndtr((cut - mu) / sig))
                implied = implied if side == "left" else 1.0 - implied
                if abs(implied - spec.mass) > 1e-9:
                    raise ValueError(f"{side} gaussian mass {spec.mass} inconsistent with cut point "
                                     f"(implied {implied:.12g})")
        if not 0.0 <= self.a < self.b <= 1.0:
            raise ValueError(f"need 0 <= a < b <= 1, got a={self.a}, b={self.b}")

    @property
    def a(self) -> float:
        return 0.0 if self.left is None else self.left.mass

    @property
    def b(self) -> float:
        return 1.0 if self.right is None else 1.0 - self.right.mass

    @classmethod
    def gaussian(cls, alpha: float, beta: float, mu: float = 0.0, sigma: float = 1.0) -> "TailBelief":
        params = {"mu": mu, "sigma": sigma}
        left = TailSpec("gaussian", params, float(ndtr((alpha - mu) / sigma))) if np.isfinite(alpha) else None
        right = TailSpec("gaussian", params, float(ndtr(-(beta - mu) / sigma))) if np.isfinite(beta) else None
        return cls(alpha, beta, left, right)

    def cdf(self, x):
        """``A(x)`` for ``x`` in the tail region; NaN inside ``(alpha, beta)``."""
        x = np.asarray(x, dtype=np.float64)
        out = np.full(x.shape, np.nan)
        lo, hi = x <= self.alpha, x >= self.beta
        if self.left is not None and lo.any():
            out[lo] = self._left_cdf(x[lo])
        if self.right is not None and hi.any():
            out[hi] = self._right_cdf(x[hi])
        out[x == self.alpha] = self.a
        out[x == self.beta] = self.b
        return out[()] if out.ndim == 0 else out

    def _left_cdf(self, x):
        spec = self.left
        if spec.family == "gaussian":
            mu, sig = _gauss(spec)
            return ndtr((x - mu) / sig)
        return spec.mass * _excess_sf(spec, self.alpha - x)

    def _right_cdf(self, x):
        spec = self.right
        if spec.family == "gaussian":
            mu, sig = _gauss(spec)
            return ndtr((x - mu) / sig)
        return 1.0 - spec.mass * _excess_sf(spec, x - self.beta)

    def logpdf(self, x):
        """Log density of the belief law at tail points (strictly outside the body)."""
        x = np.asarray(x, dtype=np.float64)
        out = np.full(x.shape, np.nan)
        lo, hi = x < self.alpha, x > self.beta
        for mask, spec, dist in ((lo, self.left, lambda v: self.alpha - v),
                                 (hi, self.right, lambda v: v - self.beta)):
            if spec is None or not mask.any():
                continue
            if spec.family == "gaussian":
                mu, sig = _gauss(spec)
                z = (x[mask] - mu) / sig
                out[mask] = -0.5 * z * z - 0.5 * math.log(2 * math.pi) - math.log(sig)
            else:
                out[mask] = math.log(spec.mass) + _excess_logpdf(spec, dist(x[mask]))
        return out[()] if out.ndim == 0 else out

    def to_json(self) -> dict:
        return {
            "alpha": None if self.alpha == -math.inf else self.alpha,
            "beta": None if self.beta == math.inf else self.beta,
            "left": None if self.left is None else self.left.to_json(),
            "right": None if self.right is None else self.right.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TailBelief":
        alpha = -math.inf if d.get("alpha") is None else float(d["alpha"])
        beta = math.inf if d.get("beta") is None else float(d["beta"])

        def spec(s, cut, side):
            if s is None:
                return None
            mass = s.get("mass")
            if mass is None and s["family"] == "gaussian":
                mu, sig = s["params"].get("mu", 0.0), s["params"].get("sigma", 1.0)
                mass = float(ndtr((cut - mu) / sig)) if side == "left" else float(ndtr(-(cut - mu) / sig))
            if mass is None:
                raise ValueError(f"{side} tail needs a mass")
            return TailSpec(s["family"], dict(s.get("params", {})), float(mass))

        return cls(alpha, beta, spec(d.get("left"), alpha, "left"), spec(d.get("right"), beta, "right"))


def tail_quantile(belief: TailBelief, u):
    """Closed-form ``A^{-1}(u)`` on ``[0, a] ∪ [b, 1]``."""
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0) | (u > 1)) or np.any(np.isnan(u)):
        raise ValueError("u must lie in [0, 1]")
    a, b = belief.a, belief.b
    if np.any((u > a) & (u < b)):
        raise ValueError(f"u inside the body ({a}, {b}) has no tail quantile")
    out = np.empty(u.shape)
    lo, hi = u <= a, u >= b
    # the min/max guard against rounding carrying a quantile across its cut point
    if lo.any():
        out[lo] = np.minimum(_left_quantile(belief, u[lo]), belief.alpha)
    if hi.any():
        out[hi] = np.maximum(_right_quantile(belief, u[hi]), belief.beta)
    out[u == a] = belief.alpha
    out[u == b] = belief.beta
    return out[()] if out.ndim == 0 else out


def _left_quantile(belief: TailBelief, u):
    spec = belief.left
    if spec is None:  # a == 0, only u == 0 lands here
        return np.full(u.shape, -math.inf)
    if spec.family == "gaussian":
        mu, sig = _gauss(spec)
        return mu + sig * ndtri(u)
    return belief.alpha - _excess_isf(spec, u / spec.mass)


def _right_quantile(belief: TailBelief, u):
    spec = belief.right
    if spec is None:
        return np.full(u.shape, math.inf)
    if spec.family == "gaussian":
        mu, sig = _gauss(spec)
        return mu - sig * ndtri(1.0 - u)
    return belief.beta + _excess_isf(spec, (1.0 - u) / spec.mass)


@dataclass(frozen=True)
class UnivariateMarginalFlow:
    belief: TailBelief
    body: DDSF
    loc: float = 0.0
    scale: float = 1.0
    tol: float = 1e-12

    @classmethod
    def create(cls, belief: TailBelief, rng: np.random.Generator, data=None,
               hidden: int = 16, depth: int = 3, init_scale: float = 0.1) -> "UnivariateMarginalFlow":
        """New flow whose DDSF sees inputs standardised to roughly [-1, 1] on the body."""
        loc, scale = _standardisation(belief, data)
        return cls(belief, DDSF.init(rng, hidden, depth, init_scale), loc, scale)

    @property
    def bounded_body(self) -> bool:
        return math.isfinite(self.belief.alpha) and math.isfinite(self.belief.beta)

    def to_json(self) -> dict:
        return {"kind": "marginal", "belief": self.belief.to_json(), "body": self.body.to_json(),
                "loc": self.loc, "scale": self.scale, "tol": self.tol}

    @classmethod
    def from_json(cls, d: dict) -> "UnivariateMarginalFlow":
        return cls(TailBelief.from_json(d["belief"]), DDSF.from_json(d["body"]),
                   float(d["loc"]), float(d["scale"]), float(d.get("tol", 1e-12)))


def _standardisation(belief: TailBelief, data) -> tuple[float, float]:
    lo, hi = belief.alpha, belief.beta
    if math.isfinite(lo) and math.isfinite(hi):
        return 0.5 * (lo + hi), 0.5 * (hi - lo)
    if data is not None:
        x = np.asarray(data, dtype=np.float64)
        x = x[(x > lo) & (x < hi)]
        if x.size >= 2:
            return float(np.median(x)), float(max(np.std(x), 1e-6))
    if math.isfinite(lo):
        return lo + 1.0, 1.0
    if math.isfinite(hi):
        return hi - 1.0, 1.0
    return 0.0, 1.0


def body_cdf_terms(tape: G.Tape, raw: dict[str, G.Var], flow: UnivariateMarginalFlow,
                   x) -> tuple[G.Var, G.Var]:
    """Body CDF ``G(x)`` and ``log G'(x)`` for body points ``x`` as tape nodes.

    Endpoint values of the DDSF are evaluated in the same pass so gradients
    flow through the rescaling.
    """
    bel = flow.belief
    a, b = bel.a, bel.b
    x = np.asarray(x, dtype=np.float64).ravel()
    z = (x - flow.loc) / flow.scale
    if flow.bounded_body:
        ends = np.array([(bel.alpha - flow.loc) / flow.scale, (bel.beta - flow.loc) / flow.scale])
        val, ld = ddsf_forward(tape, raw, tape.const(np.concatenate([z, ends]).reshape(-1, 1)),
                               flow.body.depth, flow.body.eps)
        n = z.size
        f, logdf = G.take(val, slice(0, n)), G.take(ld, slice(0, n))
        f_lo, f_hi = G.take(val, slice(n, n + 1)), G.take(val, slice(n + 1, n + 2))
    else:
        # an infinite side is normalised by the DDSF's limit there: zero or one
        # for a single layer, otherwise the value once the inner clamp saturates
        far = _saturated_inputs(raw, flow.body)
        pieces = [z]
        if math.isfinite(bel.alpha):
            pieces.append([(bel.alpha - flow.loc) / flow.scale])
        elif far is not None:
            pieces.append([far[0]])
        if math.isfinite(bel.beta):
            pieces.append([(bel.beta - flow.loc) / flow.scale])
        elif far is not None:
            pieces.append([far[1]])
        allz = np.concatenate([np.asarray(p, dtype=np.float64) for p in pieces])
        val, ld = ddsf_forward(tape, raw, tape.const(allz.reshape(-1, 1)), flow.body.depth,
                               flow.body.eps, prob_output=True)
        n = z.size
        f, logdf = G.take(val, slice(0, n)), G.take(ld, slice(0, n))
        if math.isfinite(bel.alpha) or far is not None:
            f_lo = G.take(val, slice(n, n + 1))
        else:
            f_lo = tape.const(np.zeros(1))
        f_hi = G.take(val, slice(-1, None)) if (math.isfinite(bel.beta) or far is not None) \
            else tape.const(np.ones(1))
    span = f_hi - f_lo
    cdf = a + (b - a) * (f - f_lo) / span
    logpdf = logdf + (math.log(b - a) - math.log(flow.scale)) - G.log(span)
    return cdf, logpdf


def _saturated_inputs(raw: dict[str, G.Var], body: DDSF) -> tuple[float, float] | None:
    """Standardised inputs beyond which the first layer's clamp is active on each side.

    ``None`` for a single-layer DDSF, which has no inner clamp.
    """
    if body.depth < 2:
        return None
    a = np.logaddexp(0.0, raw["a1"].value)
    b = raw["b1"].value
    t = math.log(body.eps) - math.log1p(-body.eps) - 1.0
    return float(np.min((t - b) / a)), float(np.max((-t - b) / a))


def _body_eval(flow: UnivariateMarginalFlow, x) -> tuple[np.ndarray, np.ndarray]:
    tape = G.Tape()
    raw = {k: tape.const(v) for k, v in flow.body.params.arrays.items()}
    cdf, logpdf = body_cdf_terms(tape, raw, flow, x)
    return cdf.value, logpdf.value


def marginal_cdf(flow: UnivariateMarginalFlow, x):
    """``m^{-1}(x)``: belief CDF on the tails, rescaled DDSF body in between."""
    x = np.asarray(x, dtype=np.float64)
    bel = flow.belief
    out = np.empty(x.shape)
    body = (x > bel.alpha) & (x < bel.beta)
    tail = ~body
    if tail.any():
        out[tail] = bel.cdf(x[tail])
    if body.any():
        c, _ = _body_eval(flow, x[body])
        out[body] = np.clip(c, bel.a, bel.b)
    return out[()] if out.ndim == 0 else out


def marginal_log_density(flow: UnivariateMarginalFlow, x):
    """``log p(x)`` on the open body ``(alpha, beta)``; other points are rejected."""
    x = np.asarray(x, dtype=np.float64)
    bel = flow.belief
    if not np.all((x > bel.alpha) & (x < bel.beta)):
        raise ValueError(f"log density is defined on the open body ({bel.alpha}, {bel.beta}) only")
    _, lp = _body_eval(flow, x.ravel())
    lp = lp.reshape(x.shape)
    return lp[()] if lp.ndim == 0 else lp


def marginal_full_log_density(flow: UnivariateMarginalFlow, x):
    """Log density on the whole line: body via the flow, tails via the belief.

    The cut points themselves are rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    bel = flow.belief
    if np.any((x == bel.alpha) | (x == bel.beta)):
        raise ValueError("log density is undefined on the body/tail seam")
    out = np.empty(x.shape)
    body = (x > bel.alpha) & (x < bel.beta)
    if body.any():
        out[body] = marginal_log_density(flow, x[body])
    if (~body).any():
        lp = bel.logpdf(x[~body])
        if not np.all(np.isfinite(lp)):
            raise ValueError("non-finite belief density")
        out[~body] = lp
    return out[()] if out.ndim == 0 else out


def marginal_forward(flow: UnivariateMarginalFlow, u):
    """``m(u)``: tail quantiles on ``[0, a] ∪ [b, 1]``, inverted body in between."""
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0) | (u > 1)) or np.any(np.isnan(u)):
        raise ValueError("u must lie in [0, 1]")
    bel = flow.belief
    out = np.empty(u.shape)
    body = (u > bel.a) & (u < bel.b)
    if (~body).any():
        out[~body] = tail_quantile(bel, u[~body])
    if body.any():
        out[body] = _invert_body(flow, u[body])
    return out[()] if out.ndim == 0 else out


def _bracket(flow: UnivariateMarginalFlow, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    bel = flow.belief
    lo = np.full(u.shape, bel.alpha)
    hi = np.full(u.shape, bel.beta)
    for arr, cut, sign in ((lo, bel.alpha, -1.0), (hi, bel.beta, 1.0)):
        if math.isfinite(cut):
            continue
        width = flow.scale
        arr[:] = flow.loc + sign * width
        for _ in range(200):
            c, _ = _body_eval(flow, arr)
            bad = (c >= u) if sign < 0 else (c <= u)
            if not bad.any():
                break
            width *= 2.0
            arr[bad] = flow.loc + sign * width
        else:
            raise BisectionError("could not bracket the body inverse")
    return lo, hi


def _invert_body(flow: UnivariateMarginalFlow, u: np.ndarray, max_iter: int = 200) -> np.ndarray:
    lo, hi = _bracket(flow, u)
    active = np.ones(u.shape, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        l, h = lo[idx], hi[idx]
        mid = 0.5 * (l + h)
        c, _ = _body_eval(flow, mid)
        below = c < u[idx]
        lo[idx] = np.where(below, mid, l)
        hi[idx] = np.where(below, h, mid)
        width = hi[idx] - lo[idx]
        stalled = (mid == l) | (mid == h)
        active[idx] = ~((width <= flow.tol) | stalled)
    else:
        if active.any():
            raise BisectionError(f"bisection did not converge in {max_iter} iterations")
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class MarginalTrainConfig:
    epochs: int = 30
    batch_size: int = 1000
    lr: float = 5e-3
    lr_final: float = 2e-4
    seed: int = 0


def marginal_nll_objective(flow: UnivariateMarginalFlow, x: np.ndarray):
    """``(f, theta0)``: mean body NLL over the identifiable body parameters, for gradient checks."""
    x = np.asarray(x, dtype=np.float64)
    inert = inert_keys(flow.body, prob_output=not flow.bounded_body, shift_scale_free=flow.bounded_body)
    keys = [k for k in flow.body.params.arrays if k not in inert]

    def loss(tape: G.Tape, raw: dict[str, G.Var]) -> G.Var:
        _, lp = body_cdf_terms(tape, raw, flow, x)
        return -G.mean(lp)

    return G.partial_objective(flow.body.params, keys, loss)


def train_marginal(flow: UnivariateMarginalFlow, samples, config: MarginalTrainConfig = MarginalTrainConfig()):
    """Fit the body by minimising the mean NLL of samples inside ``(alpha, beta)``.

    Samples outside the open body, including those exactly on a cut point, are
    discarded.  Returns ``(trained_flow, per_epoch_nll)``.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    bel = flow.belief
    x = x[(x > bel.alpha) & (x < bel.beta)]
    if x.size == 0:
        raise ValueError("no samples inside the body; nothing to train on")
    rng = np.random.default_rng(config.seed)
    params = flow.body.params
    vec = params.to_vector()
    state = G.AdamState.fresh(vec.size, lr=config.lr)
    bs = min(config.batch_size, x.size)
    steps_per_epoch = max(1, x.size // bs)
    total = config.epochs * steps_per_epoch
    history = []
    step = 0
    for _ in range(config.epochs):
        perm = rng.permutation(x.size)
        losses = []
        for k in range(steps_per_epoch):
            batch = x[perm[k * bs:(k + 1) * bs]]
            tape = G.Tape()
            raw = params.with_vector(vec).on_tape(tape)
            _, lp = body_cdf_terms(tape, raw, flow, batch)
            loss = -G.mean(lp)
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"non-finite marginal loss at step {step}")
            grads = G.backward(tape, loss)
            lr = _cosine(config.lr, config.lr_final, step, total)
            state = replace(state, lr=lr)
            vec, state = G.adam_step(state, vec, np.concatenate([g.ravel() for g in grads]))
            losses.append(float(loss.value))
            step += 1
        history.append(float(np.mean(losses)))
    body = replace(flow.body, params=params.with_vector(vec))
    return replace(flow, body=body), history


def _cosine(lr0: float, lr1: float, step: int, total: int) -> float:
    if total <= 1:
        return lr0
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * step / (total - 1)))


@dataclass(frozen=True)
class BivariateMarginalFlow:
    components: tuple[UnivariateMarginalFlow, UnivariateMarginalFlow]

    def to_json(self) -> dict:
        return {"kind": "bivariate_marginal", "components": [c.to_json() for c in self.components]}

    @classmethod
    def from_json(cls, d: dict) -> "BivariateMarginalFlow":
        c = [UnivariateMarginalFlow.from_json(x) for x in d["components"]]
        return cls((c[0], c[1]))


def _pairs(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 2:
        raise ValueError(f"expected pairs, got shape {u.shape}")
    return u


def bivariate_marginal_forward(flow: BivariateMarginalFlow, u):
    u = _pairs(u)
    return np.stack([marginal_forward(c, u[..., i]) for i, c in enumerate(flow.components)], axis=-1)


def bivariate_marginal_cdf(flow: BivariateMarginalFlow, x):
    x = _pairs(x)
    return np.stack([marginal_cdf(c, x[..., i]) for i, c in enumerate(flow.components)], axis=-1)
