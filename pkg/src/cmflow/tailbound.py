"""Monte Carlo checks of tail and moment bounds for Lipschitz generators.

For a network ``g`` with l1 Lipschitz constant ``L`` and a noise prior with
i.i.d. components, the survival of ``|g_i(Z)|`` is dominated by
``d0 * P(d0 * L * |Z_1| + |g_i(0)| > x)``.  The checks here estimate both
sides from samples and flag a violation only when the gap exceeds joint 99%
Dvoretzky-Kiefer-Wolfowitz bands.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import comb, gammaln, ndtr

from . import grad as G

LEVEL = 0.01

ACTIVATIONS = {
    "identity": (lambda x: x, 1.0),
    "tanh": (np.tanh, 1.0),
    "relu": (lambda x: np.maximum(x, 0.0), 1.0),
    "leaky_relu": (lambda x: np.where(x > 0, x, 0.01 * x), 1.0),
}


@dataclass(frozen=True)
class NetworkSpec:
    """Dense network; the activation follows every layer except the last."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for k in range(1, len(self.weights)):
            if self.weights[k].shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k} input width does not match previous output")
        for W, b in zip(self.weights, self.biases):
            if b.shape != (W.shape[0],):
                raise ValueError("bias shape must equal the layer's output width")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def d0(self) -> int:
        return self.weights[0].shape[1]

    def __call__(self, z) -> np.ndarray:
        phi = ACTIVATIONS[self.activation][0]
        h = np.asarray(z, dtype=np.float64)
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if k < last:
                h = phi(h)
        return h

    def scaled(self, c: float) -> "NetworkSpec":
        return NetworkSpec(tuple(c * W for W in self.weights), self.biases, self.activation)

    @classmethod
    def random(cls, rng: np.random.Generator, widths, activation: str = "tanh",
               scale: float = 1.0, bias_scale: float = 0.5) -> "NetworkSpec":
        Ws, bs = [], []
        for din, dout in zip(widths[:-1], widths[1:]):
            Ws.append(rng.normal(0.0, scale / math.sqrt(din), (dout, din)))
            bs.append(rng.normal(0.0, bias_scale, dout))
        return cls(tuple(Ws), tuple(bs), activation)

    @classmethod
    def identity(cls, d: int) -> "NetworkSpec":
        return cls((np.eye(d),), (np.zeros(d),), "identity")


def lipschitz_upper_bound(net: NetworkSpec) -> float:
    """Product of l1 operator norms (max column sums) and activation constants."""
    lip_phi = ACTIVATIONS[net.activation][1]
    bound = 1.0
    for k, W in enumerate(net.weights):
        bound *= float(np.abs(W).sum(axis=0).max())
        if k < len(net.weights) - 1:
            bound *= lip_phi
    return bound


@dataclass(frozen=True)
class NoisePrior:
    family: str
    dim: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in ("gaussian", "uniform", "laplace", "cauchy"):
            raise ValueError(f"unknown prior family {self.family!r}")
        if self.dim < 1:
            raise ValueError("dimension must be positive")

    def _p(self, key, default):
        return float(self.params.get(key, default))

    def sample(self, rng: np.random.Generator, n: int, dim: int | None = None) -> np.ndarray:
        shape = (n, self.dim if dim is None else dim)
        if self.family == "gaussian":
            return rng.normal(0.0, self._p("sigma", 1.0), shape)
        if self.family == "uniform":
            return rng.uniform(self._p("lo", 0.0), self._p("hi", 1.0), shape)
        if self.family == "laplace":
            return rng.laplace(0.0, self._p("scale", 1.0), shape)
        return self._p("gamma", 1.0) * rng.standard_cauchy(shape)

    def abs_sf(self, x) -> np.ndarray:
        """Exact ``P(|Z_1| > x)``."""
        x = np.asarray(x, dtype=np.float64)
        xp = np.maximum(x, 0.0)
        if self.family == "gaussian":
            out = 2.0 * ndtr(-xp / self._p("sigma", 1.0))
        elif self.family == "laplace":
            out = np.exp(-xp / self._p("scale", 1.0))
        elif self.family == "cauchy":
            out = 1.0 - 2.0 / math.pi * np.arctan(xp / self._p("gamma", 1.0))
        else:
            lo, hi = self._p("lo", 0.0), self._p("hi", 1.0)
            width = hi - lo
            out = (np.clip(hi - xp, 0.0, width) + np.clip(-xp - lo, 0.0, width)) / width
        return np.where(x < 0, 1.0, out)

    def abs_moment(self, k: int) -> float:
        """``E|Z_1|^k`` (``inf`` when it does not exist)."""
        if k == 0:
            return 1.0
        if self.family == "gaussian":
            s = self._p("sigma", 1.0)
            return float(s ** k * math.exp(0.5 * k * math.log(2.0) + gammaln((k + 1) / 2.0)) / math.sqrt(math.pi))
        if self.family == "laplace":
            return float(math.factorial(k) * self._p("scale", 1.0) ** k)
        if self.family == "cauchy":
            return math.inf
        lo, hi = self._p("lo", 0.0), self._p("hi", 1.0)
        if lo >= 0:
            num = hi ** (k + 1) - lo ** (k + 1)
        elif hi <= 0:
            num = abs(lo) ** (k + 1) - abs(hi) ** (k + 1)
        else:
            num = hi ** (k + 1) + abs(lo) ** (k + 1)
        return num / ((k + 1) * (hi - lo))

    def has_moment(self, p: int) -> bool:
        return math.isfinite(self.abs_moment(p))

    def l1_norm_moments(self, p: int) -> list[float]:
        """Exact ``E||Z||_1^k`` for ``k = 0..p`` via binomial convolution over components."""
        single = [self.abs_moment(k) for k in range(p + 1)]
        total = [1.0] + [0.0] * p
        for _ in range(self.dim):
            total = [sum(comb(k, j, exact=True) * total[j] * single[k - j] for j in range(k + 1))
                     for k in range(p + 1)]
        return total

    def to_json(self) -> dict:
        return {"family": self.family, "dim": self.dim, "params": dict(self.params)}


@dataclass(frozen=True)
class AffineEnvelope:
    slope: float
    intercept: float

    def __call__(self, z):
        return self.slope * np.asarray(z) + self.intercept


def dkw_halfwidth(n: int, level: float = LEVEL) -> float:
    return math.sqrt(math.log(2.0 / level) / (2.0 * n))


@dataclass
class SurvivalCurve:
    x: np.ndarray
    survival: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n: int

    def to_rows(self) -> list[tuple[float, float, float, float]]:
        return list(zip(self.x.tolist(), self.survival.tolist(), self.lower.tolist(), self.upper.tolist()))


def survival_estimate(samples, grid, level: float = LEVEL) -> SurvivalCurve:
    """Empirical ``P(X > x)`` on ``grid`` with a two-sided DKW band."""
    s = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise ValueError("empty evaluation grid")
    if s.size < 100:
        raise ValueError(f"need at least 100 samples, got {s.size}")
    sf = 1.0 - np.searchsorted(s, grid, side="right") / s.size
    eps = dkw_halfwidth(s.size, level)
    return SurvivalCurve(grid, sf, np.clip(sf - eps, 0.0, 1.0), np.clip(sf + eps, 0.0, 1.0), s.size)


@dataclass
class BoundReport:
    x: list[float]
    lhs: list[float]
    rhs: list[float]
    band: list[float]
    violations: list[float]
    meta: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def margins(self) -> np.ndarray:
        return np.asarray(self.rhs) - np.asarray(self.lhs)

    def to_json(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return d


def default_grid(samples, n: int = 40, upper_q: float = 0.9999) -> np.ndarray:
    """Evaluation points spread over the sample quantiles ``0 .. upper_q``."""
    return np.unique(np.quantile(np.asarray(samples, dtype=np.float64), np.linspace(0.0, upper_q, n)))


def _dominance(lhs_samples, rhs_samples, factor: float, grid, extra: dict) -> BoundReport:
    """Test ``sf_lhs(x) <= factor * sf_rhs(x)`` with joint 99% DKW bands (Bonferroni)."""
    if grid is None:
        grid = default_grid(lhs_samples)
    left = survival_estimate(lhs_samples, grid, LEVEL / 2)
    right = survival_estimate(rhs_samples, grid, LEVEL / 2)
    eps_l = dkw_halfwidth(left.n, LEVEL / 2)
    eps_r = dkw_halfwidth(right.n, LEVEL / 2)
    band = eps_l + factor * eps_r
    rhs = factor * right.survival
    viol = left.survival - rhs > band
    return BoundReport(left.x.tolist(), left.survival.tolist(), rhs.tolist(),
                       [band] * left.x.size, left.x[viol].tolist(), extra)


def check_lemma_sum_bound(a: float, b: float, d0: int, prior: NoisePrior, grid, n: int,
                          seed=0) -> BoundReport:
    """``P(a * sum_j Z_j + b > x) <= d0 * P(d0 * a * Z_1 + b > x)``."""
    rng = np.random.default_rng(seed)
    z = prior.sample(rng, n, d0)
    lhs = a * z.sum(axis=1) + b
    rhs = d0 * a * prior.sample(rng, n, 1)[:, 0] + b
    return _dominance(lhs, rhs, float(d0), grid, {"a": a, "b": b, "d0": d0, "n": n,
                                                   "prior": prior.to_json()})


def affine_envelope(net: NetworkSpec, i: int) -> AffineEnvelope:
    g0 = net(np.zeros((1, net.d0)))[0]
    return AffineEnvelope(net.d0 * lipschitz_upper_bound(net), float(abs(g0[i])))


def check_generator_tail_bound(net: NetworkSpec, prior: NoisePrior, i: int, grid, n: int,
                               seed=0) -> BoundReport:
    """Survival of ``|g_i(Z)|`` against ``d0`` times that of ``w(|Z_1|)``.

    ``i`` is a 0-based output index.  The exact right-hand side from the
    prior's closed-form survival is recorded alongside the Monte Carlo one.
    """
    if prior.dim != net.d0:
        raise ValueError(f"prior dimension {prior.dim} does not match network input {net.d0}")
    rng = np.random.default_rng(seed)
    env = affine_envelope(net, i)
    lhs = np.abs(net(prior.sample(rng, n))[:, i])
    rhs = env(np.abs(prior.sample(rng, n, 1)[:, 0]))
    grid = default_grid(lhs) if grid is None else np.asarray(grid, dtype=np.float64)
    if env.slope > 0:
        exact = net.d0 * prior.abs_sf((grid - env.intercept) / env.slope)
    else:
        exact = net.d0 * (grid < env.intercept).astype(float)
    meta = {"d0": net.d0, "coordinate": i, "n": n, "slope": env.slope, "intercept": env.intercept,
            "lipschitz": lipschitz_upper_bound(net), "prior": prior.to_json(),
            "rhs_exact": np.asarray(exact).tolist()}
    return _dominance(lhs, rhs, float(net.d0), grid, meta)


@dataclass
class MomentReport:
    p: int
    premise_violated: bool
    estimate: float | None = None
    std_error: float | None = None
    bound: float | None = None
    ok: bool = True

    def to_json(self) -> dict:
        return asdict(self)


def check_moment_bound(net: NetworkSpec, prior: NoisePrior, p: int, n: int = 200_000,
                       seed=0, z_score: float = 2.576) -> MomentReport:
    """MC estimate of ``E||g(Z)||_1^p`` against the binomial expansion of ``(L||Z||_1 + ||g(0)||_1)^p``."""
    if not prior.has_moment(p):
        return MomentReport(p, True)
    rng = np.random.default_rng(seed)
    vals = np.abs(net(prior.sample(rng, n))).sum(axis=1) ** p
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n))
    L = lipschitz_upper_bound(net)
    g0 = float(np.abs(net(np.zeros((1, net.d0)))[0]).sum())
    mom = prior.l1_norm_moments(p)
    bound = float(sum(comb(p, k, exact=True) * L ** k * mom[k] * g0 ** (p - k) for k in range(p + 1)))
    return MomentReport(p, False, est, se, bound, est <= bound + z_score * se)


@dataclass
class TailComparison:
    x: np.ndarray
    log_ratio: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def trend(self) -> float:
        """Least-squares slope of the finite part of the curve."""
        ok = np.isfinite(self.log_ratio)
        if ok.sum() < 2:
            return -math.inf
        return float(np.polyfit(self.x[ok], self.log_ratio[ok], 1)[0])


def tail_grid(samples, q: float = 0.95, n: int = 40, upper_q: float = 0.9999) -> np.ndarray:
    s = np.asarray(samples, dtype=np.float64)
    return np.linspace(np.quantile(s, q), np.quantile(s, upper_q), n)


def tail_comparison_demo(model_samples, target, grid, level: float = LEVEL) -> TailComparison:
    """``log sf_model(x) - log sf_target(x)`` with DKW-derived bands.

    ``target`` is either a sample array or a callable exact survival function.
    """
    grid = np.asarray(grid, dtype=np.float64)
    m = survival_estimate(model_samples, grid, level)
    if callable(target):
        t_sf = np.asarray(target(grid), dtype=np.float64)
        t_lo = t_hi = t_sf
    else:
        t = survival_estimate(target, grid, level)
        t_sf, t_lo, t_hi = t.survival, t.lower, t.upper
    if not np.any((m.survival > 0) | (t_sf > 0)):
        raise ValueError("no samples in the tail region on either side")
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.log(m.survival) - np.log(t_sf)
        lo = np.log(m.lower) - np.log(t_hi)
        hi = np.log(m.upper) - np.log(t_lo)
    return TailComparison(grid, r, lo, hi)


@dataclass(frozen=True)
class GeneratorTrainConfig:
    steps: int = 3000
    batch_size: int = 2000
    lr: float = 3e-3
    seed: int = 0


def train_generator(net: NetworkSpec, prior: NoisePrior, data, config: GeneratorTrainConfig = GeneratorTrainConfig()) -> NetworkSpec:
    """Fit a 1-D generator by matching sorted batches (squared quantile distance)."""
    if net.widths[-1] != 1:
        raise ValueError("quantile matching needs a scalar output")
    data = np.asarray(data, dtype=np.float64).ravel()
    rng = np.random.default_rng(config.seed)
    arrays = {}
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"W{k}"], arrays[f"b{k}"] = W, b
    params = G.ParamSet(arrays)
    vec = params.to_vector()
    state = G.AdamState.fresh(vec.size, lr=config.lr)
    act = {"tanh": G.tanh, "identity": lambda v: v}.get(net.activation)
    if act is None:
        raise ValueError(f"training supports tanh or identity activations, not {net.activation!r}")
    K = len(net.weights)
    for _ in range(config.steps):
        z = prior.sample(rng, config.batch_size)
        z = z[np.argsort(z[:, 0])] if net.d0 == 1 else z
        target = np.sort(rng.choice(data, config.batch_size))
        tape = G.Tape()
        raw = params.with_vector(vec).on_tape(tape)
        h = tape.const(z)
        for k in range(K):
            h = G.affine(h, raw[f"W{k}"], raw[f"b{k}"])
            if k < K - 1:
                h = act(h)
        out = G.reshape(h, (-1,))
        if net.d0 != 1:
            order = np.argsort(out.value)
            out = G.take(out, order)
        loss = G.mean(G.square(out - target))
        grads = G.backward(tape, loss)
        vec, state = G.adam_step(state, vec, np.concatenate([g.ravel() for g in grads]))
    p = params.with_vector(vec).arrays
    return NetworkSpec(tuple(p[f"W{k}"] for k in range(K)), tuple(p[f"b{k}"] for k in range(K)), net.activation)
