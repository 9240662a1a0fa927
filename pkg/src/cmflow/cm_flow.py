"""Copula-and-marginal flows: sample through ``m ∘ h``, score through the inverse chain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .copula_flow import CopulaFlow, CopulaTrainConfig, cf_inverse, cf_log_density, cf_sample, train_copula_flow
from .marginal import (BivariateMarginalFlow, MarginalTrainConfig, TailBelief, UnivariateMarginalFlow,
                       bivariate_marginal_cdf, bivariate_marginal_forward, marginal_cdf,
                       marginal_full_log_density, train_marginal)


@dataclass(frozen=True)
class CMFlow:
    marginal: BivariateMarginalFlow
    copula: CopulaFlow

    def to_json(self) -> dict:
        return {"kind": "cm_flow", "marginal": self.marginal.to_json(), "copula": self.copula.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "CMFlow":
        return cls(BivariateMarginalFlow.from_json(d["marginal"]), CopulaFlow.from_json(d["copula"]))


def cm_sample(model: CMFlow, u) -> np.ndarray:
    """``x = m(h(u))`` for uniforms ``u`` in the unit square."""
    return bivariate_marginal_forward(model.marginal, cf_sample(model.copula, u))


def cm_inverse(model: CMFlow, x) -> np.ndarray:
    """Recover the uniform input of :func:`cm_sample`."""
    return cf_inverse(model.copula, bivariate_marginal_cdf(model.marginal, x))


def cm_log_density(model: CMFlow, x) -> np.ndarray:
    """Pair-copula log density: copula-flow term at the marginal CDFs plus both marginal terms."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x.reshape(-1, 2)
    comps = model.marginal.components
    marg = sum(marginal_full_log_density(c, xs[:, i]) for i, c in enumerate(comps))
    cdfs = np.column_stack([marginal_cdf(c, xs[:, i]) for i, c in enumerate(comps)])
    out = cf_log_density(model.copula, cdfs) + marg
    return float(out[0]) if single else out


def pseudo_observations(data, mode: str = "rank", model: CMFlow | None = None) -> np.ndarray:
    """Map data pairs into ``(0, 1)^2``.

    ``rank``: average rank over ``n + 1`` per column.  ``model``: the trained
    marginal CDFs of ``model``.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) array, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two rows")
    if mode == "rank":
        return np.column_stack([rankdata(x[:, i]) / (n + 1) for i in range(2)])
    if mode == "model":
        if model is None:
            raise ValueError("model mode needs a trained CM flow")
        return bivariate_marginal_cdf(model.marginal, x)
    raise ValueError(f"unknown pseudo-observation mode {mode!r}")


def train_cm_flow(data, beliefs: tuple[TailBelief, TailBelief], rng: np.random.Generator,
                  marginal_config: MarginalTrainConfig = MarginalTrainConfig(),
                  copula_config: CopulaTrainConfig = CopulaTrainConfig(),
                  constrained: bool = False, mode: str = "rank") -> CMFlow:
    """Marginals first, then the copula flow on pseudo-observations of the data."""
    x = np.asarray(data, dtype=np.float64)
    comps = []
    for i in range(2):
        flow = UnivariateMarginalFlow.create(beliefs[i], rng, data=x[:, i])
        flow, _ = train_marginal(flow, x[:, i], marginal_config)
        comps.append(flow)
    marginal = BivariateMarginalFlow((comps[0], comps[1]))
    model = CMFlow(marginal, CopulaFlow.init(rng, constrained=constrained))
    pobs = pseudo_observations(x, mode, model)

    def source(r: np.random.Generator, n: int) -> np.ndarray:
        return pobs[r.integers(0, len(pobs), n)]

    result = train_copula_flow(model.copula, source, copula_config)
    return CMFlow(marginal, result.flow)
