"""Copula flow ``h = sigmoid ∘ RealNVP ∘ logit`` on the unit square."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import grad as G
from .coupling import RealNVP2, nvp_forward_tape, nvp_inverse_tape

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class CopulaFlow:
    net: RealNVP2
    eps: float = EPS

    @property
    def constrained(self) -> bool:
        return self.net.constrained

    @classmethod
    def init(cls, rng: np.random.Generator, constrained: bool = False, **kw) -> "CopulaFlow":
        return cls(RealNVP2.init(rng, constrained=constrained, **kw))

    def to_json(self) -> dict:
        return {"kind": "copula_flow", "eps": self.eps, "net": self.net.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "CopulaFlow":
        return cls(RealNVP2.from_json(d["net"]), float(d.get("eps", EPS)))


def _pairs(u) -> tuple[np.ndarray, bool]:
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 2:
        raise ValueError(f"expected pairs, got shape {u.shape}")
    return u.reshape(-1, 2), u.ndim == 1


def _consts(tape: G.Tape, flow: CopulaFlow) -> dict[str, G.Var]:
    return {k: tape.const(v) for k, v in flow.net.params.arrays.items()}


def cf_sample(flow: CopulaFlow, u) -> np.ndarray:
    """Push uniforms through the flow.  Constrained flows return ``u[:, 1]`` untouched."""
    us, single = _pairs(u)
    if np.any((us < 0) | (us > 1)):
        raise ValueError("u must lie in [0, 1]^2")
    e = flow.eps
    uc = np.clip(us, e, 1.0 - e)
    tape = G.Tape()
    y, _ = nvp_forward_tape(tape, _consts(tape, flow), flow.net, tape.const(np.log(uc) - np.log1p(-uc)))
    c = np.clip(1.0 / (1.0 + np.exp(-y.value)), e, 1.0 - e)
    if flow.constrained:
        c[:, 1] = us[:, 1]
    return c[0] if single else c


def cf_inverse(flow: CopulaFlow, c) -> np.ndarray:
    """Map copula samples back to the uniform square."""
    cs, single = _pairs(c)
    e = flow.eps
    cc = np.clip(cs, e, 1.0 - e)
    tape = G.Tape()
    w, _ = nvp_inverse_tape(tape, _consts(tape, flow), flow.net, tape.const(np.log(cc) - np.log1p(-cc)))
    u = 1.0 / (1.0 + np.exp(-w.value))
    if flow.constrained:
        u[:, 1] = cs[:, 1]
    return u[0] if single else u


def cf_log_density_tape(tape: G.Tape, raw: dict[str, G.Var], flow: CopulaFlow, c: np.ndarray) -> G.Var:
    """Per-point log density as a tape node (inputs already clamped)."""
    v = np.log(c) - np.log1p(-c)
    w, logdet = nvp_inverse_tape(tape, raw, flow.net, tape.const(v))
    # log u(1-u) with u = sigmoid(w), summed over both coordinates
    log_jac_out = G.sum(G.log_sigmoid(w) + G.log_sigmoid(-w), axis=1)
    log_jac_in = np.sum(np.log(c) + np.log1p(-c), axis=1)
    return log_jac_out + logdet - log_jac_in


def cf_log_density(flow: CopulaFlow, c) -> np.ndarray:
    cs, single = _pairs(c)
    cc = np.clip(cs, flow.eps, 1.0 - flow.eps)
    tape = G.Tape()
    lp = cf_log_density_tape(tape, _consts(tape, flow), flow, cc).value
    if not np.all(np.isfinite(lp)):
        raise FloatingPointError("non-finite copula-flow log density")
    return float(lp[0]) if single else lp


def cf_nll_objective(flow: CopulaFlow, c: np.ndarray):
    """``(f, theta0)``: mean NLL over all conditioner parameters, for gradient checks."""
    cc = np.clip(np.asarray(c, dtype=np.float64), flow.eps, 1.0 - flow.eps)
    return G.partial_objective(flow.net.params, list(flow.net.params.arrays),
                               lambda tape, raw: -G.mean(cf_log_density_tape(tape, raw, flow, cc)))


@dataclass(frozen=True)
class CopulaTrainConfig:
    batch_size: int = 3000
    lr: float = 1e-3
    lr_final: float | None = None
    max_steps: int = 50_000
    eval_every: int = 500
    seed: int = 0


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss; ``flow`` holds the last good parameters."""

    def __init__(self, msg: str, flow: CopulaFlow, history: list):
        super().__init__(msg)
        self.flow = flow
        self.history = history


@dataclass
class TrainResult:
    flow: CopulaFlow
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False
    steps: int = 0


def train_copula_flow(flow: CopulaFlow, source: Callable[[np.random.Generator, int], np.ndarray],
                      config: CopulaTrainConfig = CopulaTrainConfig(),
                      evaluate: Callable[[CopulaFlow, int], tuple[dict, bool]] | None = None) -> TrainResult:
    """Adam on the mean NLL of batches drawn from ``source(rng, n)``.

    Every ``eval_every`` steps ``evaluate(flow, step)`` returns a metric dict
    and a stop flag; training ends once it says stop or at ``max_steps``.
    """
    rng = np.random.default_rng(config.seed)
    params = flow.net.params
    vec = params.to_vector()
    state = G.AdamState.fresh(vec.size, lr=config.lr)
    history: list[dict] = []
    current = flow
    running = []
    for step in range(1, config.max_steps + 1):
        batch = np.clip(source(rng, config.batch_size), flow.eps, 1.0 - flow.eps)
        tape = G.Tape()
        raw = params.with_vector(vec).on_tape(tape)
        loss = -G.mean(cf_log_density_tape(tape, raw, flow, batch))
        lv = float(loss.value)
        if not math.isfinite(lv):
            raise DivergenceError(f"non-finite loss at step {step}", current, history)
        grads = G.backward(tape, loss)
        if config.lr_final is not None:
            frac = (step - 1) / max(1, config.max_steps - 1)
            lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1.0 + math.cos(math.pi * frac))
            state = replace(state, lr=lr)
        new_vec, state = G.adam_step(state, vec, np.concatenate([g.ravel() for g in grads]))
        if not np.all(np.isfinite(new_vec)):
            raise DivergenceError(f"non-finite parameters at step {step}", current, history)
        vec = new_vec
        running.append(lv)
        if step % config.eval_every == 0 or step == config.max_steps:
            current = replace(flow, net=replace(flow.net, params=params.with_vector(vec)))
            entry = {"step": step, "train_nll": float(np.mean(running))}
            running = []
            stop = False
            if evaluate is not None:
                metrics, stop = evaluate(current, step)
                entry.update(metrics)
            history.append(entry)
            log.info("step %d %s", step, entry)
            if stop:
                return TrainResult(current, history, True, step)
    current = replace(flow, net=replace(flow.net, params=params.with_vector(vec)))
    return TrainResult(current, history, False, config.max_steps)
