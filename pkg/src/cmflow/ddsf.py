"""Deep dense sigmoidal flow: a strictly increasing scalar network.

Layer ``l`` maps ``h -> logit(w @ sigmoid(a * (u @ h) + b))`` where ``a > 0``
and the rows of ``w`` and ``u`` are probability vectors.  Raw parameters are
unconstrained; softplus and row softmax produce the constrained ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G

EPS = 1e-7


class DDSFError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DDSF:
    widths: tuple[int, ...]
    params: G.ParamSet
    eps: float = EPS

    def __post_init__(self):
        if len(self.widths) < 2 or self.widths[0] != 1 or self.widths[-1] != 1:
            raise ValueError(f"widths must start and end with 1, got {self.widths}")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 16, depth: int = 3, scale: float = 0.1) -> "DDSF":
        widths = (1,) + (hidden,) * (depth - 1) + (1,)
        return cls(widths, G.ParamSet(random_raw(widths, rng, scale)))

    @classmethod
    def identity(cls) -> "DDSF":
        """Single-unit flow with a=1, b=0: evaluates to its input."""
        raw_a = np.log(np.expm1(1.0))
        return cls((1, 1), G.ParamSet({"a1": [raw_a], "b1": [0.0], "w1": [[0.0]], "u1": [[0.0]]}))

    def to_json(self) -> dict:
        return {"widths": list(self.widths), "eps": self.eps, "params": self.params.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "DDSF":
        return cls(tuple(d["widths"]), G.ParamSet.from_json(d["params"]), d.get("eps", EPS))


def random_raw(widths, rng: np.random.Generator, scale: float = 0.1) -> dict[str, np.ndarray]:
    raw = {}
    for l in range(1, len(widths)):
        d, dp = widths[l], widths[l - 1]
        raw[f"a{l}"] = rng.normal(0.0, scale, d)
        raw[f"b{l}"] = rng.normal(0.0, scale, d)
        raw[f"w{l}"] = rng.normal(0.0, scale, (d, d))
        raw[f"u{l}"] = rng.normal(0.0, scale, (d, dp))
    return raw


def ddsf_param_transform(raw: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Map raw parameters to (a > 0, b, row-stochastic w, row-stochastic u)."""
    tape = G.Tape()
    out = _constrain(tape, {k: tape.const(v) for k, v in raw.items()})
    return {k: v.value for k, v in out.items()}


def _constrain(tape: G.Tape, raw: dict[str, G.Var]) -> dict[str, G.Var]:
    out = {}
    for k, v in raw.items():
        if k[0] == "a":
            out[k] = G.softplus(v)
        elif k[0] in "wu":
            out[k] = G.softmax(v)
        else:
            out[k] = v
    return out


def inert_keys(flow: DDSF, prob_output: bool = False, shift_scale_free: bool = False) -> set[str]:
    """Raw arrays with no influence on the log-derivative.

    Single-column softmax rows are constant.  Without ``prob_output`` the last
    bias only shifts the output; with ``shift_scale_free`` (objectives that
    rescale the output affinely) the last slope cancels too.
    """
    L = flow.depth
    out = {k for k in ("u1", f"w{L}") if flow.params.arrays[k].shape[-1] == 1}
    if not prob_output:
        out.add(f"b{L}")
        if shift_scale_free:
            out.add(f"a{L}")
    return out


def ddsf_logderiv_objective(flow: DDSF, x, prob_output: bool = False):
    """``(f, theta0)``: mean log-derivative at ``x`` over the identifiable raw parameters."""
    xs = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    keys = [k for k in flow.params.arrays if k not in inert_keys(flow, prob_output)]

    def loss(tape: G.Tape, raw: dict[str, G.Var]) -> G.Var:
        _, ld = ddsf_forward(tape, raw, tape.const(xs), flow.depth, flow.eps, prob_output)
        return G.mean(ld)

    return G.partial_objective(flow.params, keys, loss)


def ddsf_forward(tape: G.Tape, raw: dict[str, G.Var], x: G.Var, depth: int,
                 eps: float = EPS, prob_output: bool = False,
                 layer_marks: list[int] | None = None) -> tuple[G.Var, G.Var]:
    """Evaluate on a column of inputs ``x`` (shape (N, 1)).

    Returns ``(value, log_derivative)`` each of shape (N,).  With
    ``prob_output`` the final logit is dropped: the value is the last layer's
    mixture of sigmoids, a CDF on the real line, and the log-derivative is
    taken of that.  The clamp before each logit is treated as the identity
    in the derivative.
    """
    p = _constrain(tape, raw)
    h = x
    jac = tape.const(np.ones(x.shape))  # d h / d x, strictly positive
    for l in range(1, depth + 1):
        if layer_marks is not None:
            layer_marks.append(len(tape))
        a, b, w, u = p[f"a{l}"], p[f"b{l}"], p[f"w{l}"], p[f"u{l}"]
        ut, wt = G.transpose(u), G.transpose(w)
        s = G.sigmoid(a * G.matmul(h, ut) + b)
        y = G.matmul(s, wt)
        dy = G.matmul(G.matmul(jac, ut) * a * s * (1.0 - s), wt)
        if l == depth and prob_output:
            h, jac = y, dy
            break
        yc = G.clip(y, eps, 1.0 - eps)
        h = G.logit(yc)
        jac = dy / (yc * (1.0 - yc))
    return G.reshape(h, (-1,)), G.log(G.reshape(jac, (-1,)))


def ddsf_eval(flow: DDSF, x, prob_output: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``(value, log_derivative)`` of the flow at ``x``."""
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    for k, v in flow.params.arrays.items():
        if not np.all(np.isfinite(v)):
            raise DDSFError(f"non-finite parameter {k!r} in layer {k[1:]}")
    tape = G.Tape()
    raw = {k: tape.const(v) for k, v in flow.params.arrays.items()}
    marks: list[int] = []
    val, ld = ddsf_forward(tape, raw, tape.const(xs.reshape(-1, 1)), flow.depth, flow.eps,
                           prob_output, layer_marks=marks)
    for i, v in enumerate(tape.values[marks[0]:], start=marks[0]):
        if not np.all(np.isfinite(v)):
            layer = int(np.searchsorted(marks, i, side="right"))
            raise DDSFError(f"non-finite intermediate in layer {max(layer, 1)}")
    if np.ndim(x) == 0:
        return float(val.value[0]), float(ld.value[0])
    return val.value.reshape(np.shape(x)), ld.value.reshape(np.shape(x))
