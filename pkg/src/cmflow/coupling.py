"""Two-dimensional Real NVP built from affine coupling layers.

Each layer rescales and shifts one coordinate using a small tanh network of
the other.  Log-scales pass through ``S_max * tanh(s / S_max)`` to keep them
bounded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G

S_MAX = 5.0


@dataclass(frozen=True)
class RealNVP2:
    """Stack of coupling layers.

    ``active[k]`` is the 0-based coordinate transformed by layer ``k``.  All
    conditioner weights live in one :class:`ParamSet` keyed ``"{k}.W1"`` etc.
    """

    active: tuple[int, ...]
    params: G.ParamSet
    constrained: bool = False
    s_max: float = S_MAX
    hidden: int = 32

    def __post_init__(self):
        if any(j not in (0, 1) for j in self.active):
            raise ValueError("active coordinates must be 0 or 1")
        if self.constrained and any(j != 0 for j in self.active):
            raise ValueError("a constrained net may only transform the first coordinate")

    @property
    def n_layers(self) -> int:
        return len(self.active)

    @classmethod
    def init(cls, rng: np.random.Generator, n_layers: int = 6, hidden: int = 32,
             constrained: bool = False, s_max: float = S_MAX, out_scale: float = 0.0) -> "RealNVP2":
        """Fresh net.  With ``out_scale = 0`` the output layers are zero and the map is the identity."""
        active = tuple(0 for _ in range(n_layers)) if constrained else tuple(k % 2 for k in range(n_layers))
        arrays = {}
        for k in range(n_layers):
            arrays[f"{k}.W1"] = rng.normal(0.0, 1.0, (hidden, 1))
            arrays[f"{k}.b1"] = np.zeros(hidden)
            arrays[f"{k}.W2"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden))
            arrays[f"{k}.b2"] = np.zeros(hidden)
            arrays[f"{k}.W3"] = rng.normal(0.0, out_scale, (2, hidden)) if out_scale else np.zeros((2, hidden))
            arrays[f"{k}.b3"] = rng.normal(0.0, out_scale, 2) if out_scale else np.zeros(2)
        return cls(active, G.ParamSet(arrays), constrained, s_max, hidden)

    def to_json(self) -> dict:
        return {"active": [j + 1 for j in self.active], "constrained": self.constrained,
                "s_max": self.s_max, "hidden": self.hidden, "params": self.params.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "RealNVP2":
        return cls(tuple(j - 1 for j in d["active"]), G.ParamSet.from_json(d["params"]),
                   bool(d["constrained"]), float(d["s_max"]), int(d["hidden"]))


def _conditioner(raw: dict[str, G.Var], k: int, x: G.Var, s_max: float) -> tuple[G.Var, G.Var]:
    h = G.tanh(G.affine(x, raw[f"{k}.W1"], raw[f"{k}.b1"]))
    h = G.tanh(G.affine(h, raw[f"{k}.W2"], raw[f"{k}.b2"]))
    out = G.affine(h, raw[f"{k}.W3"], raw[f"{k}.b3"])
    s_raw = G.take(out, (slice(None), 0))
    t = G.take(out, (slice(None), 1))
    return s_max * G.tanh(s_raw / s_max), t


def _split(x: G.Var) -> list[G.Var]:
    return [G.take(x, (slice(None), 0)), G.take(x, (slice(None), 1))]


def _join(cols: list[G.Var]) -> G.Var:
    return G.concat([G.reshape(c, (-1, 1)) for c in cols], axis=1)


def nvp_forward_tape(tape: G.Tape, raw: dict[str, G.Var], net: RealNVP2, x: G.Var) -> tuple[G.Var, G.Var]:
    cols = _split(x)
    logdet = None
    for k, j in enumerate(net.active):
        s, t = _conditioner(raw, k, G.reshape(cols[1 - j], (-1, 1)), net.s_max)
        cols[j] = cols[j] * G.exp(s) + t
        logdet = s if logdet is None else logdet + s
    if logdet is None:
        logdet = tape.const(np.zeros(x.shape[0]))
    return _join(cols), logdet


def nvp_inverse_tape(tape: G.Tape, raw: dict[str, G.Var], net: RealNVP2, y: G.Var) -> tuple[G.Var, G.Var]:
    cols = _split(y)
    logdet = None
    for k in range(net.n_layers - 1, -1, -1):
        j = net.active[k]
        s, t = _conditioner(raw, k, G.reshape(cols[1 - j], (-1, 1)), net.s_max)
        cols[j] = (cols[j] - t) * G.exp(-s)
        logdet = -s if logdet is None else logdet - s
    if logdet is None:
        logdet = tape.const(np.zeros(y.shape[0]))
    return _join(cols), logdet


def _run(fn, net: RealNVP2, x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x.reshape(-1, 2)
    if not np.all(np.isfinite(xs)):
        raise ValueError("input must be finite")
    tape = G.Tape()
    raw = {k: tape.const(v) for k, v in net.params.arrays.items()}
    y, ld = fn(tape, raw, net, tape.const(xs))
    if not (np.all(np.isfinite(y.value)) and np.all(np.isfinite(ld.value))):
        raise FloatingPointError("non-finite coupling output")
    if single:
        return y.value[0], float(ld.value[0])
    return y.value, ld.value


def nvp_forward(net: RealNVP2, x) -> tuple[np.ndarray, np.ndarray]:
    """``(y, log|det dy/dx|)`` for a pair or an (N, 2) batch."""
    return _run(nvp_forward_tape, net, x)


def nvp_inverse(net: RealNVP2, y) -> tuple[np.ndarray, np.ndarray]:
    """``(x, log|det dx/dy|)``; the log-determinant is minus the forward one."""
    return _run(nvp_inverse_tape, net, y)
