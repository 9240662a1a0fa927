"""Command-line entry point: ``python -m cmflow <command>``.

Exit codes: 0 success (thresholds met / no violations), 2 invalid usage or
config, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cm_flow import CMFlow, cm_sample, train_cm_flow
from .copula_flow import CopulaFlow, CopulaTrainConfig, DivergenceError, cf_log_density, cf_sample, train_copula_flow
from .marginal import (MarginalTrainConfig, TailBelief, UnivariateMarginalFlow, marginal_forward,
                       marginal_full_log_density, train_marginal)
from .metrics import EvalConfig, Thresholds, jsd_pointwise_map, map_chunks, mesh_centers, metric_report
from .ref_copulas import ReferenceCopula, copula_density, copula_sample
from .render import render_svg, write_grid_csv
from .tailbound import (NetworkSpec, NoisePrior, check_generator_tail_bound, check_lemma_sum_bound,
                        check_moment_bound, survival_estimate)

log = logging.getLogger("cmflow")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    copula: str = "clayton"
    theta: float = 2.0
    constrained: bool = False
    batch: int = 3000
    eval_batch: int = 500_000
    mesh: int = 300
    bins: int = 25
    jsd_threshold: float | None = 1e-3
    t_threshold: float | None = 1e-2
    m_threshold: float | None = 8e-2
    max_steps: int = 50_000
    eval_every: int = 500
    lr: float = 1e-3
    lr_final: float | None = None
    out: str = "runs/benchmark"

    def validate(self) -> None:
        for name in ("batch", "eval_batch", "bins", "max_steps", "eval_every"):
            if getattr(self, name) <= 0:
                raise UsageError(f"{name} must be positive")
        if self.mesh < 2:
            raise UsageError("mesh must be at least 2")
        if not self.lr > 0:
            raise UsageError("lr must be positive")
        for name in ("jsd_threshold", "t_threshold", "m_threshold"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise UsageError(f"{name} must be positive or absent")
        try:
            ReferenceCopula(self.copula, self.theta)
        except ValueError as e:
            raise UsageError(str(e)) from e

    def eval_config(self) -> EvalConfig:
        return EvalConfig(self.mesh, self.bins, self.eval_batch, self.batch, self.seed + 1,
                          Thresholds(self.jsd_threshold, self.t_threshold, self.m_threshold))


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o)}")


def _clean(obj):
    """Replace non-finite floats with strings so reports stay strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else ("inf" if obj > 0 else "-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def run_benchmark(cfg: RunConfig) -> tuple[int, dict]:
    """Train a copula flow on a reference copula and write the report bundle."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    target = ReferenceCopula(cfg.copula, cfg.theta)
    rng = np.random.default_rng(cfg.seed)
    flow = CopulaFlow.init(rng, constrained=cfg.constrained)
    ecfg = cfg.eval_config()

    def evaluate(f, step):
        rep, stop = metric_report(f, target, ecfg)
        return {"jsd": rep.jsd, "T1": rep.T[0], "T2": rep.T[1], "M1": rep.M[0], "M2": rep.M[1],
                "nll": rep.nll}, stop

    tcfg = CopulaTrainConfig(cfg.batch, cfg.lr, cfg.lr_final, cfg.max_steps, cfg.eval_every, cfg.seed)
    artifacts = []
    code = EXIT_OK
    error = None
    try:
        result = train_copula_flow(flow, lambda r, n: copula_sample(target, n, r), tcfg, evaluate)
        flow, history, steps, early = result.flow, result.history, result.steps, result.stopped_early
    except DivergenceError as e:
        flow, history, steps, early = e.flow, e.history, None, False
        error, code = str(e), EXIT_NUMERIC
    _dump_json(out / "model.json", flow.to_json())
    artifacts.append("model.json")

    report, met = metric_report(flow, target, ecfg)
    hist_cols = ["step", "train_nll", "jsd", "T1", "T2", "M1", "M2", "nll"]
    _write_csv(out / "history.csv", hist_cols, [[h.get(c, "") for c in hist_cols] for h in history])
    artifacts.append("history.csv")

    centers = mesh_centers(cfg.mesh)
    flat = centers.reshape(-1, 2)
    flow_dens = np.exp(map_chunks(lambda z: cf_log_density(flow, z), flat)).reshape(cfg.mesh, cfg.mesh)
    target_dens = copula_density(target, flat).reshape(cfg.mesh, cfg.mesh)
    jmap = jsd_pointwise_map(lambda c: copula_density(target, c),
                             lambda c: np.exp(map_chunks(lambda z: cf_log_density(flow, z), c)), cfg.mesh)
    for name, grid in (("density_grid", flow_dens), ("target_grid", target_dens), ("jsd_map", jmap)):
        write_grid_csv(out / f"{name}.csv", centers, grid)
        render_svg(out / f"{name}.csv", out / f"{name}.svg")
        artifacts += [f"{name}.csv", f"{name}.svg"]

    if code == EXIT_OK and not met:
        code = EXIT_FAIL
    metrics = report.to_json()
    doc = {
        "config": asdict(cfg),
        "jsd": metrics["jsd"], "T": metrics["T"], "M": metrics["M"], "nll": metrics["nll"],
        "metrics": metrics,
        "thresholds_met": met,
        "stopped_early": early,
        "steps": steps,
        "history": history,
        "error": error,
        "artifacts": sorted(artifacts + ["report.json"]),
    }
    if cfg.constrained:
        doc["note"] = "constrained flow: second output coordinate is the uniform input itself"
    doc = _clean(doc)
    _dump_json(out / "report.json", doc)
    return code, doc


def _load_belief(path) -> TailBelief:
    try:
        return TailBelief.from_json(json.loads(Path(path).read_text()))
    except FileNotFoundError as e:
        raise UsageError(f"belief file not found: {path}") from e
    except (ValueError, KeyError, TypeError) as e:
        raise UsageError(f"invalid belief: {e}") from e


def _load_data(path, ncols: int = 1) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter="," if ncols > 1 else None, ndmin=2)
    except FileNotFoundError as e:
        raise UsageError(f"data file not found: {path}") from e
    except ValueError:
        try:
            data = np.loadtxt(path, delimiter="," if ncols > 1 else None, ndmin=2, skiprows=1)
        except ValueError as e:
            raise UsageError(f"could not parse {path}: {e}") from e
    if data.shape[1] != ncols:
        raise UsageError(f"{path}: expected {ncols} column(s), got {data.shape[1]}")
    if not np.all(np.isfinite(data)):
        raise UsageError(f"{path}: non-finite values")
    return data[:, 0] if ncols == 1 else data


def cmd_train_marginal(args) -> int:
    belief = _load_belief(args.belief)
    data = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    flow = UnivariateMarginalFlow.create(belief, rng, data=data)
    cfg = MarginalTrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed)
    try:
        flow, hist = train_marginal(flow, data, cfg)
    except ValueError as e:
        raise UsageError(str(e)) from e
    inside = (data != belief.alpha) & (data != belief.beta)
    nll = float(-np.mean(marginal_full_log_density(flow, data[inside])))
    _dump_json(out / "model.json", flow.to_json())
    _write_csv(out / "loss.csv", ["epoch", "body_nll"], [[i + 1, v] for i, v in enumerate(hist)])
    _dump_json(out / "marginal_report.json", _clean({
        "nll": nll, "body_nll": hist[-1], "n": int(data.size), "n_body": int(np.sum((data > belief.alpha) & (data < belief.beta))),
        "config": {"seed": args.seed, "epochs": args.epochs, "batch": args.batch, "lr": args.lr},
    }))
    log.info("final NLL over all data %.5f", nll)
    return EXIT_OK


def cmd_train_cm(args) -> int:
    beliefs = (_load_belief(args.belief), _load_belief(args.belief2))
    data = _load_data(args.data, ncols=2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    model = train_cm_flow(data, beliefs, rng,
                          MarginalTrainConfig(epochs=args.epochs, seed=args.seed),
                          CopulaTrainConfig(batch_size=args.batch, max_steps=args.max_steps, seed=args.seed),
                          constrained=args.constrained)
    _dump_json(out / "model.json", model.to_json())
    return EXIT_OK


def _load_model(path):
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise UsageError(f"model file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"model file is not JSON: {e}") from e
    kind = d.get("kind")
    try:
        if kind == "marginal":
            return UnivariateMarginalFlow.from_json(d)
        if kind == "copula_flow":
            return CopulaFlow.from_json(d)
        if kind == "cm_flow":
            return CMFlow.from_json(d)
    except (KeyError, ValueError, TypeError) as e:
        raise UsageError(f"malformed model: {e}") from e
    raise UsageError(f"unknown model kind {kind!r}")


def cmd_sample(args) -> int:
    if args.n < 0:
        raise UsageError("n must be non-negative")
    model = _load_model(args.model)
    rng = np.random.default_rng(args.seed)
    if isinstance(model, UnivariateMarginalFlow):
        header = ["x"]
        rows = marginal_forward(model, rng.random(args.n)).reshape(-1, 1) if args.n else np.zeros((0, 1))
    else:
        header = ["c1", "c2"] if isinstance(model, CopulaFlow) else ["x1", "x2"]
        fn = (lambda u: cf_sample(model, u)) if isinstance(model, CopulaFlow) else (lambda u: cm_sample(model, u))
        rows = fn(rng.random((args.n, 2))) if args.n else np.zeros((0, 2))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, header, rows.tolist())
    return EXIT_OK


def run_tail_verify(prior_family: str, d0s: list[int], n_nets: int, n: int, ps: list[int], seed: int,
                    out: Path, width: int = 16, d1: int = 2) -> tuple[int, dict]:
    out.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    net_seed, check_seed = ss.spawn(2)
    rng_nets = np.random.default_rng(net_seed)
    check_seeds = iter(np.random.default_rng(check_seed).integers(0, 2**63 - 1, size=100_000))
    lemma, theorem, moments = [], [], []
    violations = 0
    artifacts = []
    for d0 in sorted(set([1] + list(d0s))):
        prior = NoisePrior(prior_family, d0)
        for a, b in ((1.0, 0.0), (0.5, 1.0), (2.0, -1.0)):
            rep = check_lemma_sum_bound(a, b, d0, prior, None, n, int(next(check_seeds)))
            violations += len(rep.violations)
            lemma.append(rep.to_json())
        if d0 == 1 and 1 not in d0s:
            continue
        for k in range(n_nets):
            net = NetworkSpec.random(rng_nets, (d0, width, width, d1))
            for i in range(d1):
                rep = check_generator_tail_bound(net, prior, i, None, n, int(next(check_seeds)))
                violations += len(rep.violations)
                theorem.append({"net": k, **rep.to_json()})
                if k == 0 and i == 0:
                    name = f"survival_d{d0}.csv"
                    _write_csv(out / name, ["x", "lhs_survival", "rhs_bound", "rhs_exact"],
                               zip(rep.x, rep.lhs, rep.rhs, rep.meta["rhs_exact"]))
                    artifacts.append(name)
            if k == 0:
                for p in ps:
                    mrep = check_moment_bound(net, prior, p, seed=int(next(check_seeds)))
                    if not mrep.premise_violated and not mrep.ok:
                        violations += 1
                    moments.append({"d0": d0, **mrep.to_json()})
    doc = _clean({
        "config": {"prior": prior_family, "d0": list(d0s), "n_nets": n_nets, "n": n, "p": list(ps),
                   "seed": seed, "width": width, "d1": d1},
        "violations": violations,
        "lemma": lemma, "theorem": theorem, "moments": moments,
        "artifacts": sorted(artifacts + ["tail_report.json"]),
    })
    _dump_json(out / "tail_report.json", doc)
    return (EXIT_OK if violations == 0 else EXIT_FAIL), doc


def _int_list(s: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from e


def _opt_float(s: str) -> float | None:
    return None if s.lower() in ("none", "off") else float(s)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("benchmark", help="train a copula flow on a reference copula")
    b.add_argument("--copula", default="clayton", choices=["clayton", "frank", "gumbel", "independence"])
    b.add_argument("--theta", type=float, default=2.0)
    b.add_argument("--constrained", action="store_true")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--batch", type=int, default=3000)
    b.add_argument("--eval-batch", type=int, default=500_000)
    b.add_argument("--mesh", type=int, default=300)
    b.add_argument("--bins", type=int, default=25)
    b.add_argument("--max-steps", type=int, default=50_000)
    b.add_argument("--eval-every", type=int, default=500)
    b.add_argument("--lr", type=float, default=1e-3)
    b.add_argument("--lr-final", type=float, default=None)
    b.add_argument("--jsd-threshold", type=_opt_float, default=1e-3)
    b.add_argument("--t-threshold", type=_opt_float, default=1e-2)
    b.add_argument("--m-threshold", type=_opt_float, default=8e-2)
    b.add_argument("--out", default="runs/benchmark")

    t = sub.add_parser("tail-verify", help="Monte Carlo checks of the generator tail and moment bounds")
    t.add_argument("--prior", default="gaussian", choices=["gaussian", "uniform", "laplace", "cauchy"])
    t.add_argument("--d0", type=_int_list, default=[2, 5, 10])
    t.add_argument("--n-nets", type=int, default=20)
    t.add_argument("--n", type=int, default=1_000_000)
    t.add_argument("--p", type=_int_list, default=[1, 2, 4])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="runs/tail")

    m = sub.add_parser("train-marginal", help="fit a marginal flow under a tail belief")
    m.add_argument("--data", required=True)
    m.add_argument("--belief", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--epochs", type=int, default=30)
    m.add_argument("--batch", type=int, default=1000)
    m.add_argument("--lr", type=float, default=5e-3)
    m.add_argument("--out", default="runs/marginal")

    c = sub.add_parser("train-cm", help="staged training of a CM flow on two-column data")
    c.add_argument("--data", required=True)
    c.add_argument("--belief", required=True)
    c.add_argument("--belief2", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--epochs", type=int, default=30)
    c.add_argument("--batch", type=int, default=3000)
    c.add_argument("--max-steps", type=int, default=5000)
    c.add_argument("--constrained", action="store_true")
    c.add_argument("--out", default="runs/cm")

    s = sub.add_parser("sample", help="draw samples from a saved model")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="samples.csv")

    r = sub.add_parser("render", help="render a grid or curve CSV as SVG")
    r.add_argument("--input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--style", default="auto", choices=["auto", "grid", "curve"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        if args.command == "benchmark":
            cfg = RunConfig(args.seed, args.copula, args.theta, args.constrained, args.batch, args.eval_batch,
                            args.mesh, args.bins, args.jsd_threshold, args.t_threshold, args.m_threshold,
                            args.max_steps, args.eval_every, args.lr, args.lr_final, args.out)
            code, _ = run_benchmark(cfg)
        elif args.command == "tail-verify":
            if args.n < 100 or args.n_nets < 1 or any(d < 1 for d in args.d0):
                raise UsageError("need n >= 100, n-nets >= 1 and positive d0")
            code, _ = run_tail_verify(args.prior, args.d0, args.n_nets, args.n, args.p, args.seed, Path(args.out))
        elif args.command == "train-marginal":
            code = cmd_train_marginal(args)
        elif args.command == "train-cm":
            code = cmd_train_cm(args)
        elif args.command == "sample":
            code = cmd_sample(args)
        else:
            try:
                render_svg(args.input, args.out, args.style)
            except (OSError, ValueError, KeyError) as e:
                raise UsageError(str(e)) from e
            code = EXIT_OK
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, RuntimeError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code
