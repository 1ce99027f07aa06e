"""
Command-line interface.

    prefcoal simulate --scenario CE-PP --n 100 --replicates 2 --seed 7 --out data/
    prefcoal infer data/CE-PP_n100_rep000_times.csv --model adapref --engine laplace --out fits/
    prefcoal metrics --summary fits/..._summary.csv --truth data/..._truth.csv --out stats/
    prefcoal compare stats/ --out tables/

Options can also come from a plain ``key=value`` file given with
``--config``; flags on the command line win over the file, which wins over
built-in defaults. Every output starts with a header carrying the tool
version and a hash of the resolved configuration. Wall-clock timings go to a
separate ``*_runtime.json`` so that all other outputs are byte-identical
across reruns.

Exit codes: 0 success, 1 input/output problem, 2 usage or configuration
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError

from . import __version__
from .diagnostics import diagnostics
from .genealogy import (
    GenealogyError,
    NewickParseError,
    TopologyError,
    build_grid,
    grid_stats,
    read_newick,
    serialize_newick,
)
from .hmc import HmcSettings, InitializationError, run_hmc
from .inla import ConvergenceError, inla_fit
from .metrics import STAT_COLUMNS, env, mrw, rank_models, read_stats, rw, sre, waic, write_stats
from .model import LIKELIHOODS, ModelSpec
from .priors import FieldPrior
from .simulate import SCENARIOS, read_times, replicate_rng, scenario, simulate_dataset, write_times
from .summary import EvalGrid, TableSummary, summarize

EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 1, 2, 3
SUMMARY_COLUMNS = (
    "time", "ne_median", "ne_q025", "ne_q975", "beta_median", "beta_q025", "beta_q975",
)
TRUTH_COLUMNS = ("time", "ne", "intensity", "beta")
# options that cannot change any output
_NOT_HASHED = {"out", "threads", "config", "command", "func"}


class ConfigError(ValueError):
    pass


class InputError(OSError):
    pass


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _default_threads():
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="prefcoal", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"prefcoal {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="plain-text key=value file with option defaults")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--threads", type=_positive_int, default=_default_threads())

    s = sub.add_parser("simulate", help="simulate genealogies for a benchmark scenario")
    common(s)
    s.add_argument("--scenario", required=False, help=f"one of {', '.join(SCENARIOS)}")
    s.add_argument("--n", type=int, default=100, choices=(100, 300, 500))
    s.add_argument("--replicates", type=_positive_int, default=1)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--K", type=_positive_int, default=100, help="points of the truth grid")
    s.set_defaults(func=cmd_simulate)

    i = sub.add_parser("infer", help="estimate N_e (and beta) from one genealogy")
    common(i)
    i.add_argument("input", nargs="?", help="Newick tree or *_times.csv event file")
    i.add_argument("--model", default="adapref", choices=LIKELIHOODS)
    i.add_argument("--theta-prior", default="gmrf1")
    i.add_argument("--alpha-prior", default="gmrf1")
    i.add_argument("--engine", default="hmc", choices=("hmc", "laplace"))
    i.add_argument("--M", type=int, default=100, help="number of grid cells")
    i.add_argument("--zeta1", type=float, default=0.05, help="hyperprior scale for theta")
    i.add_argument("--zeta2", type=float, default=0.05, help="hyperprior scale for alpha")
    i.add_argument("--parameterization", default="noncentered", choices=("noncentered", "centered"))
    i.add_argument("--beta-nonnegative", type=_bool, default=False)
    i.add_argument("--chains", type=_positive_int, default=4)
    i.add_argument("--iterations", type=_positive_int, default=2000)
    i.add_argument("--burn-in", type=int, default=1000)
    i.add_argument("--thin", type=_positive_int, default=2)
    i.add_argument("--target-accept", type=float, default=0.9)
    i.add_argument("--max-depth", type=_positive_int, default=10)
    i.add_argument("--algorithm", default="nuts", choices=("nuts", "hmc"))
    i.add_argument("--strategy", default="laplace", choices=("laplace", "gaussian"))
    i.add_argument("--K", type=_positive_int, default=100, help="points of the output grid")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_infer)

    m = sub.add_parser("metrics", help="accuracy statistics of summaries against a truth file")
    common(m)
    m.add_argument("--summary", action="append", default=None, help="summary CSV (repeatable)")
    m.add_argument("--truth", help="truth CSV written by simulate")
    m.add_argument("--scenario", default=None, help="override the scenario label")
    m.add_argument("--replicate", default=None, help="override the replicate label")
    m.set_defaults(func=cmd_metrics)

    c = sub.add_parser("compare", help="top-two tallies over replicate statistics")
    common(c)
    c.add_argument("directory", nargs="?", help="directory holding *_stats.csv files")
    c.add_argument("--quantity", default="ne", choices=("ne", "beta"))
    c.set_defaults(func=cmd_compare)
    return p


def read_config(path):
    """``key=value`` lines; ``#`` starts a comment; dashes and underscores are equivalent."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise InputError(f"cannot read config file {path}: {e.strerror or e}") from e
    for k, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{k}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known - {"config"}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        sub.set_defaults(**{k: v for k, v in cfg.items() if k != "config"})
        args = parser.parse_args(argv)
    return args


def resolved_config(args):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_HASHED}
    return cfg


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def header(cfg):
    return f"prefcoal {__version__} config={config_hash(cfg)}"


def _fmt(v):
    if v is None:
        return ""
    v = float(v)
    return "" if not np.isfinite(v) else repr(v)


def _write_csv(path, head, columns, rows, meta=None):
    with open(path, "w") as fh:
        fh.write(f"# {head}\n")
        if meta:
            fh.write(f"# {meta}\n")
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(x) for x in r) + "\n")


def _read_csv(path):
    meta = {}
    rows = []
    cols = None
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = v
                continue
            if cols is None:
                cols = line.split(",")
                continue
            if line:
                rows.append(line.split(","))
    if cols is None:
        raise InputError(f"{path}: no header row")
    if any(len(r) != len(cols) for r in rows):
        raise InputError(f"{path}: rows do not match the header")
    try:
        data = {c: np.array([float(r[j]) if r[j] else np.nan for r in rows])
                for j, c in enumerate(cols)}
    except ValueError as e:
        raise InputError(f"{path}: {e}") from None
    return data, meta


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _simulate_one(name, n, seed, r, K):
    d = simulate_dataset(scenario(name, n), n, replicate_rng(seed, r))
    g = d.genealogy
    v = EvalGrid.default(g.root_time, K).v
    ne, lam, beta = d.truth(v)
    return g, np.column_stack([v, ne, lam, beta])


def cmd_simulate(args):
    if args.scenario is None:
        raise ConfigError("--scenario is required")
    try:
        s = scenario(args.scenario, args.n)
    except KeyError as e:
        raise ConfigError(e.args[0]) from None
    if args.seed is None:
        if os.environ.get("CI"):
            raise ConfigError("--seed is mandatory when CI is set")
        args.seed = 0
    cfg = resolved_config(args)
    head = header(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(s.name, args.n, args.seed, r, args.K) for r in range(args.replicates)]
    if args.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(args.threads, len(jobs))) as ex:
            results = list(ex.map(_simulate_one, *zip(*jobs)))
    else:
        results = [_simulate_one(*j) for j in jobs]
    written = []
    for r, (g, truth) in enumerate(results):
        stem = out / f"{s.name}_n{args.n}_rep{r:03d}"
        Path(f"{stem}.nwk").write_text(serialize_newick(g, digits=17, comment=head) + "\n")
        write_times(f"{stem}_times.csv", g, header=head)
        _write_csv(f"{stem}_truth.csv", head, TRUTH_COLUMNS, truth,
                   meta=f"scenario={s.name} n={args.n} replicate={r} c={s.c!r}")
        written.append(str(stem))
    return written


def _load_genealogy(path):
    if path is None:
        raise ConfigError("an input file is required")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"input file not found: {path}")
    try:
        if p.suffix.lower() == ".csv":
            return read_times(p)
        return read_newick(p)
    except (NewickParseError, TopologyError, GenealogyError) as e:
        raise InputError(f"cannot read genealogy from {path}: {e}") from e


def _priors(args):
    try:
        tp = FieldPrior.parse(args.theta_prior, zeta=args.zeta1)
        ap = FieldPrior.parse(args.alpha_prior, zeta=args.zeta2)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if args.engine == "laplace":
        if tp.kind != "gmrf" or (args.model == "adapref" and ap.kind != "gmrf"):
            raise ConfigError("the laplace engine requires GMRF priors")
        if args.model == "parpref" and args.beta_nonnegative:
            raise ConfigError("the laplace engine does not support --beta-nonnegative")
    return tp, ap


def cmd_infer(args):
    tp, ap = _priors(args)
    if args.M < 2:
        raise ConfigError("--M must be at least 2")
    try:
        settings = HmcSettings(
            chains=args.chains, iterations=args.iterations, burn_in=args.burn_in,
            thin=args.thin, target_accept=args.target_accept, max_depth=args.max_depth,
            seed=args.seed, algorithm=args.algorithm, workers=args.threads,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
    g = _load_genealogy(args.input)
    cfg = resolved_config(args)
    cfg["input"] = Path(args.input).name
    head = header(cfg)
    grid = build_grid(g, args.M)
    st = grid_stats(g, grid)
    spec = ModelSpec(
        st, args.model, tp, ap if args.model == "adapref" else None, grid,
        parameterization=args.parameterization, beta_nonnegative=args.beta_nonnegative,
    )
    t0 = time.perf_counter()
    diag = {"config": cfg, "model": spec.label, "engine": args.engine}
    if args.engine == "hmc":
        chains = run_hmc(spec, settings)
        summ = summarize(chains, grid)
        dg = diagnostics(chains)
        diag.update(dg.as_dict())
        diag["max_rhat"] = float(np.nanmax(dg.rhat))
        diag["min_ess"] = float(np.nanmin(dg.ess)) if np.any(np.isfinite(dg.ess)) else None
        diag["step_size"] = [float(e) for e in chains.step_size]
        diag["warmup_divergences"] = int(np.sum(chains.warmup_divergences))
        diag["waic"] = waic(chains.pointwise)
        diag["draws"] = int(chains.n_chains * chains.n_draws)
    else:
        summ = inla_fit(spec, strategy=args.strategy)
        hg = summ.hyper
        diag["hyper_names"] = hg.names
        diag["hyper_points"] = [[float(x) for x in p] for p in hg.points]
        diag["hyper_weights"] = [float(w) for w in hg.weights]
        diag["strategy"] = args.strategy
    elapsed = time.perf_counter() - t0

    v = EvalGrid.default(g.root_time, args.K).v
    ne = summ.ne_at(v)
    be = summ.beta_at(v)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = Path(args.input).stem.removesuffix("_times")
    stem = out / f"{base}_{spec.label}_{args.engine}"
    _write_csv(f"{stem}_summary.csv", head, SUMMARY_COLUMNS, np.column_stack([v, *ne, *be]),
               meta=f"model={spec.label} engine={args.engine}")
    _write_json(f"{stem}_diagnostics.json", {"header": head, **diag})
    _write_json(f"{stem}_runtime.json", {"header": head, "seconds": elapsed})
    return str(stem)


_STEM = re.compile(r"(?P<scenario>[A-Za-z]+-[A-Za-z]+)_n(?P<n>\d+)_rep(?P<rep>\d+)")


def _table(path):
    d, meta = _read_csv(path)
    missing = [c for c in SUMMARY_COLUMNS if c not in d]
    if missing:
        raise InputError(f"{path}: missing columns {', '.join(missing)}")
    t = TableSummary(d["time"], d["ne_median"], d["ne_q025"], d["ne_q975"],
                     d["beta_median"], d["beta_q025"], d["beta_q975"])
    return t, meta


def cmd_metrics(args):
    if not args.summary or not args.truth:
        raise ConfigError("--summary and --truth are required")
    for p in [*args.summary, args.truth]:
        if not Path(p).is_file():
            raise InputError(f"input file not found: {p}")
    truth, tmeta = _read_csv(args.truth)
    grid = EvalGrid(truth["time"])
    m = _STEM.search(Path(args.truth).name)
    scen = args.scenario or tmeta.get("scenario") or (m.group("scenario") if m else "unknown")
    rep = args.replicate or tmeta.get("replicate") or (str(int(m.group("rep"))) if m else "0")
    cfg = resolved_config(args)
    cfg["summary"] = [Path(s).name for s in args.summary]
    cfg["truth"] = Path(args.truth).name
    head = header(cfg)
    rows = []
    for path in args.summary:
        summ, meta = _table(path)
        model = meta.get("model", Path(path).stem)
        if meta.get("engine"):
            model = f"{model}-{meta['engine']}"
        quantities = [("ne", truth["ne"])]
        if summ.has_beta and "beta" in truth:
            quantities.append(("beta", truth["beta"]))
        for q, tv in quantities:
            try:
                stats = dict(sre=sre(summ, tv, grid, q), mrw=mrw(summ, tv, grid, q),
                             env=env(summ, tv, grid, q), rw=rw(summ, grid, q))
            except ValueError as e:
                raise InputError(f"{path}: {e}") from e
            rows.append(dict(scenario=scen, replicate=rep, model=model, quantity=q, **stats))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = m.group(0) if m else Path(args.truth).stem
    path = out / f"{stem}_stats.csv"
    write_stats(path, rows, STAT_COLUMNS, header=head)
    return str(path)


def cmd_compare(args):
    if args.directory is None:
        raise ConfigError("a directory of *_stats.csv files is required")
    d = Path(args.directory)
    if not d.is_dir():
        raise InputError(f"not a directory: {d}")
    files = sorted(d.glob("*_stats.csv"))
    if not files:
        raise InputError(f"no *_stats.csv files in {d}")
    rows = [r for f in files for r in read_stats(f) if r["quantity"] == args.quantity]
    if not rows:
        raise InputError(f"no rows for quantity {args.quantity!r}")
    cfg = resolved_config(args)
    cfg["directory"] = d.name
    cfg["files"] = [f.name for f in files]
    table = rank_models(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ranking_{args.quantity}.csv"
    cols = ("scenario", "statistic", "model", "top2_count", "n_replicates", "top2_percent",
            "tie_breaks")
    write_stats(path, table, cols, header=header(cfg))
    return str(path)


# ---------------------------------------------------------------------------


def main(argv=None):
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except InputError as e:
        print(f"prefcoal: error: {e}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as e:
        print(f"prefcoal: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.func(args)
    except ConfigError as e:
        print(f"prefcoal: configuration error: {e}", file=sys.stderr)
        build_parser().print_usage(sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, InitializationError, LinAlgError, FloatingPointError) as e:
        print(f"prefcoal: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"prefcoal: error: {e}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
