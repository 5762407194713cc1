"""Command-line front end: ``momentprop <command> [flags]``.

Exit codes: 0 success, 1 parse/validation error, 2 size limit, 3 divergence.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import bounds, oracles, tail
from .errors import DivergenceError, ModelError, MomentPropError, PreconditionError, SizeLimitError
from .kron import size_limit, get_size_limit
from .model import (
    Add,
    Const,
    InitialStateModel,
    Mul,
    PolynomialSystemSpec,
    Source,
    Trig,
    build_logistic_model,
    distribution_from_dict,
    load_model,
    demo_logistic_model,
    demo_vehicle_model,
    save_model,
    Finite,
    Point,
)
from .propagation import (
    build_propagator,
    extract_moment,
    format_float,
    initial_state_for,
    iter_propagate,
    propagate,
    write_trajectory_csv,
)

log = logging.getLogger("momentprop")

EXIT_OK, EXIT_INPUT, EXIT_SIZE, EXIT_DIVERGED = 0, 1, 2, 3
CACHE_DIR = ".moment_cache"
STRATEGIES = {"row-norm": bounds.BY_ROW_NORM, "moment-norm": bounds.BY_MOMENT_NORM}


@contextlib.contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _propagator(args, spec):
    cache = None if args.no_cache else CACHE_DIR
    return build_propagator(spec.coeffs, args.nt, basis=args.basis, cache_dir=cache, threads=args.threads)


# --------------------------------------------------------------------------
# commands


def cmd_propagate(args):
    spec = load_model(args.model)
    blocks = _int_list(args.blocks)
    if any(b > args.nt for b in blocks):
        raise PreconditionError(f"requested blocks {blocks} exceed N_T={args.nt}")
    p = _propagator(args, spec)
    states = []
    status = None
    try:
        for s in iter_propagate(p, initial_state_for(p, spec.init), args.steps):
            states.append(s)
    except DivergenceError as exc:
        status = f"diverged at step {exc.step}"
    with _output(args.out) as fh:
        write_trajectory_csv(states, blocks, fh, status=status)
    if status:
        log.error("%s (N_T=%d)", status, args.nt)
        return EXIT_DIVERGED
    return EXIT_OK


def _j_sizes(text, full):
    if text in ("even", None):
        sizes = list(range(0, full + 1, 2))
    elif text == "all":
        sizes = list(range(full + 1))
    else:
        sizes = [full if v.strip() == "full" else int(v) for v in text.split(",") if v.strip()]
    if full not in sizes and text in ("even", None):
        sizes.append(full)
    return sorted({min(s, full) for s in sizes})


def cmd_error_bound(args):
    spec = load_model(args.model)
    ec = bounds.build_error_coefficients(spec.coeffs, args.j0, args.steps, args.nt)
    if ec.exact:
        log.info("exact: j0*d_S^t = %d <= N_T = %d, every bound is zero", ec.top, args.nt)
    reports = [
        bounds.bound_report(ec, spec.init, size, STRATEGIES[args.j_strategy])
        for size in _j_sizes(args.j_sizes, ec.top + 1)
    ]
    with _output(args.out) as fh:
        bounds.write_bound_rows(reports, fh)
    return EXIT_OK


def cmd_tail(args):
    spec = load_model(args.model)
    p = _propagator(args, spec)
    states = propagate(p, initial_state_for(p, spec.init), args.steps)
    seed = oracles.resolve_seed(args.seed)
    extra = ["status"] + [f"center_{i}" for i in range(spec.n)]
    if args.mc:
        extra += ["mc_frequency", "mc_se"]
    rows = []
    for s in states:
        J_size = args.j_per_step * s.t
        try:
            si = tail.safety_inputs(spec, s, J_size, STRATEGIES[args.j_strategy])
        except SizeLimitError as exc:
            rows.append([s.t, "", "", "", "", "", f"size-limit: {exc}"] + [""] * (len(extra) - 1))
            continue
        num = tail.tail_numerator(si.x1, si.x2_diag, si.eps_i, si.eps_ii)
        alpha = tail.safety_radius(si.x1, si.x2_diag, si.eps, si.eps_i, si.eps_ii, args.pmax)
        if alpha > si.eps:
            raw = tail.safety_bound(si.x1, si.x2_diag, si.eps, si.eps_i, si.eps_ii, alpha)
            status = "ok"
        else:
            # zero variance surrogate: the ball of radius eps already has probability one
            raw, status = 0.0, "degenerate"
        row = [s.t, alpha, raw, tail.clamp_probability(raw), si.eps, num, status]
        row += [float(v) for v in si.x1]
        if args.mc:
            est = oracles.empirical_tail(spec, si.x1, alpha, s.t, args.mc, seed)
            row += [est.frequency, est.se]
        rows.append(row)
    with _output(args.out) as fh:
        tail.write_tail_rows(rows, fh, extra)
    return EXIT_OK


def _time_call(fn, reps):
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.mean(times)) * 1e6


def bench_rows(spec, nt_list, mc_list, reps, steps, seed=0, threads=1):
    """Online times (microseconds) of moment propagation and Monte Carlo estimation."""
    rows = []
    for nt in nt_list:
        start = time.perf_counter()
        p = build_propagator(spec.coeffs, nt, threads=threads)
        s0 = initial_state_for(p, spec.init)
        offline = (time.perf_counter() - start) * 1e6

        def online(p=p, s0=s0):
            y = s0.y
            for _ in range(steps):
                y = p.matrix @ y
            return y

        rows.append({"method": "propagation", "parameter": nt, "online_us": _time_call(online, reps), "offline_us": offline})
    for m in mc_list:
        def online_mc(m=m):
            return oracles.simulate(spec, steps, m, seed)[:, steps].mean(axis=0)

        rows.append({"method": "monte_carlo", "parameter": m, "online_us": _time_call(online_mc, reps), "offline_us": 0.0})
    mc_ref = max((r for r in rows if r["method"] == "monte_carlo"), key=lambda r: r["parameter"], default=None)
    for r in rows:
        r["repetitions"] = reps
        r["note"] = "single run, high variance" if reps == 1 else ""
        r["pass"] = ""
        if r["method"] == "propagation" and mc_ref is not None:
            r["pass"] = "pass" if 10 * r["online_us"] <= mc_ref["online_us"] else "fail"
    return rows


def cmd_bench(args):
    spec = load_model(args.model)
    rows = bench_rows(spec, _int_list(args.nt_list), _int_list(args.mc_list), args.reps, args.steps,
                      oracles.resolve_seed(args.seed), args.threads)
    cols = ["method", "parameter", "repetitions", "online_us", "offline_us", "pass", "note"]
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([format_float(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return EXIT_OK


def measured_initial_state(z, noise, beta) -> InitialStateModel:
    """State estimate ``x0 = z - e`` with measurement errors ``e`` of known law.

    With six error laws every component is measured.  With four, only X, Y, psi
    and v are, and c, s are derived from the estimated heading.
    """
    comps = [Add((Const(float(z[c])), Mul((Const(-1.0), Source(c))))) for c in range(len(noise))]
    if len(noise) == 4:
        comps.append(Trig("cos", 2, -1.0, float(z[2]) + beta))
        comps.append(Trig("sin", 2, -1.0, float(z[2]) + beta))
    return InitialStateModel(tuple(noise), tuple(comps))


def _load_noise(text):
    if text is None:
        return [Point(0.0)] * 6
    path = Path(text)
    data = json.loads(path.read_text()) if path.exists() else json.loads(text)
    if isinstance(data, dict):
        data = [data] * 6
    if len(data) not in (4, 6):
        raise ModelError("noise spec needs 6 distributions (one per state) or 4 (X, Y, psi, v)")
    return [distribution_from_dict(d, f"noise[{i}]") for i, d in enumerate(data)]


def cmd_replay(args):
    spec = load_model(args.model)
    meta = spec.metadata
    if meta.get("generator") != "bicycle" or spec.n != 6:
        raise ModelError("replay needs a bicycle model (metadata.generator = 'bicycle')")
    beta = float(meta["beta"])
    noise = _load_noise(args.noise)
    seed = oracles.resolve_seed(args.seed)
    p = _propagator(args, spec)
    truth = np.array(oracles.sample_trajectory(spec, args.steps + args.horizon, seed))
    # measurement errors use their own stream family
    errs = np.column_stack([d.ppf(oracles.uniforms(seed, oracles.MEASUREMENT_STREAM, 0, c, args.steps + 1))
                            for c, d in enumerate(noise)])
    names = ["X", "Y", "psi", "v", "c", "s"]
    cols = ["step", "lookahead"] + [f"true_{v}" for v in names] + [f"pred_{v}" for v in names]
    cols += ["dist_to_truth", "radius", "certified"]
    if args.mc:
        cols += ["dist_to_mc_mean", "mc_se_norm"]
    out_rows = []
    status = None
    for k in range(args.steps + 1):
        z = truth[k, : len(noise)] + errs[k]
        init = measured_initial_state(z, noise, beta)
        try:
            states = propagate(p, initial_state_for(p, init), args.horizon)
        except DivergenceError as exc:
            states = exc.trajectory
            status = f"diverged at step {k} lookahead {exc.step}"
        mc = None
        if args.mc:
            mc = oracles.simulate(PolynomialSystemSpec(spec.coeffs, init), args.horizon, args.mc, seed + 1 + k)
        for s in states:
            L = s.t
            x1 = extract_moment(s, 1)
            x2 = extract_moment(s, 2)
            x2_diag = np.array([x2[6 * i + i] for i in range(6)])
            radius = tail.safety_radius(x1, x2_diag, 0.0, np.zeros(6), np.zeros(6), args.pmax)
            certified = bounds.exactness_condition(2, L, spec.d_S, p.N_T)
            row = [k, L] + [float(v) for v in truth[k + L]] + [float(v) for v in x1]
            row += [float(np.linalg.norm(x1 - truth[k + L])), radius, "yes" if certified else "no"]
            if mc is not None:
                X = mc[:, L]
                ok = np.all(np.isfinite(X), axis=1)
                mean = X[ok].mean(axis=0)
                se = X[ok].std(axis=0, ddof=1) / math.sqrt(ok.sum())
                row += [float(np.linalg.norm(x1 - mean)), float(np.linalg.norm(se))]
            out_rows.append(row)
        if status:
            break
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in out_rows:
            w.writerow([format_float(v) if isinstance(v, float) else v for v in r])
        if status:
            w.writerow(["#status", status] + [""] * (len(cols) - 2))
    return EXIT_DIVERGED if status else EXIT_OK


def cmd_validate(args):
    """Compare x~_1(t) against exact enumeration when possible, Monte Carlo otherwise."""
    spec = load_model(args.model)
    p = _propagator(args, spec)
    states = propagate(p, initial_state_for(p, spec.init), args.steps)
    seed = oracles.resolve_seed(args.seed)
    enumerable = True
    try:
        enumerable = oracles.enumeration_path_count(spec, args.steps) <= oracles.MAX_PATHS
    except oracles.OracleError:
        enumerable = False
    mc = None if enumerable else oracles.simulate(spec, args.steps, args.mc, seed)
    cols = ["t", "nt", "method", "distance", "se_norm", "exact_by_condition"]
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in states:
            x1 = extract_moment(s, 1)
            if enumerable:
                ref, se, method = oracles.exact_enumeration_moments(spec, 1, s.t), 0.0, "enumeration"
            else:
                X = mc[:, s.t]
                X = X[np.all(np.isfinite(X), axis=1)]
                ref = X.mean(axis=0)
                se = float(np.linalg.norm(X.std(axis=0, ddof=1) / math.sqrt(len(X))))
                method = "monte_carlo"
            exact = bounds.exactness_condition(1, s.t, spec.d_S, args.nt)
            w.writerow([s.t, args.nt, method, format_float(np.linalg.norm(x1 - ref)), format_float(se),
                        "yes" if exact else "no"])
    return EXIT_OK


def cmd_demo(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    if args.which == "logistic":
        save_model(demo_logistic_model(), out / "logistic.json")
        two_point = build_logistic_model(Finite((0.4, 0.6), (0.5, 0.5)), Point(0.5), name="logistic_two_point")
        save_model(two_point, out / "logistic_two_point.json")
        print(f"wrote {out / 'logistic.json'} and {out / 'logistic_two_point.json'}")
    else:
        save_model(demo_vehicle_model(), out / "vehicle.json")
        print(f"wrote {out / 'vehicle.json'}")
        exact = bounds.exactness_condition(1, 2, 3, 8)
        print(
            "note: first moment at t=2 with N_T=8 is "
            + ("" if exact else "not ")
            + "covered by the exactness condition j0*d_S^t <= N_T (1*3^2 = 9 > 8)"
        )
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides $MOMENT_SEED)")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--size-limit", type=int, default=None, help="max elements per matrix")
    common.add_argument("--no-cache", action="store_true", help="do not read or write ./.moment_cache/")
    common.add_argument("--out", default=None, help="output file (default: stdout)")
    common.add_argument("--basis", choices=["auto", "kronecker", "monomial"], default="auto")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", required=True)
    model.add_argument("--nt", type=int, required=True, help="truncation limit N_T")

    parser = argparse.ArgumentParser(prog="momentprop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("propagate", parents=[common, model], help="write truncated moment trajectories")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--blocks", default="1,2", help="comma separated moment orders to write")
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("error-bound", parents=[common, model], help="truncation error bounds")
    p.add_argument("--steps", type=int, required=True, help="horizon t")
    p.add_argument("--j0", type=int, default=1)
    p.add_argument("--j-strategy", choices=sorted(STRATEGIES), default="moment-norm")
    p.add_argument("--j-sizes", default="even", help="'even', 'all' or a list like 0,4,full")
    p.set_defaults(func=cmd_error_bound)

    p = sub.add_parser("tail", parents=[common, model], help="safety radii per step")
    p.add_argument("--steps", type=int, required=True, help="last step t (rows for 0..t)")
    p.add_argument("--pmax", type=float, default=0.05)
    p.add_argument("--j-per-step", type=int, default=6, help="|J| = this * t")
    p.add_argument("--j-strategy", choices=sorted(STRATEGIES), default="moment-norm")
    p.add_argument("--mc", type=int, default=0, help="Monte Carlo samples for an empirical check")
    p.set_defaults(func=cmd_tail)

    p = sub.add_parser("bench", parents=[common], help="online timing of propagation vs Monte Carlo")
    p.add_argument("--model", required=True)
    p.add_argument("--nt-list", default="4,16,64,256")
    p.add_argument("--mc-list", default="10,10000")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--steps", type=int, default=8)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay", parents=[common, model], help="offline receding-horizon replay")
    p.add_argument("--horizon", type=int, default=8)
    p.add_argument("--steps", type=int, default=10, help="number of replay steps")
    p.add_argument("--noise", default=None, help="JSON file or inline JSON: one error distribution, or a list for all 6 states or for X, Y, psi, v")
    p.add_argument("--pmax", type=float, default=0.05)
    p.add_argument("--mc", type=int, default=0)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("validate", parents=[common, model], help="compare against an oracle")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--mc", type=int, default=10000)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("demo", parents=[common], help="write the demo model files")
    p.add_argument("which", choices=["logistic", "vehicle"])
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    limit = args.size_limit if args.size_limit is not None else get_size_limit()
    try:
        with size_limit(limit):
            return args.func(args)
    except SizeLimitError as exc:
        print(f"error: size limit: {exc}", file=sys.stderr)
        return EXIT_SIZE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ModelError, PreconditionError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MomentPropError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
