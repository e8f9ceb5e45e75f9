"""Command-line entry point: ``finsler <command> [options]``.

Exit codes: 0 all checks pass, 1 a verification stage failed, 2 input error.
Random sites come from numpy's PCG64 generator seeded with ``--seed``, so a
given command line always produces byte-identical output.  Verbosity is set
by the ``FINSLER_LOG`` environment variable (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import berwald, geodesic, homothety, metricspace, models
from .jets import DomainError, PointedVector

log = logging.getLogger("finsler")

REPORT_SCHEMA = "finsler-report/1"

EXIT_OK, EXIT_FAILED, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


# formatting ---------------------------------------------------------------------


def fmt(v) -> str:
    """Full double precision (17 significant digits)."""
    return format(float(v), ".17g")


def _encode(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in seq) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt(obj) if math.isfinite(obj) else "null"
    return json.dumps(obj)


def dumps(obj, indent: int = 2) -> str:
    """JSON with every float written to 17 significant digits."""
    return _encode(obj, indent, 0) + "\n"


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


# argument parsing -------------------------------------------------------------


def _vec(text: str, n: Optional[int] = None) -> np.ndarray:
    try:
        v = np.array([float(t) for t in text.split(",")], dtype=float)
    except ValueError as exc:
        raise InputError(f"cannot parse vector {text!r}") from exc
    if n is not None and v.shape != (n,):
        raise InputError(f"vector {text!r} must have {n} components")
    if not np.all(np.isfinite(v)):
        raise InputError(f"vector {text!r} has non-finite components")
    return v


def _site(text: str, n: int):
    if ":" not in text:
        raise InputError(f"site {text!r} must look like x1,x2:y1,y2")
    a, b = text.split(":", 1)
    return _vec(a, n), _vec(b, n)


def _load_model(args) -> models.FinslerModel:
    if args.model_file:
        try:
            return models.load_model(args.model_file)
        except FileNotFoundError as exc:
            raise InputError(f"model file not found: {args.model_file}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"model file is not valid JSON: {exc}") from exc
        except jsonschema.ValidationError as exc:
            raise InputError(f"model descriptor failed schema validation: {exc.message}") from exc
    try:
        return models.get_model(args.model)
    except KeyError as exc:
        raise InputError(str(exc.args[0])) from exc


def _check_tol(tol: float) -> float:
    if not (tol > 0 and math.isfinite(tol)):
        raise InputError("--tol must be positive")
    return tol


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _parse_map(text: str, n: int) -> homothety.HomothetyMap:
    """kind[:param][@center], e.g. dilation:0.5@1,2 or rotation:0.8."""
    kind, _, rest = text.partition(":")
    param, _, center = rest.partition("@")
    c = _vec(center, n) if center else None
    try:
        if kind == "dilation":
            return homothety.dilation(float(param or 0.5), n, center=c)
        if kind == "conjugated-dilation":
            t = c if c is not None else np.zeros(n)
            return homothety.conjugate(homothety.translation(t), homothety.dilation(float(param or 0.5), n))
        if kind == "translation":
            return homothety.translation(_vec(param, n))
        if kind == "rotation" and n == 2:
            return homothety.rotation(float(param or 0.0), center=c if c is not None else (0.0, 0.0))
        if kind == "polar-shift" and n == 2:
            return homothety.polar_shift(float(param or 0.0))
        if kind == "shear" and n == 2:
            return homothety.shear(float(param or 0.3))
    except ValueError as exc:
        raise InputError(f"bad map {text!r}: {exc}") from exc
    raise InputError(f"unknown map {text!r}")


# commands ---------------------------------------------------------------------


def _sites_for(args, model) -> PointedVector:
    if args.site:
        xs, ys = zip(*(_site(s, model.n) for s in args.site))
        return PointedVector(np.array(xs), np.array(ys))
    rng = np.random.default_rng(args.seed)
    return model.sample_sites(rng, args.samples)


def _columns(prefix, arr):
    names, vals = [], []
    for idx in np.ndindex(arr.shape):
        names.append(f"{prefix}[{','.join(map(str, idx))}]")
        vals.append(float(arr[idx]))
    return names, vals


def cmd_curvature(args) -> int:
    model = _load_model(args)
    sites = _sites_for(args, model)
    for x, y in zip(sites.x, sites.y):
        if not bool(model.chart.contains(x)):
            raise InputError(f"site {x} lies outside the chart of {model.name}")
        if not np.any(y):
            raise InputError("site vectors must be nonzero")
    cd = berwald.connection_data(model, (sites.x, sites.y), "H")
    flat = berwald.flatness_test(model, sites, tol=args.flat_tol)
    per_site = [berwald.flatness_test(model, PointedVector(sites.x[k:k + 1], sites.y[k:k + 1])).max_residual
                for k in range(len(sites.x))]
    rows, header = [], None
    records = []
    for k in range(len(sites.x)):
        parts = [("x", sites.x[k]), ("y", sites.y[k]), ("G", cd.G[k]), ("N", cd.N[k]),
                 ("Gamma", cd.Gamma[k]), ("B", cd.B[k]), ("H", cd.H[k])]
        names, vals = [], []
        for p, a in parts:
            nm, vl = _columns(p, a)
            names += nm
            vals += vl
        header = names + ["flat_residual"]
        rows.append(vals + [per_site[k]])
        records.append({p: np.asarray(a).tolist() for p, a in parts})
    if args.format == "csv":
        text = _csv(rows, header)
    else:
        text = dumps({"schema": REPORT_SCHEMA, "command": "curvature", "model": model.name,
                      "sites": records,
                      "flatness": {"flat": flat.flat, "max_residual": flat.max_residual,
                                   "tolerance": args.flat_tol}})
    _emit(text, args.out)
    log.info("flatness residual %s", fmt(flat.max_residual))
    return EXIT_OK


def cmd_geodesic(args) -> int:
    model = _load_model(args)
    tol = _check_tol(args.tol)
    if not args.site:
        raise InputError("geodesic needs --site p:v")
    p, v = _site(args.site[0], model.n)
    if not bool(model.chart.contains(p)):
        raise InputError(f"start point {p} lies outside the chart of {model.name}")
    if not np.any(v):
        raise InputError("initial velocity must be nonzero")
    traj = geodesic.geodesic_ivp(model, p, v, args.t_end, tol)
    drift = traj.drift(model)
    F0 = float(model.F(p, v))
    ok = drift < 10 * tol * max(1.0, F0)
    if args.format == "csv":
        text = traj.to_csv(model)
    else:
        text = dumps({"schema": REPORT_SCHEMA, "command": "geodesic", "model": model.name,
                      "p": p, "v": v, "t_end": traj.t_end, "exited_chart": traj.exited,
                      "steps": traj.steps, "rejected": traj.rejected, "max_scaled_error": traj.max_error,
                      "F0": F0, "drift": drift, "drift_tolerance": 10 * tol * max(1.0, F0),
                      "endpoint": traj.endpoint, "pass": ok})
    _emit(text, args.out)
    return EXIT_OK if ok else EXIT_FAILED


def cmd_distance(args) -> int:
    model = _load_model(args)
    tol = _check_tol(args.tol)
    p = _vec(args.source, model.n)
    q = _vec(args.target, model.n)
    for pt in (p, q):
        if not bool(model.chart.contains(pt)):
            raise InputError(f"point {pt} lies outside the chart of {model.name}")
    res = metricspace.quasi_distance(model, p, q, tol)
    report = {"schema": REPORT_SCHEMA, "command": "distance", "model": model.name, "p": p, "q": q}
    report.update(res.to_json())
    _emit(dumps(report), args.out)
    return EXIT_OK if res.converged else EXIT_FAILED


def cmd_ball(args) -> int:
    model = _load_model(args)
    a = _vec(args.center, model.n)
    if not bool(model.chart.contains(a)):
        raise InputError(f"center {a} lies outside the chart of {model.name}")
    if not args.radius > 0:
        raise InputError("--radius must be positive")
    res = metricspace.ball(model, a, args.radius, args.direction, args.resolution)
    _emit(res.to_csv(), args.out)
    return EXIT_OK


def cmd_verify_theorem(args) -> int:
    model = _load_model(args)
    phi = _parse_map(args.map, model.n)
    cfg = homothety.TheoremConfig(samples=args.samples, seed=args.seed,
                                  x0=tuple(_vec(args.start, model.n)) if args.start else None)
    try:
        rep = homothety.verify_theorem(model, phi, cfg)
    except homothety.PreconditionError as exc:
        raise InputError(str(exc)) from exc
    report = {"schema": REPORT_SCHEMA, "command": "verify-theorem", "seed": args.seed}
    report.update(rep.to_json())
    _emit(dumps(report), args.out)
    return EXIT_OK if rep.passed else EXIT_FAILED


# parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--model", default="euclidean-2",
                     help=f"built-in model ({', '.join(sorted(models.BUILTINS))})")
    src.add_argument("--model-file", help="JSON model descriptor")
    common.add_argument("--tol", type=float, default=1e-10, help="integrator / solver tolerance")
    common.add_argument("--samples", type=int, default=8, help="number of random sites")
    common.add_argument("--seed", type=int, default=0, help="PCG64 seed for random sites")
    common.add_argument("--out", help="write output here instead of stdout")
    common.add_argument("--format", choices=["csv", "json"], default="json")
    common.add_argument("--site", action="append", help="x1,x2:y1,y2 (repeatable)")

    p = argparse.ArgumentParser(prog="finsler", description="Numerical Finsler geometry toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("curvature", parents=[common], help="spray and Berwald curvature tables")
    c.add_argument("--flat-tol", type=float, default=berwald.FLAT_TOLERANCE)
    c.set_defaults(func=cmd_curvature)

    g = sub.add_parser("geodesic", parents=[common], help="integrate a geodesic from --site p:v")
    g.add_argument("--t-end", type=float, default=1.0)
    g.set_defaults(func=cmd_geodesic)

    d = sub.add_parser("distance", parents=[common], help="quasi-distance between two points")
    d.add_argument("--from", dest="source", required=True, help="x1,x2")
    d.add_argument("--to", dest="target", required=True, help="x1,x2")
    d.set_defaults(func=cmd_distance)

    b = sub.add_parser("ball", parents=[common], help="forward or backward metric ball as CSV")
    b.add_argument("--center", required=True)
    b.add_argument("--radius", type=float, required=True)
    b.add_argument("--direction", choices=["forward", "backward"], default="forward")
    b.add_argument("--resolution", type=int, default=41)
    b.set_defaults(func=cmd_ball)

    v = sub.add_parser("verify-theorem", parents=[common],
                       help="fixed point, flatness and exp-isometry pipeline for a homothety")
    v.add_argument("--map", default="dilation:0.5",
                   help="dilation:LAM[@C], conjugated-dilation:LAM@C, translation:T, "
                        "rotation:ANGLE, polar-shift:DELTA, shear:K")
    v.add_argument("--start", help="starting point for the fixed-point iteration")
    v.set_defaults(func=cmd_verify_theorem)
    return p


def _configure_logging() -> None:
    level = os.environ.get("FINSLER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "samples", 1) < 1:
        print("error: --samples must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except geodesic.ChartExitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
