"""Command line front end: ``register``, ``synth`` and ``eval``.

Exit codes: 0 success, 1 bad input or IO failure, 2 solver degeneracy
(argparse also uses 2 for usage errors).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..lie import RigidTransform
from ..p2plane import P2PlaneConfig, icp_plane, icp_robust_plane
from ..p2point import DegenerateAlignment, P2PointConfig, icp_classic, icp_fast, icp_robust
from ..report import METHODS
from .io import (
    load_cloud,
    load_transform,
    read_report_json,
    save_cloud,
    save_transform,
    write_report_json,
    write_trace_csv,
)
from .metrics import alpha_recall, rmse
from .normalize import normalize_pair
from .synth import SyntheticSpec, make_model, make_problem

log = logging.getLogger("robust_icp")

_SOLVERS = {
    "icp": icp_classic,
    "fast-icp": icp_fast,
    "robust-icp": icp_robust,
    "icp-pl": icp_plane,
    "robust-icp-pl": icp_robust_plane,
}


class CliError(Exception):
    pass


def solve(method: str, src, tgt, init: RigidTransform | None = None, gt: RigidTransform | None = None,
          nu_max: float | None = None, nu_min: float | None = None, normalize: bool = True):
    """Run one registration in a normalised frame and map the result back.

    ``nu_max``/``nu_min`` are given in input units. Returns the report (whose
    RMSE and energies are in the solver frame) and the transform in input
    coordinates.
    """
    if method not in _SOLVERS:
        raise CliError(f"unknown method {method!r}")
    norm = None
    if normalize:
        src, tgt, norm = normalize_pair(src, tgt)
        scale = norm.scale
        init = norm.normalize_transform(init) if init is not None else None
        gt = norm.normalize_transform(gt) if gt is not None else None
        nu_max = nu_max * scale if nu_max is not None else None
        nu_min = nu_min * scale if nu_min is not None else None
    kwargs = dict(nu_max=nu_max, nu_min=nu_min, initial_transform=init or RigidTransform.identity())
    cfg = P2PlaneConfig(**kwargs) if method.endswith("-pl") else P2PointConfig(**kwargs)
    report = _SOLVERS[method](src, tgt, cfg, ground_truth=gt)
    T = report.final_transform
    return report, (norm.denormalize_transform(T) if norm else T), norm


def _cmd_register(args) -> int:
    src = load_cloud(args.source, args.format)
    tgt = load_cloud(args.target, args.format)
    init = load_transform(args.init) if args.init else None
    gt = load_transform(args.gt) if args.gt else None
    report, T, norm = solve(args.method, src, tgt, init, gt, args.nu_max, args.nu_min, not args.no_normalize)
    save_transform(T, args.out)
    if args.trace:
        write_trace_csv(report.trace, args.trace)
    if args.json:
        extra = {"normalized": norm is not None,
                 "normalization_scale": norm.scale if norm else 1.0,
                 "transform_input_units": T.matrix().tolist()}
        if gt is not None:
            extra["rmse_input_units"] = rmse(src, T, gt)
        write_report_json(report, args.json, **extra)
    msg = f"{report.method}: {report.iterations} iterations, {report.wall_time_seconds:.3f} s"
    if report.rmse is not None:
        msg += f", rmse {report.rmse:.3e}"
    print(msg)
    for note in report.notes:
        print(f"note: {note}", file=sys.stderr)
    return 0


def _cmd_synth(args) -> int:
    if args.input:
        cloud = load_cloud(args.input)
    else:
        cloud = make_model(args.points, args.model_seed)
    spec = SyntheticSpec(
        overlap_front_fraction=args.front,
        overlap_back_fraction=args.back,
        noise_sigma_mode=args.noise,
        outlier_fraction=args.outliers,
        seed=args.seed,
        max_rotation_deg=args.max_rotation,
        max_translation=args.max_translation,
    )
    src, tgt, T_true = make_problem(cloud, spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = "ply" if args.format == "ply-ascii" else "xyz"
    save_cloud(src, out / f"source.{ext}", args.format)
    save_cloud(tgt, out / f"target.{ext}", args.format)
    save_transform(T_true, out / "gt.txt")
    print(f"wrote {len(src)} source and {len(tgt)} target points to {out}")
    return 0


def _run_job(job: dict) -> dict:
    src = load_cloud(job["source"])
    tgt = load_cloud(job["target"])
    gt = load_transform(job["gt"])
    init = load_transform(job["init"]) if job.get("init") else None
    report, _, _ = solve(job["method"], src, tgt, init, gt)
    return {"method": report.method, "rmse": report.rmse,
            "iterations": report.iterations, "seconds": report.wall_time_seconds}


def _manifest_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError(f"{path}: empty manifest")
    base = path.parent
    for row in rows:
        for key in ("report", "source", "target", "gt", "init"):
            if row.get(key):
                p = Path(row[key])
                row[key] = str(p if p.is_absolute() else base / p)
    return rows


def _cmd_eval(args) -> int:
    rows = _manifest_rows(Path(args.manifest))
    jobs = [r for r in rows if not r.get("report")]
    for r in jobs:
        missing = [k for k in ("method", "source", "target", "gt") if not r.get(k)]
        if missing:
            raise CliError(f"manifest row needs 'report' or {', '.join(missing)}")
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = iter(list(pool.map(_run_job, jobs)))
    else:
        results = iter([_run_job(j) for j in jobs])

    records = []
    for r in rows:
        if r.get("report"):
            data = read_report_json(r["report"])
            if data.get("rmse") is None:
                raise CliError(f"{r['report']}: report has no RMSE (registered without ground truth)")
            records.append({"method": r.get("method") or data["method"], "rmse": float(data["rmse"])})
        else:
            records.append(next(results))

    alphas = args.alpha or [0.01]
    by_method: dict[str, list[float]] = {}
    for rec in records:
        by_method.setdefault(rec["method"], []).append(rec["rmse"])
    header = ["method", "cases", "median_rmse", "mean_rmse"] + [f"recall@{a:g}" for a in alphas]
    table = []
    for method in sorted(by_method):
        v = by_method[method]
        table.append([method, str(len(v)), f"{np.median(v):.6g}", f"{np.mean(v):.6g}"]
                     + [f"{alpha_recall(v, a):.6g}" for a in alphas])
    widths = [max(len(h), *(len(t[i]) for t in table)) for i, h in enumerate(header)]
    for line in [header] + table:
        print("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip())
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robust-icp", description="Rigid point cloud registration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="register a source cloud onto a target cloud")
    r.add_argument("--method", choices=METHODS, required=True)
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--format", choices=("ply-ascii", "xyz"), help="cloud format (default: from extension)")
    r.add_argument("--init", help="initial 4x4 transform file")
    r.add_argument("--gt", help="ground-truth 4x4 transform file (enables RMSE)")
    r.add_argument("--nu-max", type=float, help="largest Welsch parameter, input units")
    r.add_argument("--nu-min", type=float, help="smallest Welsch parameter, input units")
    r.add_argument("--out", required=True, help="output transform file")
    r.add_argument("--trace", help="per-iteration trace CSV")
    r.add_argument("--json", help="report JSON")
    r.add_argument("--no-normalize", action="store_true", help="register in input coordinates")
    r.set_defaults(func=_cmd_register)

    s = sub.add_parser("synth", help="generate a synthetic registration problem")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--input", help="ordered cloud to split (default: built-in surface model)")
    src.add_argument("--points", type=int, default=5000, help="size of the built-in model")
    s.add_argument("--model-seed", type=int, default=0)
    s.add_argument("--front", type=float, default=0.6, help="leading fraction used as source")
    s.add_argument("--back", type=float, default=0.47, help="trailing fraction used as target")
    s.add_argument("--noise", choices=("none", "neighbor-median"), default="none")
    s.add_argument("--outliers", type=float, default=0.0, help="outlier ratio added to the source")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-rotation", type=float, default=30.0, help="degrees")
    s.add_argument("--max-translation", type=float, default=0.1)
    s.add_argument("--format", choices=("ply-ascii", "xyz"), default="ply-ascii")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=_cmd_synth)

    e = sub.add_parser("eval", help="RMSE and alpha-recall table over a manifest")
    e.add_argument("manifest", help="CSV with a 'report' column or method,source,target,gt[,init] columns")
    e.add_argument("--alpha", type=float, action="append", help="recall threshold (repeatable)")
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--out", help="write the table as CSV")
    e.set_defaults(func=_cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except DegenerateAlignment as exc:
        print(f"error: degenerate registration: {exc}", file=sys.stderr)
        return 2
    except (CliError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


run_cli = main


if __name__ == "__main__":
    sys.exit(main())
