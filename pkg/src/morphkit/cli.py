"""Command-line front door.

Commands run in-process by default.  With ``--server URL`` the same commands
are sent to a running ``morphkit serve`` instance instead; the files written
are identical either way.

Exit codes: 0 success, 2 invalid input (bad file, schema, parameters),
3 numerical failure in the engine, 4 server unreachable.
"""
from __future__ import annotations

import argparse
import base64
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional

from .errors import MorphkitError, NoDescent, NumericalError
from .jobs import Preprocess, read_manifest, run_manifest, run_to_files
from .lddmm import LddmmParams
from .longitudinal import parse_table
from .pipeline import ANALYSES, MEASURES, AnalysisRequest, run_analysis
from .report import dumps

SEED_ENV = "MORPHKIT_SEED"


class ServerError(Exception):
    def __init__(self, status: int, message: str):
        self.status = status
        super().__init__(message)


def _add_lddmm_args(p: argparse.ArgumentParser) -> None:
    d = LddmmParams()
    g = p.add_argument_group("registration parameters")
    g.add_argument("--alpha", type=float, default=d.alpha)
    g.add_argument("--gamma", type=float, default=d.gamma)
    g.add_argument("--exponent", type=float, default=d.exponent)
    g.add_argument("--sigma", type=float, default=d.sigma)
    g.add_argument("--timesteps", type=int, default=d.timesteps)
    g.add_argument("--max-iters", type=int, default=d.max_iters)
    g.add_argument("--step", type=float, default=d.step_size, help="initial gradient step")
    g.add_argument("--tol", type=float, default=d.energy_tol, help="relative energy change to stop")
    g.add_argument("--fill", action="store_true", help="flood-fill closed shells first")
    g.add_argument("--smooth", action="store_true", help="Gaussian smoothing (9-voxel window, sd 1)")
    g.add_argument("--resample", type=float, default=None, help="resampling factor per axis")
    p.add_argument("--template", type=Path, help="template MVOL1 file")
    p.add_argument("--target", type=Path, help="target MVOL1 file")
    p.add_argument("--out", type=Path, help="result JSON (stdout if omitted)")
    p.add_argument("--manifest", type=Path, help="CSV of template,target,out for batch runs")
    p.add_argument("--jobs", type=int, default=1, help="concurrent registrations in batch mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphkit", description=__doc__.split("\n")[0])
    parser.add_argument("--server", help="send the command to a morphkit service at this URL")
    sub = parser.add_subparsers(dest="command", required=True)

    reg = sub.add_parser("register", help="register template to target and report the flow")
    _add_lddmm_args(reg)
    reg.add_argument("--warped", type=Path, help="also write the warped template (MVOL1)")

    dist = sub.add_parser("distance", help="register and report only the metric distance")
    _add_lddmm_args(dist)

    stats = sub.add_parser("stats", help="run statistical analyses on a subject table")
    stats.add_argument("table", type=Path)
    stats.add_argument("--analysis", choices=ANALYSES, default="full")
    stats.add_argument("--measure", choices=MEASURES, default="both")
    stats.add_argument("--seed", type=int, default=None,
                       help=f"RNG seed (falls back to ${SEED_ENV}, then 0)")
    stats.add_argument("--out", type=Path, help="report JSON (stdout if omitted)")
    stats.add_argument("--csv-dir", type=Path, help="directory for plot-data CSVs")
    stats.add_argument("--n-boot", type=int, default=10_000, help="Cramér bootstrap replicates")
    stats.add_argument("--n-perm", type=int, default=10_000, help="Cramér-von Mises permutations")
    stats.add_argument("--n-sim", type=int, default=100_000, help="Lilliefors null replicates")
    stats.add_argument("--max-power", type=int, default=9, help="highest power in stepwise candidates")

    val = sub.add_parser("validate", help="check a subject table against the schema")
    val.add_argument("table", type=Path)

    srv = sub.add_parser("serve", help="run the HTTP service")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8000)
    return parser


def _params(args) -> LddmmParams:
    return LddmmParams(alpha=args.alpha, gamma=args.gamma, exponent=args.exponent, sigma=args.sigma,
                       timesteps=args.timesteps, step_size=args.step, max_iters=args.max_iters,
                       energy_tol=args.tol)


def _prep(args) -> Preprocess:
    return Preprocess(fill=args.fill, smooth=args.smooth, resample=args.resample)


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise MorphkitError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def _emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


# --- thin client ---------------------------------------------------------------------------

def _post(server: str, path: str, payload: dict) -> dict:
    import httpx

    try:
        resp = httpx.post(server.rstrip("/") + path, json=payload, timeout=None)
    except httpx.HTTPError as exc:
        raise ServerError(0, f"cannot reach {server}: {exc}") from None
    if resp.status_code != 200:
        try:
            detail = resp.json()["detail"]
            msg = f"{detail['error']}: {detail['message']}" if isinstance(detail, dict) else str(detail)
        except Exception:
            msg = resp.text
        raise ServerError(resp.status_code, msg)
    return resp.json()


def _remote_register(args, template: Path, target: Path, out: Optional[Path], distance_only: bool,
                     warped: Optional[Path] = None) -> dict:
    payload = {
        "template_b64": base64.b64encode(template.read_bytes()).decode(),
        "target_b64": base64.b64encode(target.read_bytes()).decode(),
        "template_label": str(template), "target_label": str(target),
        "params": _params(args).to_dict(),
        "preprocess": {"fill": args.fill, "smooth": args.smooth, "resample": args.resample},
        "include_warped": warped is not None,
    }
    body = _post(args.server, "/distance" if distance_only else "/register", payload)
    report = body["report"]
    if warped is not None:
        warped.write_bytes(base64.b64decode(body["warped_b64"]))
        report["warped_template"] = str(warped)
    _emit(dumps(report), out)
    return report


# --- commands ---------------------------------------------------------------------------------

def cmd_register(args, distance_only: bool = False) -> int:
    warped = getattr(args, "warped", None)
    if args.manifest is not None:
        if args.template or args.target:
            raise MorphkitError("use either --manifest or --template/--target, not both")
        entries = read_manifest(args.manifest)
        if args.server:
            with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
                list(pool.map(lambda e: _remote_register(args, e.template, e.target, e.out, distance_only),
                              entries))
        else:
            run_manifest(entries, _params(args), _prep(args), args.jobs, distance_only)
        print(f"wrote {len(entries)} result files", file=sys.stderr)
        return 0
    if args.template is None or args.target is None:
        raise MorphkitError("--template and --target are required (or --manifest)")
    if args.server:
        _remote_register(args, args.template, args.target, args.out, distance_only, warped)
        return 0
    report = run_to_files(args.template, args.target, args.out, _params(args), _prep(args),
                          warped, distance_only)
    if args.out is None:
        sys.stdout.write(dumps(report))
    return 0


def cmd_stats(args) -> int:
    text = args.table.read_text()
    req = AnalysisRequest(analysis=args.analysis, measure=args.measure, seed=_seed(args),
                          n_boot=args.n_boot, n_perm=args.n_perm, n_sim=args.n_sim,
                          max_power=args.max_power)
    if args.server:
        body = _post(args.server, "/stats", {"table_csv": text, "options": req.to_dict()})
        report, csvs = body["report"], body["csv"]
    else:
        report, csvs = run_analysis(parse_table(text), req, text)
    report_text = dumps(report)
    if csvs:
        csv_dir = args.csv_dir or (args.out.parent if args.out else Path("."))
        csv_dir.mkdir(parents=True, exist_ok=True)
        for name, content in sorted(csvs.items()):
            (csv_dir / name).write_text(content)
    _emit(report_text, args.out)
    return 0


def cmd_validate(args) -> int:
    text = args.table.read_text()
    if args.server:
        body = _post(args.server, "/validate", {"table_csv": text})
        if not body["valid"]:
            err = body["error"]
            print(f"invalid: {err['error']}: {err['message']}", file=sys.stderr)
            return 2
        n, counts = body["n_subjects"], body["group_counts"]
    else:
        table = parse_table(text)
        n, counts = len(table), table.group_counts()
    print(f"ok: {n} subjects ({', '.join(f'{g}={c}' for g, c in counts.items())})")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("morphkit.service:app", host=args.host, port=args.port)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "register":
            return cmd_register(args)
        if args.command == "distance":
            return cmd_register(args, distance_only=True)
        if args.command == "stats":
            return cmd_stats(args)
        if args.command == "validate":
            return cmd_validate(args)
        return cmd_serve(args)
    except (NumericalError, NoDescent) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except ServerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4 if exc.status == 0 else 2
    except (MorphkitError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
