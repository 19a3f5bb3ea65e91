"""Command line entry point: ``upwindkr study | validate-mesh | kr``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .diagnostics import DiagnosticsError
from .fields import FieldError
from .harness import StudyError, emit_report, load_config, run_study, summary_text
from .mesh import MeshError, read_mesh, regularity_report
from .reference import ReferenceError
from .solver import ConfigError, SolverError
from .transport import DEFAULT_COST_CAP, MIN_RADIUS, DiscreteMeasure, TransportError, kr_distance

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

logger = logging.getLogger("upwindkr")


class InputError(ValueError):
    pass


def _read_measure(path: str) -> DiscreteMeasure:
    """CSV with coordinate columns followed by a mass column; a header row is optional."""
    try:
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    if lines and not _is_numeric_row(lines[0]):
        lines = lines[1:]
    if not lines:
        raise InputError(f"{path}: no atoms")
    try:
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines])
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[1] < 2:
        raise InputError(f"{path}: expected columns x0[,x1,...],mass")
    try:
        return DiscreteMeasure(data[:, :-1], data[:, -1])
    except TransportError as exc:
        raise InputError(f"{path}: {exc}") from None


def _is_numeric_row(line: str) -> bool:
    try:
        [float(v) for v in line.split(",")]
    except ValueError:
        return False
    return True


def _cmd_study(args) -> int:
    config = load_config(args.config)
    formats = set(args.formats.split(",")) if args.formats else {"csv", "text", "svg"}
    if not formats <= {"csv", "text", "svg"}:
        raise ConfigError(f"unknown report formats {sorted(formats - {'csv', 'text', 'svg'})}")
    out = args.output or config.output_dir
    report = run_study(dataclasses.replace(config, output_dir=None))
    if out:
        for path in emit_report(report, formats, out):
            logger.info("wrote %s", path)
    print(summary_text(report), end="")
    return EXIT_OK


def _cmd_validate_mesh(args) -> int:
    try:
        mesh = read_mesh(args.file)
    except OSError as exc:
        raise InputError(f"cannot read mesh: {exc}") from None
    rep = regularity_report(mesh)
    print(f"valid mesh: dim {mesh.dim}, {mesh.n_cells} cells, {mesh.n_faces} faces")
    print(f"h = {rep.h!r}")
    print(f"isoperimetric = {rep.isoperimetric!r}")
    print(f"volume_ratio = {rep.volume_ratio!r}")
    print(f"face_ratio = {rep.face_ratio!r}")
    return EXIT_OK


def _cmd_kr(args) -> int:
    plus, minus = _read_measure(args.plus), _read_measure(args.minus)
    if plus.dim != minus.dim:
        raise InputError("the two measures live in different dimensions")
    if not args.r >= MIN_RADIUS:
        raise InputError(f"r must be at least {MIN_RADIUS}")
    ta, tb = plus.total, minus.total
    if abs(ta - tb) > 1e-10 * max(ta, tb):
        raise InputError(f"unbalanced measures: totals {ta!r} and {tb!r}")
    if len(plus) * len(minus) > args.cap:
        raise InputError(f"{len(plus)} x {len(minus)} atoms exceed the cap of {args.cap}")
    res = kr_distance(plus, minus, args.r, cap=args.cap)
    print(f"D_r = {res.value!r}")
    print(f"dual = {res.dual_value!r}")
    print(f"gap = {res.gap!r}")
    print(f"pivots = {res.stats['pivots']}")
    if args.plan:
        res.write_plan_csv(args.plan, plus, minus)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="upwindkr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("study", help="run a convergence study from a key = value config")
    s.add_argument("--config", required=True)
    s.add_argument("--formats", help="comma separated subset of csv,text,svg")
    s.add_argument("--output", help="output directory (overrides output_dir)")
    s.set_defaults(func=_cmd_study)

    m = sub.add_parser("validate-mesh", help="check a mesh file and print regularity proxies")
    m.add_argument("file")
    m.set_defaults(func=_cmd_validate_mesh)

    k = sub.add_parser("kr", help="D_r between two atomic measures given as CSV")
    k.add_argument("--plus", required=True)
    k.add_argument("--minus", required=True)
    k.add_argument("--r", type=float, required=True)
    k.add_argument("--plan", help="write the optimal plan to this CSV")
    k.add_argument("--cap", type=int, default=DEFAULT_COST_CAP)
    k.set_defaults(func=_cmd_kr)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError, MeshError, FieldError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StudyError, SolverError, ReferenceError, TransportError, DiagnosticsError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
