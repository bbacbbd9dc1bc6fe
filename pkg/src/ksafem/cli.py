"""Command line front end: ``solve``, ``check`` and ``presets``.

Exit codes: 0 clean stop, 2 invalid configuration, 3 output not writable,
and one code per failing stage of the adaptive loop (see ``STAGE_EXIT``).
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .afem import CSV_HEADER, ConvergenceRecord, IterationRecord, AfemStageError, complexity_curve, run_ks_afem
from .config import (ConfigError, RunConfig, build_afem_config, build_linear_problem, build_mesh, build_model,
                     format_config, parse_config)
from .errors import InvalidInputError, KsafemError
from .presets import PRESETS, preset_text

EXIT_OK, EXIT_CONFIG, EXIT_OUTPUT = 0, 2, 3
STAGE_EXIT = {"setup": 10, "space": 11, "transfer": 12, "solve": 13, "estimate": 14, "mark": 15, "refine": 16}
THREADS_ENV = "KSAFEM_THREADS"


def load_config(source: str) -> RunConfig:
    """A config file path, or the name of a preset when no such file exists."""
    path = Path(source)
    if path.is_file():
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read {source}: {exc}") from None
        return parse_config(text, name=path.stem)
    if source in PRESETS:
        return parse_config(preset_text(source), name=source)
    raise ConfigError(f"no config file or preset named {source!r}")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(v)
    return f"{v:.17g}"


def _write_dat(path: Path, record: ConvergenceRecord, error=None) -> None:
    lines = ["# iter ndof nelem eta energy" + (" error" if error is not None else "")]
    for k, r in enumerate(record.rows):
        cols = [r.iter, r.ndof, r.nelem, math.sqrt(r.eta2), r.energy]
        if error is not None:
            cols.append(math.sqrt(error[k]))
        lines.append(" ".join(_fmt(c) for c in cols))
    path.write_text("\n".join(lines) + "\n")


def _slope_lines(record: ConvergenceRecord) -> list[str]:
    if len(record.rows) < 4:
        return ["slope_ndof: n/a (fewer than 4 iterations)"]
    fit = complexity_curve(record, last=4)
    return [f"slope_ndof: {_fmt(fit.slope_ndof)}", f"slope_elements: {_fmt(fit.slope_elements)}",
            f"slope_points: {fit.points}"]


def _run_ks(cfg: RunConfig, out: Path, log) -> tuple[ConvergenceRecord, list[str]]:
    model = build_model(cfg)
    vtk_dir = out if cfg["output"]["vtk"] else None

    def progress(row):
        log(f"iter {row.iter}: ndof={row.ndof} energy={row.energy:.10g} eta2={row.eta2:.4g} "
            f"scf={row.scf_iters} ({row.wall_s:.1f}s)")

    record = run_ks_afem(build_mesh(cfg), model, build_afem_config(cfg), csv_path=out / "convergence.csv",
                         vtk_dir=vtk_dir, callback=progress)
    final = record.rows[-1]
    lines = [f"eigenvalues: {' '.join(_fmt(v) for v in final.eigenvalues)}",
             f"hartree_method: {model.hartree_method if model.hartree else 'off'}"]
    expected, band = cfg["output"]["expected_energy"], cfg["output"]["energy_band"]
    if expected is not None:
        inside = band is not None and abs(final.energy - expected) <= band
        lines.append(f"expected_energy: {_fmt(expected)} band {_fmt(band or 0.0)} "
                     f"deviation {_fmt(final.energy - expected)} {'inside' if inside else 'outside'}")
    _write_dat(out / "convergence.dat", record)
    return record, lines


def _run_linear(cfg: RunConfig, out: Path, log) -> tuple[ConvergenceRecord, list[str]]:
    from .linear_bvp import afem_linear, gradient_distance
    record = ConvergenceRecord()
    prev = []
    with open(out / "convergence.csv", "w", encoding="utf-8", newline="\n") as stream:
        stream.write(CSV_HEADER + "\n")
        stream.flush()

        def emit(step, space, u):
            dist = math.nan if not prev else gradient_distance(prev[0], prev[1], space, u)
            prev[:] = [space, u]
            row = IterationRecord(len(record.rows), step.ndof, step.nelem, step.energy, step.eta2, step.osc2, 0,
                                  math.nan, dist, step.wall_s, np.array([]))
            record.rows.append(row)
            stream.write(row.csv_row() + "\n")
            stream.flush()
            log(f"iter {row.iter}: ndof={row.ndof} eta2={row.eta2:.4g} error2={step.error2:.4g}")

        a = cfg["afem"]
        if a["strategy"] != "dorfler":
            raise InvalidInputError("the linear harness marks with the Dorfler strategy only")
        try:
            res = afem_linear(build_mesh(cfg), build_linear_problem(cfg), theta=a["theta"], n_iters=a["max_iters"],
                              degree=cfg["mesh"]["degree"], max_ndof=a["max_ndof"], callback=emit)
        except KsafemError as exc:
            raise AfemStageError("solve", exc, record) from exc
    record.stop_reason = "max_iters" if len(res.steps) == a["max_iters"] else "ndof_cap"
    ratios, eff = res.contraction_ratios(), res.effectivity()
    lines = [f"contraction_ratios: {' '.join(_fmt(r) for r in ratios)}",
             f"contraction_max: {_fmt(ratios.max()) if len(ratios) else 'n/a'}",
             f"effectivity: {' '.join(_fmt(e) for e in eff)}",
             f"effectivity_bracket: {_fmt(eff.min())} {_fmt(eff.max())}",
             "hartree_method: off"]
    _write_dat(out / "convergence.dat", record, error=[s.error2 for s in res.steps])
    return record, lines


def run(cfg: RunConfig, output_dir=None, log=print) -> int:
    """Run a validated configuration and write its outputs; returns the exit status."""
    out = Path(output_dir if output_dir is not None else cfg["output"]["dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        log(f"error: output directory {out} is not writable: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    t0 = time.perf_counter()
    runner = _run_linear if cfg["model"]["kind"] == "linear" else _run_ks
    try:
        record, extra = runner(cfg, out, log)
    except AfemStageError as exc:
        log(f"error: stage {exc.stage}: {exc.cause} ({len(exc.record.rows)} iterations written)", file=sys.stderr)
        return STAGE_EXIT.get(exc.stage, 1)
    except InvalidInputError as exc:
        log(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        log(f"error: output: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    first, last = record.rows[0], record.rows[-1]
    lines = [f"name: {cfg.name}", f"kind: {cfg['model']['kind']}", f"stop_reason: {record.stop_reason}",
             f"iterations: {len(record.rows)}", f"final_ndof: {last.ndof}", f"final_nelem: {last.nelem}",
             f"final_energy: {_fmt(last.energy)}", f"eta2_initial: {_fmt(first.eta2)}",
             f"eta2_final: {_fmt(last.eta2)}", *_slope_lines(record), *extra,
             f"seed: {cfg['scf']['seed']}", f"wall_s: {time.perf_counter() - t0:.3f}"]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    log(f"done: {record.stop_reason} after {len(record.rows)} iterations; outputs in {out}")
    return EXIT_OK


def _thread_limit(arg):
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV)
    if env is None:
        return None
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be positive")
    return n


def _positive(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return n


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ksafem", description="Adaptive finite elements for Kohn-Sham models.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", help="run a configuration (file path or preset name)")
    s.add_argument("config")
    s.add_argument("--output-dir", help="overrides [output] dir")
    s.add_argument("--seed", type=int, help="overrides [scf] seed")
    s.add_argument("--threads", type=_positive, help=f"BLAS thread limit (overrides ${THREADS_ENV})")
    c = sub.add_parser("check", help="validate a configuration and print it with defaults filled in")
    c.add_argument("config")
    ps = sub.add_parser("presets", help="list presets, or print one")
    ps.add_argument("name", nargs="?")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)

    def log(*a, file=None):
        print(*a, file=file or sys.stdout, flush=True)

    if args.command == "presets":
        if args.name is None:
            for name, (desc, _) in PRESETS.items():
                print(f"{name:22s} {desc}")
            return EXIT_OK
        try:
            print(preset_text(args.name), end="")
        except InvalidInputError as exc:
            log(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK

    try:
        cfg = load_config(args.config)
        if args.command == "check":
            print(format_config(cfg), end="")
            return EXIT_OK
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg = cfg.replace("scf", seed=args.seed)
        threads = _thread_limit(args.threads)
    except ConfigError as exc:
        log(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if threads is None:
        return run(cfg, args.output_dir, log)
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=threads):
        return run(cfg, args.output_dir, log)
