"""``tpsim`` command-line driver.

Exit codes: 0 success, 1 tolerance violation, 2 config error, 3 deadlock.
Every CSV opens with ``# tpsim <command> config_sha256=<hash> seed=<seed>``
followed by a header row.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from math import ceil

import numpy as np

from .analytic import (
    SCALING_SHAPE,
    WorkloadShape,
    meshes_for_world,
    paper_comm_volume,
    derived_comm_volume,
    range_test,
    reconcile,
    scaling_table,
    unit_dims,
    write_range_csv,
    write_scaling_csv,
    format_number,
)
from .comm import SCHEDULERS
from .config import ExperimentConfig, load_config
from .errors import ConfigError, Deadlock, TpsimError
from .mesh import Mode
from .verify import CheckResult, attention_checks, seed_stream, tp_checks
from .zero import (
    AdamConfig,
    ByteWidths,
    QuadraticObjective,
    hybrid_place,
    reuse_plan,
    run_zero,
    serial_adam,
    steady_model_bytes,
)

EXIT_OK, EXIT_TOLERANCE, EXIT_CONFIG, EXIT_DEADLOCK = 0, 1, 2, 3
ZERO_TOL = 1e-12


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _shape(cfg: ExperimentConfig, default: WorkloadShape) -> WorkloadShape:
    try:
        return WorkloadShape(
            cfg.get("b", default.b), cfg.get("s", default.s), cfg.get("h", default.h),
            cfg.get("r", default.r), cfg.get("L", default.layers),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _round_up(n: int, unit: int) -> int:
    return max(unit, ceil(n / unit) * unit)


def _fmt_float(v: float) -> str:
    return f"{v:.6e}"


# -- verify ---------------------------------------------------------------


def _zero_checks(cfg: ExperimentConfig, n: int, scheduler: str) -> list[CheckResult]:
    n_params = cfg.get("n_params", 16)
    steps = cfg.get("steps", 5)
    adam = AdamConfig(lr=cfg.get("lr", 0.1))
    obj = QuadraticObjective(n_params, n, cfg.seed)
    expected = serial_adam(np.zeros(n_params), obj.mean_grad, steps, adam)
    out = []
    for stage in ([cfg.stage] if cfg.stage else [1, 2, 3]):
        run = run_zero(stage, n, np.zeros(n_params), obj.grad, steps, adam, scheduler)
        err = max(float(np.max(np.abs(a - b))) for a, b in zip(run.trajectory, expected))
        out.append(CheckResult(f"zero{stage}_trajectory_max_abs_err", err, ZERO_TOL))
    return out


def cmd_verify(cfg: ExperimentConfig, scheduler: str, fh) -> int:
    mode = cfg.parallel_mode()
    mesh = cfg.mesh()
    seeds = seed_stream(cfg.seed, cfg.get("trials", 20))
    if mode.tag is Mode.SEQUENCE:
        s = cfg.get("s", 8)
        if s % mesh.world_size:
            raise ConfigError(f"s={s} is not divisible by world_size={mesh.world_size}", "s")
        checks = attention_checks(mesh.world_size, s, cfg.get("d_k", 4), seeds, scheduler)
    elif mode.tag is Mode.DATA_PARALLEL:
        if cfg.get("n_params", 16) % mesh.world_size:
            raise ConfigError("n_params must be divisible by world_size", "n_params")
        checks = _zero_checks(cfg, mesh.world_size, scheduler)
    else:
        r = cfg.get("r", 4)
        um, uh = unit_dims(mesh, r)
        m = _round_up(cfg.get("b", 8) * cfg.get("s", 1), um)
        h = _round_up(cfg.get("h", 8), uh)
        checks = tp_checks(mesh, m, h, seeds, r, scheduler)
    w = _writer(fh)
    w.writerow(["check", "mode", "world_size", "value", "tolerance", "status"])
    for c in checks:
        w.writerow([c.check, str(mode), mesh.world_size, _fmt_float(c.value), _fmt_float(c.tolerance),
                    "pass" if c.passed else "fail"])
    return EXIT_OK if all(c.passed for c in checks) else EXIT_TOLERANCE


# -- commvol --------------------------------------------------------------


def cmd_commvol(cfg: ExperimentConfig, scheduler: str, fh) -> int:
    """Model volumes at the configured shape, plus a measured reconciliation per mesh.

    The reconciliation runs at the smallest shape the mesh divides, since
    the published shapes are far too large to push through the fabric.
    """
    shape = _shape(cfg, SCALING_SHAPE)
    w = _writer(fh)
    w.writerow(["p", "mode", "dims", "b", "s", "h", "paper_model", "derived_model",
                "recon_shape", "recon_measured", "recon_derived", "recon_paper", "recon_ratio"])
    for p in sorted(set(cfg.get("p_sweep", (1, 2, 4, 8, 16, 27, 64)))):
        for mesh in meshes_for_world(p, cfg.depths):
            rep = reconcile(mesh, seed=cfg.seed, scheduler=scheduler)
            w.writerow([
                p, str(mesh.mode), "x".join(map(str, mesh.dims)), shape.b, shape.s, shape.h,
                format_number(paper_comm_volume(mesh, shape)), derived_comm_volume(mesh, shape),
                f"{rep.shape.b}x{rep.shape.s}x{rep.shape.h}", rep.measured, rep.derived,
                format_number(rep.paper), f"{rep.ratio:.4f}",
            ])
    return EXIT_OK


# -- memscan --------------------------------------------------------------


def cmd_memscan(cfg: ExperimentConfig, scheduler: str, fh) -> int:
    s, r, layers = cfg.get("s", 512), cfg.get("r", 1), cfg.get("L", 2)
    rows = []
    for p in sorted(set(cfg.get("world_sizes", (1, 4, 8)))):
        rows += range_test(p, "batch", cfg.get("batch_sweep", (32, 64, 128, 256, 512)),
                           WorkloadShape(32, s, cfg.get("h", 4096), r, layers), cfg.depths)
        rows += range_test(p, "hidden", cfg.get("hidden_sweep", (1024, 2048, 4096, 8192, 16384)),
                           WorkloadShape(cfg.get("b", 32), s, 1024, r, layers), cfg.depths)
    # stable sort keeps the mode order within each (sweep, value, p)
    rows.sort(key=lambda row: (row.sweep, row.value, row.world_size))
    write_range_csv(rows, fh)
    return EXIT_OK


# -- zero -----------------------------------------------------------------


def cmd_zero(cfg: ExperimentConfig, scheduler: str, fh) -> int:
    n_params = cfg.get("n_params", 16)
    steps = cfg.get("steps", 5)
    adam = AdamConfig(lr=cfg.get("lr", 0.1))
    widths = ByteWidths()
    stages = [cfg.stage] if cfg.stage else [1, 2, 3]
    worlds = sorted({1, cfg.get("world_size", 4)})
    for n in worlds:
        if n_params % n:
            raise ConfigError(f"n_params={n_params} is not divisible by world_size={n}", "n_params")

    w = _writer(fh)
    w.writerow(["section", "stage", "world_size", "item", "value", "reference", "status"])
    ok = True

    def row(section, stage, n, item, value, reference="", passed=None):
        nonlocal ok
        status = "info" if passed is None else ("pass" if passed else "fail")
        ok = ok and passed is not False
        w.writerow([section, stage, n, item, value, reference, status])

    for stage in stages:
        for n in worlds:
            obj = QuadraticObjective(n_params, n, cfg.seed)
            expected = serial_adam(np.zeros(n_params), obj.mean_grad, steps, adam)
            run = run_zero(stage, n, np.zeros(n_params), obj.grad, steps, adam, scheduler, widths)
            for t in range(1, steps + 1):
                err = float(np.max(np.abs(run.trajectory[t] - expected[t])))
                row("trajectory", stage, n, f"step{t}_max_abs_err", _fmt_float(err),
                    _fmt_float(ZERO_TOL), err <= ZERO_TOL)
            factor = 2 if stage == 2 else 3
            expected_vol = factor * (n - 1) * n_params
            row("comm", stage, n, "elements_per_step", run.volume_per_step, expected_vol,
                run.volume_per_step == expected_vol)
            steady = steady_model_bytes(stage, n_params, n, widths)
            for rank in range(n):
                row("memory", stage, n, f"rank{rank}_model_bytes", run.model_bytes[rank], steady,
                    run.model_bytes[rank] == steady)
                row("memory", stage, n, f"rank{rank}_peak_bytes", run.memory.peak(rank))
            if stage == 3:
                total = widths.total * n_params
                row("memory", stage, n, "total_over_world", total // n, total, total == n * run.model_bytes[0])

    segments = cfg.get("segments", (3, 5, 2))
    peaks = {}
    for reuse in ([cfg.reuse] if cfg.reuse is not None else [False, True]):
        peaks[reuse] = reuse_plan(segments, reuse, widths.param, widths.grad).peak(0)
        row("reuse", "", 1, f"peak_bytes_reuse_{'on' if reuse else 'off'}", peaks[reuse])
    if len(peaks) == 2:
        row("reuse", "", 1, "peak_ratio_on_over_off", f"{peaks[True] / peaks[False]:.4f}", "0.5000",
            2 * peaks[True] == peaks[False])

    default_budgets = tuple(k * sum(segments) * widths.total // 4 for k in range(5))
    for budget in sorted(set(cfg.get("budgets", default_budgets))):
        pl = hybrid_place(segments, widths.optimizer, budget, widths.param, widths.grad)
        row("placement", "", 1, f"budget{budget}_tags", "/".join(pl.tags))
        row("placement", "", 1, f"budget{budget}_device_bytes", pl.device_bytes, budget,
            pl.device_bytes <= budget)
        row("placement", "", 1, f"budget{budget}_host_bytes", pl.host_bytes)
        row("placement", "", 1, f"budget{budget}_transfer_bytes", pl.transfer_bytes)
    return EXIT_OK if ok else EXIT_TOLERANCE


# -- scaling --------------------------------------------------------------


def cmd_scaling(cfg: ExperimentConfig, scheduler: str, fh) -> int:
    shape = _shape(cfg, SCALING_SHAPE)
    rows = scaling_table(cfg.get("p_sweep", (1, 2, 4, 8, 16, 27, 32, 64)), shape, cfg.depths)
    write_scaling_csv(rows, fh)
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "commvol": cmd_commvol,
    "memscan": cmd_memscan,
    "zero": cmd_zero,
    "scaling": cmd_scaling,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpsim", description="Tensor-parallelism simulator experiments.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--out", help="CSV output path (default: stdout)")
    parser.add_argument("--scheduler", choices=SCHEDULERS, default="threads")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        out_path = args.out or cfg.out
        buf = io.StringIO()
        buf.write(f"# tpsim {args.command} config_sha256={cfg.digest(args.command)} seed={cfg.seed}\n")
        code = COMMANDS[args.command](cfg, args.scheduler, buf)
    except Deadlock as exc:
        print(f"deadlock: {exc}", file=sys.stderr)
        return EXIT_DEADLOCK
    except ConfigError as exc:
        where = f" (key '{exc.key}')" if exc.key else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TpsimError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    if code == EXIT_TOLERANCE:
        print(f"{args.command}: tolerance violation", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
