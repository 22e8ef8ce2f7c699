"""Command-line experiment runner.

    flgfn run [CONFIG] [--env PRESET] [--objective NAME] [--seed N] [--partial BOOL]
              [--budget N] [--section.key=value ...]
    flgfn sweep [CONFIG] [--env PRESET] [--section.key=value ...]
    flgfn eval RUN_DIR
    flgfn oracle [CONFIG] [--env PRESET] [--out DIR]

Outputs go under ``$FLGFN_OUTPUT_ROOT`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import os
import statistics
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .config import ConfigError, RunConfig, load_config
from .envs import BitSeqEnv, EnumerationCapError
from .evaluation import (
    SampleLog,
    count_modes,
    exact_terminal_distribution,
    flow_oracle,
    l1_distance,
    prefix_tree_flows,
    spearman_log,
    target_distribution,
    top_k_avg_reward,
)
from .objectives import Objective
from .trainer import (
    METRIC_COLUMNS,
    NonFiniteLossError,
    _exact_enabled,
    _test_set,
    build_model,
    mode_criterion_for,
    run_training,
)

EXIT_CONFIG = 2
EXIT_NONFINITE = 3


def output_root() -> Path:
    return Path(os.environ.get("FLGFN_OUTPUT_ROOT", "runs"))


def fmt(value) -> str:
    """CSV cell: empty for inapplicable metrics, round-trippable floats."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def run_dir_for(cfg: RunConfig, root: Path | None = None) -> Path:
    return (root or output_root()) / f"{cfg.digest()}-seed{cfg.seed}"


def _report(cfg: RunConfig, env) -> dict[str, dict[str, str]]:
    crit = mode_criterion_for(cfg, env)
    return {"report": {"mode_criterion": crit.describe() if crit else "",
                       "backend": kernels.BACKEND}}


def execute_run(cfg: RunConfig, out_dir: Path) -> int:
    """Train one configuration, streaming metrics into ``out_dir``. Returns an exit code."""
    out_dir.mkdir(parents=True, exist_ok=True)
    env = cfg.env.build()
    (out_dir / "config.ini").write_text(cfg.to_ini(_report(cfg, env)), encoding="utf-8")
    for stale in ("error.txt",):
        (out_dir / stale).unlink(missing_ok=True)
    with open(out_dir / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        fh.flush()

        def on_row(row: dict) -> None:
            writer.writerow([fmt(row[c]) for c in METRIC_COLUMNS])
            fh.flush()

        code = 0
        try:
            result = run_training(cfg, on_row=on_row, env=env)
        except NonFiniteLossError as exc:
            (out_dir / "error.txt").write_text(f"{exc}\n{exc.diagnostic}\n", encoding="utf-8")
            print(f"error: {exc} (details in {out_dir / 'error.txt'})", file=sys.stderr)
            result = exc.result
            code = EXIT_NONFINITE
    if result is not None:
        _write_csv(out_dir / "samples.csv", ["key", "log_reward", "step"],
                   ((r.key, r.log_reward, r.step) for r in result.samples.records))
        timing = [(row["transitions"], t) for row, t in zip(result.rows, result.timings)]
        _write_csv(out_dir / "timing.csv", ["transitions", "seconds"], timing)
        if code == 0:
            arrays = dict(result.model.state_arrays())
            if result.log_z is not None:
                arrays["log_z"] = np.asarray(result.log_z.data)
            np.savez(out_dir / "model.npz", **arrays)
    return code


def _final_metrics(out_dir: Path) -> dict[str, str]:
    with open(out_dir / "metrics.csv", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return rows[-1] if rows else {}


# ---------------------------------------------------------------------------


def _common(parser: argparse.ArgumentParser, training: bool) -> None:
    parser.add_argument("config", nargs="?", help="configuration file")
    parser.add_argument("--env", dest="preset", help="named preset, e.g. set-tiny")
    if training:
        parser.add_argument("--objective", help="db, tb, subtb, fl-db or fl-subtb")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--partial", choices=["true", "false"])
        parser.add_argument("--budget", type=int, help="transition budget")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flgfn", allow_abbrev=False,
                                     description="Train and evaluate GFlowNets.")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("run", allow_abbrev=False, help="train one configuration"), True)
    _common(sub.add_parser("sweep", allow_abbrev=False, help="objectives x seeds grid"), True)
    p = sub.add_parser("eval", allow_abbrev=False, help="recompute metrics of a saved run")
    p.add_argument("run_dir")
    p = sub.add_parser("oracle", allow_abbrev=False, help="exact target and flow tables")
    _common(p, False)
    p.add_argument("--out", help="output directory")
    return parser


def _split_overrides(extra: list[str]) -> list[str]:
    out = []
    for item in extra:
        if not item.startswith("--") or "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"unrecognised argument {item!r} (overrides look like --section.key=value)")
        out.append(item[2:])
    return out


def _load(args, extra: list[str]) -> RunConfig:
    overrides = _split_overrides(extra)
    if getattr(args, "objective", None):
        overrides.append(f"objective.kind={Objective.parse(args.objective).value}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "partial", None):
        overrides.append(f"train.partial={args.partial}")
    if getattr(args, "budget", None) is not None:
        overrides.append(f"train.budget={args.budget}")
    return load_config(args.config, overrides, preset=args.preset)


def cmd_run(args, extra) -> int:
    cfg = _load(args, extra)
    out = run_dir_for(cfg)
    code = execute_run(cfg, out)
    print(out)
    return code


def cmd_sweep(args, extra) -> int:
    base = _load(args, extra)
    objectives = [Objective.parse(o) for o in base.sweep_objectives] or [base.objective]
    seeds = base.sweep_seeds or [base.seed]
    root = output_root() / f"sweep-{base.digest()}"
    root.mkdir(parents=True, exist_ok=True)
    finals: dict[Objective, list[dict]] = {o: [] for o in objectives}
    failures = []
    for obj in objectives:
        for seed in seeds:
            cfg = dataclasses.replace(base, objective=obj, seed=seed, sweep_objectives=[],
                                      sweep_seeds=[])
            cell = root / f"{obj.value}-seed{seed}"
            try:
                cfg.validate()
                code = execute_run(cfg, cell)
            except Exception as exc:  # record and continue with the other cells
                cell.mkdir(parents=True, exist_ok=True)
                (cell / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
                code = 1
            if code:
                failures.append((obj.value, seed))
                continue
            finals[obj].append(_final_metrics(cell))
    metrics = [c for c in METRIC_COLUMNS if c not in ("step",)]
    header = ["objective", "n_seeds", "n_failed"]
    for m in metrics:
        header += [f"{m}_mean", f"{m}_std"]
    rows = []
    for obj in objectives:
        row: list = [obj.value, len(finals[obj]), sum(1 for o, _ in failures if o == obj.value)]
        for m in metrics:
            vals = [float(r[m]) for r in finals[obj] if r.get(m, "") != ""]
            if vals:
                row += [statistics.fmean(vals) if len(set(vals)) > 1 else vals[0],
                        statistics.pstdev(vals) if len(vals) > 1 else 0.0]
            else:
                row += [None, None]
        rows.append(row)
    _write_csv(root / "summary.csv", header, rows)
    print(root)
    return 1 if failures else 0


def cmd_eval(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    run = Path(args.run_dir)
    cfg = load_config(run / "config.ini")
    env = cfg.env.build()
    model, log_z, _ = build_model(cfg, env)
    with np.load(run / "model.npz") as data:
        arrays = {k: data[k] for k in data.files}
    arrays.pop("log_z", None)
    model.load_arrays(arrays)
    log = SampleLog()
    with open(run / "samples.csv", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            log.append(rec["key"], float(rec["log_reward"]), int(rec["step"]))
    crit = mode_criterion_for(cfg, env)
    row = {"top_k_avg_reward": top_k_avg_reward(log, cfg.eval.top_k).mean if len(log) else None,
           "modes": count_modes(log, crit) if crit else None,
           "l1_to_target": None, "spearman": None}
    if _exact_enabled(cfg, env):
        row["l1_to_target"] = l1_distance(exact_terminal_distribution(model, env, cfg.env.enum_cap),
                                          target_distribution(env, cfg.env.enum_cap))
        row["spearman"] = spearman_log(model, env, _test_set(cfg, env))
    _write_csv(run / "eval.csv", list(row), [list(row.values())])
    for k, v in row.items():
        print(f"{k},{fmt(v)}")
    return 0


def cmd_oracle(args, extra) -> int:
    cfg = _load(args, extra)
    env = cfg.env.build()
    out = Path(args.out) if args.out else output_root() / f"oracle-{cfg.digest()}"
    out.mkdir(parents=True, exist_ok=True)
    target = target_distribution(env, cfg.env.enum_cap)
    _write_csv(out / "target.csv", ["key", "log_reward", "prob"],
               ((k, lp + target.log_z, math.exp(lp)) for k, lp in zip(target.keys, target.log_probs)))
    rows = []
    if isinstance(env, BitSeqEnv):
        flows = prefix_tree_flows(env, cfg.env.enum_cap)
        for lvl in range(env.n_words + 1):
            for s, lf, e in zip(env.level_states(lvl), flows.log_flow[lvl], flows.energy[lvl]):
                rows.append((env.key(s), lf, lf + e))
    else:
        table = flow_oracle(env, "uniform", cfg.env.enum_cap)
        for s in table.states:
            rows.append((env.key(s), table.log_flow[env.key(s)], table.forward_looking(s)))
    _write_csv(out / "flows.csv", ["key", "log_flow", "log_flow_tilde"], rows)
    print(out)
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "eval": cmd_eval, "oracle": cmd_oracle}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return COMMANDS[args.command](args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EnumerationCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
