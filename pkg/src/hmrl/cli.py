"""Command-line front end: train, eval, and oracle-check.

Commands:
    train --config <path> [--seed N] [--out DIR]
    eval --ckpt <path> --split train|test [--config <path>] [--out DIR]
    oracle-check --ckpt <path> [--config <path>]

The output root can be overridden with the HMRL_OUT_ROOT environment
variable (relative output directories are placed under it).  A lock file
guards each output directory against concurrent commands.

metrics.csv is fully deterministic for a fixed master seed: one row per
iteration, fixed column order, repr-formatted floats.  Wall-clock timings go
to stdout and timings.csv instead so reruns stay byte-identical.  Setting
HMRL_INJECT_NAN to hl/il/ppo poisons that loss (test hook for the numeric
failure path; exit code 2).
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path


from . import envs, oracle, trainer
from .config import RunConfig, format_config, parse_config
from .errors import ConfigurationError, NumericError, UsageError

METRICS_COLUMNS = [
    "iteration",
    "train_avg_success_mean", "train_avg_success_std",
    "train_term_success_mean", "train_term_success_std",
    "train_return_mean", "train_return_std",
    "test_avg_success_mean", "test_avg_success_std",
    "test_term_success_mean", "test_term_success_std",
    "test_return_mean", "test_return_std",
    "loss_value", "loss_entropy_reg", "loss_occupancy",
    "loss_kl", "loss_transition", "skipped_steps",
    "ppo_surrogate", "policy_entropy", "clip_fraction", "mean_ratio",
]

CONFIG_ECHO_NAME = "config_resolved.cfg"


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_row_line(row: dict) -> str:
    return ",".join(_fmt(row[c]) for c in METRICS_COLUMNS)


def resolve_out_dir(path_str: str) -> Path:
    root = os.environ.get("HMRL_OUT_ROOT", "")
    p = Path(path_str)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


@contextmanager
def output_lock(out_dir: Path):
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"output directory {out_dir} is locked by another command "
                         f"(remove {lock} if stale)") from None
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def make_suites(cfg: RunConfig, seed: int):
    return envs.make_suite(cfg.suite, cfg.n_train_tasks, cfg.n_test_tasks, seed,
                           cfg.suite_params())


def cmd_train(config_path: str, seed: int | None = None, out: str | None = None) -> int:
    cfg = parse_config(config_path)
    if seed is not None:
        cfg = RunConfig(**{**cfg.__dict__, "master_seed": seed})
    if out is not None:
        cfg = RunConfig(**{**cfg.__dict__, "out_dir": out})
    out_dir = resolve_out_dir(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with output_lock(out_dir):
        (out_dir / CONFIG_ECHO_NAME).write_text(format_config(cfg), encoding="utf-8")
        train_tasks, test_tasks = make_suites(cfg, cfg.master_seed)
        run = trainer.build_run_state(cfg)
        run.inject_nan = os.environ.get("HMRL_INJECT_NAN", "")
        buffer = trainer.ReplayBuffer(cfg.buffer_capacity)

        metrics_path = out_dir / "metrics.csv"
        timings_path = out_dir / "timings.csv"
        with open(metrics_path, "w", encoding="utf-8", newline="\n") as mfh, \
                open(timings_path, "w", encoding="utf-8", newline="\n") as tfh:
            mfh.write(",".join(METRICS_COLUMNS) + "\n")
            tfh.write("iteration,seconds\n")
            for i in range(cfg.iterations):
                t0 = time.perf_counter()
                try:
                    row = trainer.train_iteration(run, buffer, train_tasks, test_tasks)
                except NumericError as exc:
                    print(f"numeric failure: {exc}", file=sys.stderr)
                    return 2
                seconds = time.perf_counter() - t0
                mfh.write(metrics_row_line(row) + "\n")
                mfh.flush()
                tfh.write(f"{i},{seconds:.3f}\n")
                print(f"it {i:4d} | train avg {row['train_avg_success_mean']:.3f} "
                      f"term {row['train_term_success_mean']:.3f} "
                      f"ret {row['train_return_mean']:.1f} | "
                      f"test term {row['test_term_success_mean']:.3f} | "
                      f"L_V {row['loss_value']:.3g} L_KL {row['loss_kl']:.3g} "
                      f"L_tr {row['loss_transition']:.3g} | {seconds:.2f}s")
                if (i + 1) % cfg.checkpoint_every == 0:
                    trainer.save_checkpoint(out_dir / f"checkpoint_{i + 1:06d}.npz", run)
            trainer.save_checkpoint(out_dir / "checkpoint_final.npz", run)
    return 0


def _load_run_for(ckpt_path: str, config_path: str | None):
    ckpt = Path(ckpt_path)
    if config_path is None:
        echo = ckpt.parent / CONFIG_ECHO_NAME
        if not echo.exists():
            raise ConfigurationError(
                f"no --config given and {echo} not found next to the checkpoint")
        config_path = str(echo)
    cfg = parse_config(config_path)
    run = trainer.load_checkpoint(ckpt, cfg)
    return run, cfg


def cmd_eval(ckpt_path: str, split: str, config_path: str | None = None,
             out: str | None = None) -> int:
    if split not in ("train", "test"):
        raise UsageError(f"split must be 'train' or 'test', got {split!r}")
    run, cfg = _load_run_for(ckpt_path, config_path)
    train_tasks, test_tasks = make_suites(cfg, run.master_seed)
    tasks = train_tasks if split == "train" else test_tasks
    trajs = trainer.collect(run, tasks, iteration=0, mode="eval")
    m = trainer.trajectory_metrics(trajs)
    print(f"split={split} episodes={len(trajs)}")
    print(f"avg_success  {m['avg_success_mean']:.4f} +- {m['avg_success_std']:.4f}")
    print(f"term_success {m['term_success_mean']:.4f} +- {m['term_success_std']:.4f}")
    print(f"return       {m['return_mean']:.4f} +- {m['return_std']:.4f}")
    out_dir = resolve_out_dir(out) if out else Path(ckpt_path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    eval_path = out_dir / f"eval_{split}.csv"
    with open(eval_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("task_index,episode,avg_success,term_success,return\n")
        per_task: dict[int, int] = {}
        for tr in trajs:
            ep = per_task.get(tr.task_index, 0)
            per_task[tr.task_index] = ep + 1
            fh.write(f"{tr.task_index},{ep},{_fmt(envs.avg_episode_success(tr.success))},"
                     f"{_fmt(envs.terminal_success(tr.success))},{_fmt(float(tr.r_ext.sum()))}\n")
    return 0


def _alignment_reports(run, cfg) -> list[oracle.OracleReport]:
    train_tasks, _ = make_suites(cfg, run.master_seed)
    dataset = trainer.alignment_dataset(run, train_tasks, cfg.episodes_per_task,
                                        cfg.goal_lookahead)
    result = oracle.macro_alignment(run.intermediate.encoder_mean, dataset)
    return [oracle.OracleReport("macro_alignment mean cosine (trained)", 1.0,
                                result["mean"], 0.8, kind="min")]


def cmd_oracle_check(ckpt_path: str, config_path: str | None = None) -> int:
    run, cfg = _load_run_for(ckpt_path, config_path)
    if cfg.suite != "linear":
        raise ConfigurationError("oracle-check needs a linear-suite checkpoint "
                                 f"(got suite {cfg.suite!r})")
    reports: list[oracle.OracleReport] = []
    reports.extend(oracle.closed_form_reports(cfg))
    reports.extend(oracle.gradient_reports())
    reports.extend(_alignment_reports(run, cfg))
    print(f"{'check':<44} {'oracle':<12} {'system':<12} tolerance  result")
    for rep in reports:
        print(rep.row())
    report_path = Path(ckpt_path).parent / "oracle_report.csv"
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("name,oracle_value,system_value,tolerance,kind,passed\n")
        for rep in reports:
            fh.write(f"{rep.name},{_fmt(float(rep.oracle_value))},"
                     f"{_fmt(float(rep.system_value))},{_fmt(float(rep.tolerance))},"
                     f"{rep.kind},{rep.passed}\n")
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hmrl",
                                     description="hierarchical meta-RL trainer")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run training iterations")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)

    p_eval = sub.add_parser("eval", help="deterministic rollouts from a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--split", required=True, choices=("train", "test"))
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--out", default=None)

    p_oracle = sub.add_parser("oracle-check", help="run all oracle comparisons")
    p_oracle.add_argument("--ckpt", required=True)
    p_oracle.add_argument("--config", default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, seed=args.seed, out=args.out)
        if args.command == "eval":
            return cmd_eval(args.ckpt, args.split, config_path=args.config, out=args.out)
        return cmd_oracle_check(args.ckpt, config_path=args.config)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
