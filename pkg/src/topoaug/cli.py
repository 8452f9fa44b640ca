"""Command-line entry points: synth, train, eval, compare.

Every command is reproducible from its config file plus seed; the effective
config (defaults applied) is dumped next to the outputs. Exit codes: 0 ok,
2 config/usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace
from statistics import median
from typing import Optional, Sequence

import numpy as np

from . import agent as agent_mod
from . import baselines, nn
from .config import (
    RunConfig,
    build_topology,
    build_trace,
    dump_config,
    episode_trace_fn,
    load_config,
)
from .errors import ConfigError, NumericError, TopoaugError
from .simulator import fct_rows
from .topology import RackPathEnumerator
from .workload import write_trace

POLICIES = ("agent", "static", "random", "greedy", "optimal")


def _write_csv(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _dump_effective_config(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.ini"), "w") as fh:
        fh.write(dump_config(cfg))


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, workload=replace(cfg.workload, seed=args.seed))
    if getattr(args, "out", None):
        cfg = replace(cfg, output=replace(cfg.output, dir=args.out))
    return cfg


def _percentile(values: list[float], q: float) -> Optional[float]:
    if not values:
        return None
    return float(np.percentile(np.array(values, dtype=np.float64), q))


def _load_agent_params(cfg: RunConfig, checkpoint: Optional[str], topo):
    if not checkpoint or not os.path.exists(checkpoint or ""):
        raise ConfigError("policy 'agent' needs --checkpoint pointing at a trained model")
    net = agent_mod.net_for_topology(topo, cfg.agent)
    params, _, meta = nn.load_checkpoint(checkpoint, net.fingerprint())
    return params, meta


def cmd_synth(cfg: RunConfig, out_path: Optional[str]) -> int:
    trace = build_trace(cfg)
    path = out_path or os.path.join(cfg.output.dir, "trace.csv")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    write_trace(path, trace)
    print(f"wrote {len(trace)} flows to {path}")
    return 0


def cmd_train(cfg: RunConfig, resume: bool) -> int:
    out_dir = cfg.output.dir
    _dump_effective_config(cfg, out_dir)
    topo = build_topology(cfg)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    resume_from = None
    if resume:
        latest = os.path.join(ckpt_dir, "latest.npz")
        if not os.path.exists(latest):
            raise ConfigError(f"--resume given but {latest} does not exist")
        resume_from = latest

    log_path = os.path.join(out_dir, "training_log.csv")
    mode = "a" if resume_from else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not resume_from:
            writer.writerow(("episode", "worker", "total_reward", "loss", "lr"))

        def progress(row: agent_mod.TrainLogRow):
            writer.writerow(
                (
                    row.episode,
                    row.worker,
                    _fmt_float(row.total_reward),
                    _fmt_float(row.loss),
                    _fmt_float(row.lr),
                )
            )
            fh.flush()

        result = agent_mod.train(
            topo,
            episode_trace_fn(cfg),
            cfg.agent,
            cfg.sim,
            checkpoint_dir=ckpt_dir,
            checkpoint_every=cfg.output.checkpoint_every,
            resume_from=resume_from,
            progress=progress,
        )
    print(
        f"trained {len(result.log)} episodes "
        f"(store version {result.store.version}); checkpoints in {ckpt_dir}"
    )
    return 0


def _run_policy(cfg: RunConfig, topo, policy_name: str, seed: int, params, paths):
    trace = build_trace(cfg, seed=seed)
    policy = baselines.make_policy(
        policy_name, topo, params=params, train_cfg=cfg.agent
    )
    return baselines.rollout(topo, trace, cfg.sim, policy, seed=seed, paths=paths)


def cmd_eval(cfg: RunConfig, policy_name: str, checkpoint: Optional[str]) -> int:
    if policy_name not in POLICIES:
        raise ConfigError(f"unknown policy {policy_name!r} (choose from {POLICIES})")
    out_dir = cfg.output.dir
    _dump_effective_config(cfg, out_dir)
    topo = build_topology(cfg)
    params = None
    if policy_name == "agent":
        params, _ = _load_agent_params(cfg, checkpoint, topo)

    started = time.perf_counter()
    result = _run_policy(cfg, topo, policy_name, cfg.workload.seed, params, None)
    runtime = time.perf_counter() - started

    rows = [
        (fid, _fmt_float(arr), _fmt_float(fct), size)
        for fid, arr, fct, size in fct_rows(result.simulator)
    ]
    _write_csv(
        os.path.join(out_dir, f"fct_{policy_name}.csv"),
        ("flow_id", "arrival_s", "fct_s", "bytes"),
        rows,
    )
    _write_csv(
        os.path.join(out_dir, f"actions_{policy_name}.csv"),
        ("step", "link_indices"),
        [(i, " ".join(map(str, act))) for i, act in enumerate(result.actions)],
    )
    fcts = result.fcts
    summary = {
        "policy": policy_name,
        "seed": cfg.workload.seed,
        "flows_completed": len(fcts),
        "median_fct_s": result.median_fct,
        "mean_fct_s": float(np.mean(fcts)) if fcts else None,
        "p95_fct_s": _percentile(fcts, 95.0),
        "total_reward": result.total_reward,
        "steps": len(result.actions),
        "runtime_s": runtime,
    }
    with open(os.path.join(out_dir, f"summary_{policy_name}.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    med = "n/a" if result.median_fct is None else f"{result.median_fct:.6f}s"
    print(f"{policy_name}: median FCT {med} over {len(fcts)} flows")
    return 0


def cmd_compare(cfg: RunConfig, checkpoint: Optional[str]) -> int:
    out_dir = cfg.output.dir
    _dump_effective_config(cfg, out_dir)
    topo = build_topology(cfg)
    params = None
    policies = list(POLICIES)
    if checkpoint:
        params, _ = _load_agent_params(cfg, checkpoint, topo)
    else:
        policies.remove("agent")

    paths = RackPathEnumerator(topo)
    seeds = [cfg.workload.seed + i for i in range(cfg.output.compare_seeds)]
    rows = []
    medians: dict[str, list[float]] = {p: [] for p in policies}
    for policy_name in policies:
        for seed in seeds:
            result = _run_policy(cfg, topo, policy_name, seed, params, paths)
            fcts = result.fcts
            rows.append(
                (
                    policy_name,
                    seed,
                    _fmt_float(result.median_fct) if result.median_fct is not None else "",
                    _fmt_float(float(np.mean(fcts))) if fcts else "",
                    _fmt_float(_percentile(fcts, 95.0)) if fcts else "",
                    _fmt_float(result.total_reward),
                    len(fcts),
                )
            )
            if result.median_fct is not None:
                medians[policy_name].append(result.median_fct)
        print(f"compared policy {policy_name} over {len(seeds)} seeds")

    _write_csv(
        os.path.join(out_dir, "compare.csv"),
        ("policy", "seed", "median_fct_s", "mean_fct_s", "p95_fct_s", "total_reward", "flows"),
        rows,
    )
    summary = {
        "seeds": seeds,
        "mean_median_fct_s": {p: float(np.mean(v)) if v else None for p, v in medians.items()},
    }
    if "agent" in medians and medians.get("optimal"):
        agent_mean = float(np.mean(medians["agent"]))
        optimal_mean = float(np.mean(medians["optimal"]))
        summary["agent_over_optimal_median_fct"] = agent_mean / optimal_mean
    with open(os.path.join(out_dir, "compare_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="topoaug",
        description="Flow-level DC simulator and RL harness for optical topology augmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file (INI); defaults apply when omitted")
        p.add_argument("--seed", type=int, help="override workload seed")
        p.add_argument("--out", help="override output directory")

    p_synth = sub.add_parser("synth", help="synthesize a trace CSV")
    common(p_synth)
    p_synth.add_argument("--trace-out", help="trace file path (default <out>/trace.csv)")

    p_train = sub.add_parser("train", help="train the augmentation agent")
    common(p_train)
    p_train.add_argument("--resume", action="store_true", help="continue from latest checkpoint")

    p_eval = sub.add_parser("eval", help="evaluate one policy")
    common(p_eval)
    p_eval.add_argument("--policy", default="static", help=f"one of {', '.join(POLICIES)}")
    p_eval.add_argument("--checkpoint", help="trained model (required for --policy agent)")

    p_cmp = sub.add_parser("compare", help="run all policies on paired seeds")
    common(p_cmp)
    p_cmp.add_argument("--checkpoint", help="trained model for the agent policy")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "synth":
            return cmd_synth(cfg, args.trace_out)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.policy, args.checkpoint)
        if args.command == "compare":
            return cmd_compare(cfg, args.checkpoint)
        raise ConfigError(f"unknown command {args.command!r}")
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, TopoaugError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
