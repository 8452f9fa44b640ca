"""Run configuration.

Config files are flat sectioned key-value text (INI grammar, parsed with
configparser): sections [topology], [workload], [sim], [agent], [output].
Every key is typed and validated; unknown sections or keys are rejected.
The effective config (after defaults) can be dumped back to text, and
re-running from that dump reproduces the run.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

from .agent import ArchConfig, TrainConfig
from .errors import ConfigError
from .simulator import SimConfig
from .topology import Topology, build_fattree, build_vl2
from .workload import FlowRecord, SizeDistribution, load_trace, synthesize_trace


@dataclass
class TopologyConfig:
    kind: str = "fattree"
    k: int = 4
    num_tor: int = 8
    num_agg: int = 4
    num_int: int = 2
    hosts_per_tor: int = 2
    ethernet_gbps: float = 1.0
    optical_gbps: float = 10.0
    budget_k: int = 4
    optical_matching: bool = False


@dataclass
class WorkloadConfig:
    trace: str = ""
    seed: int = 1
    rack_count: int = 8
    flow_count: int = 120
    mean_arrival_rate: float = 12.0
    size_lognormal_mu: float = 14.5
    size_lognormal_sigma: float = 1.5
    size_pareto_alpha: float = 1.6
    size_pareto_min: float = 5e7
    hotspot_fraction: float = 0.85
    hotspot_pairs: tuple[tuple[int, int], ...] = ((0, 4), (1, 5), (2, 6), (3, 7))


@dataclass
class OutputConfig:
    dir: str = "out"
    checkpoint_every: int = 50
    compare_seeds: int = 10


@dataclass
class RunConfig:
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    agent: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_pairs(text: str) -> tuple[tuple[int, int], ...]:
    pairs = []
    text = text.strip()
    if not text:
        return ()
    for token in text.split(","):
        try:
            a, b = token.strip().split("-")
            pairs.append((int(a), int(b)))
        except ValueError as exc:
            raise ConfigError(f"bad rack pair {token!r} (want e.g. 0-4)") from exc
    return tuple(pairs)


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok.strip()) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"bad integer list {text!r}") from exc


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}-{b}" for a, b in value)
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


# section -> key -> (getter from RunConfig, setter parse)
_SCHEMA = {
    "topology": {
        "kind": str,
        "k": int,
        "num_tor": int,
        "num_agg": int,
        "num_int": int,
        "hosts_per_tor": int,
        "ethernet_gbps": float,
        "optical_gbps": float,
        "budget_k": int,
        "optical_matching": _parse_bool,
    },
    "workload": {
        "trace": str,
        "seed": int,
        "rack_count": int,
        "flow_count": int,
        "mean_arrival_rate": float,
        "size_lognormal_mu": float,
        "size_lognormal_sigma": float,
        "size_pareto_alpha": float,
        "size_pareto_min": float,
        "hotspot_fraction": float,
        "hotspot_pairs": _parse_pairs,
    },
    "sim": {
        "step_seconds": float,
        "switch_delay": float,
        "reward_per_link": _parse_bool,
    },
    "agent": {
        "gamma": float,
        "gae_lambda": float,
        "entropy_beta": float,
        "value_coef": float,
        "replay_n": int,
        "lr0": float,
        "lr_decay": float,
        "workers": int,
        "explore_episodes": int,
        "exploit_sample_prob": float,
        "grad_clip": float,
        "advantage": str,
        "reward_scale": float,
        "reward_baseline": float,
        "episodes": int,
        "seed": int,
        "conv_filters": _parse_ints,
        "fc_block": int,
        "fc_trunk": _parse_ints,
        "float64": _parse_bool,
    },
    "output": {
        "dir": str,
        "checkpoint_every": int,
        "compare_seeds": int,
    },
}

# agent keys that live on the nested ArchConfig
_ARCH_KEYS = {"conv_filters", "fc_block", "fc_trunk"}


def parse_config(text: str) -> RunConfig:
    """Parse config text, applying defaults for missing keys and rejecting
    unknown sections/keys and out-of-range values."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc

    values: dict[str, dict] = {section: {} for section in _SCHEMA}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            convert = _SCHEMA[section][key]
            try:
                values[section][key] = convert(raw)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc

    cfg = RunConfig()
    try:
        cfg = replace(cfg, topology=replace(cfg.topology, **values["topology"]))
        cfg = replace(cfg, workload=replace(cfg.workload, **values["workload"]))
        cfg = replace(cfg, sim=replace(cfg.sim, **values["sim"]))
        agent_vals = dict(values["agent"])
        arch_vals = {}
        if "conv_filters" in agent_vals:
            filters = agent_vals.pop("conv_filters")
            if len(filters) != 2:
                raise ConfigError("conv_filters wants exactly two sizes, e.g. 16,32")
            arch_vals["conv_filters"] = filters
        if "fc_block" in agent_vals:
            arch_vals["fc_block"] = agent_vals.pop("fc_block")
        if "fc_trunk" in agent_vals:
            trunk = agent_vals.pop("fc_trunk")
            if len(trunk) != 2:
                raise ConfigError("fc_trunk wants exactly two sizes, e.g. 128,64")
            arch_vals["fc_trunk"] = trunk
        arch = replace(cfg.agent.arch, **arch_vals)
        cfg = replace(cfg, agent=replace(cfg.agent, arch=arch, **agent_vals))
        cfg = replace(cfg, output=replace(cfg.output, **values["output"]))
    except ConfigError:
        raise
    except Exception as exc:  # dataclass validation (ranges) surfaces here
        raise ConfigError(str(exc)) from exc
    _validate(cfg)
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        _validate(cfg)
        return cfg
    try:
        with open(path, "r") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc


def _validate(cfg: RunConfig) -> None:
    t = cfg.topology
    if t.kind not in ("fattree", "vl2"):
        raise ConfigError(f"topology kind must be fattree or vl2, got {t.kind!r}")
    if t.ethernet_gbps <= 0 or t.optical_gbps <= 0:
        raise ConfigError("link capacities must be positive")
    if t.budget_k < 1:
        raise ConfigError("budget_k must be at least 1")
    w = cfg.workload
    if w.rack_count != expected_rack_count(cfg):
        raise ConfigError(
            f"workload rack_count {w.rack_count} does not match the topology's "
            f"{expected_rack_count(cfg)} racks"
        )
    if not 0.0 <= w.hotspot_fraction <= 1.0:
        raise ConfigError("hotspot_fraction must lie in [0,1]")
    if cfg.sim.step_seconds <= 0:
        raise ConfigError("step_seconds must be positive")
    if cfg.sim.switch_delay < 0:
        raise ConfigError("switch_delay must be >= 0")
    if cfg.output.checkpoint_every < 0:
        raise ConfigError("checkpoint_every must be >= 0")
    if cfg.output.compare_seeds < 1:
        raise ConfigError("compare_seeds must be >= 1")


def expected_rack_count(cfg: RunConfig) -> int:
    t = cfg.topology
    return t.k * t.k // 2 if t.kind == "fattree" else t.num_tor


def dump_config(cfg: RunConfig) -> str:
    """Serialize the effective config (all keys, defaults included)."""
    out = io.StringIO()
    sections = {
        "topology": cfg.topology,
        "workload": cfg.workload,
        "sim": cfg.sim,
        "agent": cfg.agent,
        "output": cfg.output,
    }
    for section, obj in sections.items():
        out.write(f"[{section}]\n")
        for key in _SCHEMA[section]:
            if section == "agent" and key in _ARCH_KEYS:
                value = getattr(cfg.agent.arch, key)
            else:
                value = getattr(obj, key)
            out.write(f"{key} = {_fmt(value)}\n")
        out.write("\n")
    return out.getvalue()


# -- builders -----------------------------------------------------------------


def build_topology(cfg: RunConfig) -> Topology:
    t = cfg.topology
    if t.kind == "fattree":
        return build_fattree(
            t.k,
            ethernet_bps=t.ethernet_gbps * 1e9,
            optical_bps=t.optical_gbps * 1e9,
            budget_k=t.budget_k,
            optical_matching=t.optical_matching,
        )
    return build_vl2(
        t.num_tor,
        t.num_agg,
        t.num_int,
        t.hosts_per_tor,
        ethernet_bps=t.ethernet_gbps * 1e9,
        optical_bps=t.optical_gbps * 1e9,
        budget_k=t.budget_k,
        optical_matching=t.optical_matching,
    )


def size_distribution(cfg: RunConfig) -> SizeDistribution:
    w = cfg.workload
    return SizeDistribution(
        lognormal_mu=w.size_lognormal_mu,
        lognormal_sigma=w.size_lognormal_sigma,
        pareto_alpha=w.size_pareto_alpha,
        pareto_min=w.size_pareto_min,
    )


def build_trace(cfg: RunConfig, seed: Optional[int] = None) -> list[FlowRecord]:
    """Load the configured trace file, or synthesize one from the workload
    section (seed overrides the configured seed when given)."""
    w = cfg.workload
    if w.trace:
        return load_trace(w.trace, w.rack_count)
    return synthesize_trace(
        seed=w.seed if seed is None else seed,
        rack_count=w.rack_count,
        flow_count=w.flow_count,
        mean_arrival_rate=w.mean_arrival_rate,
        size_distribution=size_distribution(cfg),
        hotspot_fraction=w.hotspot_fraction,
        hotspot_pairs=w.hotspot_pairs,
    )


def episode_trace_fn(cfg: RunConfig):
    """Per-episode workload family used for training: a fixed trace file is
    replayed every episode, while synthetic workloads draw a fresh seed
    (base seed + episode index) each episode."""
    if cfg.workload.trace:
        fixed = build_trace(cfg)
        return lambda episode: fixed
    base = cfg.workload.seed
    return lambda episode: build_trace(cfg, seed=base + episode)
