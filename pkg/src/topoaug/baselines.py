"""Reference link-selection policies and the shared rollout harness.

Policies map a simulator step report to candidate-link indices: the static
fabric (no optical links), uniform random selection, a greedy picker of the
hottest rack pairs, and an exhaustive one-step-lookahead oracle that scores
every budget-sized subset on a cloned simulator (exact at desk scale, in
place of an LP that would not scale anyway).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ParameterError
from .simulator import SimConfig, Simulator, StepReport, path_links, reset, splitmix64
from .topology import RackPathEnumerator, Topology
from .workload import FlowRecord, TrafficMatrix

PolicyFn = Callable[[StepReport, Simulator, np.random.Generator], tuple[int, ...]]


def static_policy() -> tuple[int, ...]:
    """Never activates optical links (plain ethernet fabric)."""
    return ()


def random_policy(rng: np.random.Generator, num_candidates: int, k: int) -> tuple[int, ...]:
    """k distinct candidate indices, uniform over subsets."""
    if k > num_candidates:
        raise ParameterError(f"budget {k} exceeds {num_candidates} candidates")
    return tuple(sorted(int(i) for i in rng.permutation(num_candidates)[:k]))


def greedy_policy(
    tm: TrafficMatrix, candidates: Sequence[tuple[int, int]], k: int
) -> tuple[int, ...]:
    """Top-k rack pairs by symmetric demand, ties to the lowest pair index."""
    cells = tm.cells
    demand = [
        (-(cells[i, j] + cells[j, i]), idx) for idx, (i, j) in enumerate(candidates)
    ]
    demand.sort()
    return tuple(sorted(idx for _, idx in demand[:k]))


def optimal_policy(
    sim: Simulator, k: int, subset_cap: int = 1_000_000
) -> tuple[int, ...]:
    """Exhaustive myopic oracle: simulate one step under every k-subset of
    candidate links and return the subset with the highest step reward
    (ties to the lexicographically smallest subset).

    Subsets that would pin every flow of the step to identical paths produce
    identical rewards, so the step simulation is memoized on the induced
    path assignment; the enumeration itself stays exhaustive.
    """
    topo = sim.topo
    candidates = topo.candidate_optical
    n = len(candidates)
    if comb(n, k) > subset_cap:
        raise ParameterError(
            f"C({n},{k}) = {comb(n, k)} subsets exceed the enumeration cap {subset_cap}"
        )

    step_end = sim.now + sim.config.step_seconds
    records = [f.record for f in sim.active]
    idx = sim._next_arrival
    while idx < len(sim.trace) and sim.trace[idx].arrival_time < step_end:
        records.append(sim.trace[idx])
        idx += 1
    # flow id -> ECMP pick index is subset-independent; hash once
    record_hash = [(rec, splitmix64(rec.flow_id)) for rec in records]
    pairs_present = sorted({(rec.src_rack, rec.dst_rack) for rec in records})
    current = frozenset(topo.active_optical)
    track_downtime = sim.config.switch_delay > 0
    path_table = sim.paths.paths

    best_reward = None
    best_combo = None
    memo: dict = {}
    for combo in combinations(range(n), k):
        pairs = frozenset(candidates[i] for i in combo)
        if topo.optical_matching:
            used = [r for pair in pairs for r in pair]
            if len(used) != len(set(used)):
                continue
        # the step reward only depends on the per-flow path assignment, which
        # is fixed by the interned path tuple each present pair maps to
        key = tuple(id(path_table(pairs, s, d)) for s, d in pairs_present)
        if track_downtime:
            added = pairs - current if pairs != current else frozenset()
            added_links = frozenset(
                (
                    min(topo.rack_node(i), topo.rack_node(j)),
                    max(topo.rack_node(i), topo.rack_node(j)),
                )
                for i, j in added
            )
            used_links = set()
            for rec, h in record_hash:
                choices = path_table(pairs, rec.src_rack, rec.dst_rack)
                used_links.update(path_links(choices[h % len(choices)]))
            key = (key, frozenset(added_links & used_links))
        reward = memo.get(key)
        if reward is None:
            trial = sim.clone()
            trial.apply_action(pairs)
            reward = trial.step(build_state=False).reward
            memo[key] = reward
        if best_reward is None or reward > best_reward:
            best_reward = reward
            best_combo = combo
    return tuple(best_combo)


# -- ready-made policy callables --------------------------------------------------


def make_policy(
    name: str,
    topo: Topology,
    *,
    params=None,
    train_cfg=None,
    subset_cap: int = 1_000_000,
) -> PolicyFn:
    """Policy factory for the CLI; `agent` requires params and train_cfg."""
    k = topo.budget_k
    candidates = topo.candidate_optical
    if name == "static":
        return lambda report, sim, rng: static_policy()
    if name == "random":
        return lambda report, sim, rng: random_policy(rng, len(candidates), k)
    if name == "greedy":
        return lambda report, sim, rng: greedy_policy(report.traffic_matrix, candidates, k)
    if name == "optimal":
        return lambda report, sim, rng: optimal_policy(sim, k, subset_cap)
    if name == "agent":
        from . import agent as agent_mod

        if params is None:
            raise ParameterError("agent policy requires trained parameters")
        cfg = train_cfg or agent_mod.TrainConfig()
        net = agent_mod.net_for_topology(topo, cfg)
        net.set_params(params)

        def agent_policy(report, sim, rng):
            po = net.forward(agent_mod.encode_state(report))
            return agent_mod.select_action(po, "exploit", rng, k)

        return agent_policy
    raise ParameterError(f"unknown policy {name!r}")


# -- rollout harness ----------------------------------------------------------------


@dataclass
class RolloutResult:
    fct_pairs: list[tuple[int, float]]
    median_fct: Optional[float]
    actions: list[tuple[int, ...]]
    step_rewards: list[float]
    total_reward: float
    simulator: Simulator

    @property
    def fcts(self) -> list[float]:
        return [fct for _, fct in self.fct_pairs]


def rollout(
    topo: Topology,
    trace: Sequence[FlowRecord],
    sim_cfg: SimConfig,
    policy: PolicyFn,
    seed: int = 0,
    paths: Optional[RackPathEnumerator] = None,
) -> RolloutResult:
    """Run a full episode under `policy` (no learning) and collect metrics."""
    sim, report = reset(topo, trace, sim_cfg, paths)
    rng = np.random.default_rng(seed)
    actions: list[tuple[int, ...]] = []
    step_rewards: list[float] = []
    while not report.done:
        action = tuple(policy(report, sim, rng))
        actions.append(action)
        sim.apply_action([topo.candidate_optical[i] for i in action])
        report = sim.step()
        step_rewards.append(report.reward)
    fct_pairs, med = sim.fct_summary()
    return RolloutResult(
        fct_pairs=fct_pairs,
        median_fct=med,
        actions=actions,
        step_rewards=step_rewards,
        total_reward=float(sum(step_rewards)),
        simulator=sim,
    )
