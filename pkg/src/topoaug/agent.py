"""Topology-augmentation agent: twin-CNN policy/value network, top-k link
selection, and asynchronous actor-critic training with GAE and replay.

The state is two single-channel planes (traffic matrix, adjacency), encoded
through parallel conv blocks whose features are concatenated into a fully
connected trunk with a softmax link-probability head and a scalar value head.
Workers roll out episodes on private simulators and push clipped gradients to
a central parameter store every `replay_n` steps.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .errors import ParameterError, StateError
from .simulator import SimConfig, Simulator, StepReport, reset
from .topology import RackPathEnumerator, Topology
from .workload import FlowRecord


@dataclass(frozen=True)
class AgentState:
    tm_plane: np.ndarray  # (1, R, R)
    adj_plane: np.ndarray  # (1, N, N)


@dataclass(frozen=True)
class PolicyOutput:
    link_probs: np.ndarray  # distribution over candidate links
    value: float


@dataclass(frozen=True)
class ExperienceEntry:
    state: AgentState
    chosen_links: tuple[int, ...]
    step_reward: float
    value_estimate: float
    link_probs_snapshot: np.ndarray


@dataclass(frozen=True)
class ArchConfig:
    conv_filters: tuple[int, int] = (16, 32)
    kernel: int = 3
    fc_block: int = 128
    fc_trunk: tuple[int, int] = (128, 64)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_beta: float = 0.01
    value_coef: float = 0.5
    replay_n: int = 8
    lr0: float = 1e-4
    lr_decay: float = 0.95
    workers: int = 1
    explore_episodes: int = 50
    exploit_sample_prob: float = 0.1
    grad_clip: float = 40.0
    advantage: str = "gae"  # or "nstep"
    reward_scale: float = 1e-8
    # constant subtracted from each scaled step reward before learning; set
    # near the random-policy per-step mean so early advantages are signed
    # instead of uniformly positive (the value net starts near zero)
    reward_baseline: float = 0.0
    episodes: int = 200
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    float64: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ParameterError("gamma must lie in (0,1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ParameterError("gae_lambda must lie in [0,1]")
        if self.entropy_beta < 0:
            raise ParameterError("entropy_beta must be >= 0")
        if self.replay_n < 1:
            raise ParameterError("replay_n must be positive")
        if self.workers < 1:
            raise ParameterError("need at least one worker")
        if self.advantage not in ("gae", "nstep"):
            raise ParameterError(f"unknown advantage estimator {self.advantage!r}")


def encode_state(report: StepReport) -> AgentState:
    """Pack a simulator report into the two input planes."""
    return AgentState(
        tm_plane=report.traffic_matrix.cells[None, :, :],
        adj_plane=report.adjacency[None, :, :],
    )


class PolicyValueNet:
    """Fixed twin-block architecture; owns layer tapes and parameters."""

    def __init__(
        self,
        rack_count: int,
        node_count: int,
        num_candidates: int,
        arch: ArchConfig = ArchConfig(),
        seed: int = 0,
        dtype=np.float32,
    ):
        self.rack_count = rack_count
        self.node_count = node_count
        self.num_candidates = num_candidates
        self.arch = arch
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        f1, f2 = arch.conv_filters
        kk = arch.kernel

        def conv(name, cin, cout):
            w = nn.he_uniform(rng, (cout, cin, kk, kk), cin * kk * kk, dtype)
            return nn.Conv2D(name, w, np.zeros(cout, dtype=dtype))

        def dense(name, fan_in, fan_out):
            w = nn.xavier_uniform(rng, (fan_in, fan_out), fan_in, fan_out, dtype)
            return nn.Dense(name, w, np.zeros(fan_out, dtype=dtype))

        def block(tag, side):
            flat = f2 * side * side
            return nn.Chain(
                conv(f"{tag}.conv1", 1, f1),
                nn.ReLU(),
                conv(f"{tag}.conv2", f1, f2),
                nn.ReLU(),
                nn.Flatten(),
                dense(f"{tag}.fc", flat, arch.fc_block),
                nn.ReLU(),
            )

        self.block_tm = block("tm", rack_count)
        self.block_adj = block("adj", node_count)
        t1, t2 = arch.fc_trunk
        self.trunk = nn.Chain(
            dense("trunk.fc1", 2 * arch.fc_block, t1),
            nn.ReLU(),
            dense("trunk.fc2", t1, t2),
            nn.ReLU(),
        )
        self.policy_head = dense("policy", t2, num_candidates)
        self.softmax = nn.Softmax()
        self.value_head = dense("value", t2, 1)
        self._layers = [
            self.block_tm,
            self.block_adj,
            self.trunk,
            self.policy_head,
            self.value_head,
        ]

    # -- parameter plumbing --------------------------------------------------

    def _walk(self):
        stack = list(self._layers)
        while stack:
            layer = stack.pop()
            if isinstance(layer, nn.Chain):
                stack.extend(layer.layers)
            else:
                yield layer

    def params(self) -> nn.Params:
        out: nn.Params = {}
        for layer in self._walk():
            out.update(getattr(layer, "params", {}))
        return dict(sorted(out.items()))

    def grads(self) -> nn.Params:
        out: nn.Params = {}
        for layer in self._walk():
            out.update(getattr(layer, "grads", {}))
        return dict(sorted(out.items()))

    def set_params(self, values: nn.Params) -> None:
        own = self.params()
        if set(own) != set(values):
            raise StateError("parameter name mismatch")
        for key, arr in own.items():
            arr[...] = values[key]

    def zero_grads(self) -> None:
        for layer in self._layers:
            layer.zero_grads()

    def fingerprint(self) -> str:
        return nn.params_fingerprint(self.params())

    # -- forward / backward ----------------------------------------------------

    def forward(self, state: AgentState) -> PolicyOutput:
        tm = state.tm_plane.astype(self.dtype, copy=False)
        adj = state.adj_plane.astype(self.dtype, copy=False)
        if tm.shape != (1, self.rack_count, self.rack_count):
            raise ParameterError(f"tm plane shape {tm.shape} does not match architecture")
        if adj.shape != (1, self.node_count, self.node_count):
            raise ParameterError(f"adjacency plane shape {adj.shape} does not match architecture")
        ha = self.block_tm.forward(tm)
        hb = self.block_adj.forward(adj)
        h = self.trunk.forward(np.concatenate([ha, hb]))
        probs = self.softmax.forward(self.policy_head.forward(h))
        value = float(self.value_head.forward(h)[0])
        return PolicyOutput(link_probs=probs, value=value)

    def backward(self, dprobs: np.ndarray, dvalue: float) -> None:
        """Accumulate gradients of a scalar loss given seeds on the softmax
        output and the value scalar (a forward pass must precede this)."""
        gz = self.softmax.backward(dprobs.astype(self.dtype, copy=False))
        gh = self.policy_head.backward(gz)
        gh = gh + self.value_head.backward(np.array([dvalue], dtype=self.dtype))
        gcat = self.trunk.backward(gh)
        ga, gb = gcat[: self.arch.fc_block], gcat[self.arch.fc_block :]
        self.block_tm.backward(ga)
        self.block_adj.backward(gb)


def net_for_topology(
    topo: Topology, cfg: TrainConfig, seed: Optional[int] = None
) -> PolicyValueNet:
    return PolicyValueNet(
        rack_count=topo.num_racks,
        node_count=topo.num_nodes,
        num_candidates=len(topo.candidate_optical),
        arch=cfg.arch,
        seed=cfg.seed if seed is None else seed,
        dtype=np.float64 if cfg.float64 else np.float32,
    )


def forward_policy(net: PolicyValueNet, state: AgentState) -> PolicyOutput:
    return net.forward(state)


# -- action selection -----------------------------------------------------------


def select_action(
    po: PolicyOutput, mode: str, rng: np.random.Generator, k: int
) -> tuple[int, ...]:
    """Pick k distinct candidate links.

    exploit: the k largest probabilities (ties to the lowest index).
    explore: sample without replacement proportional to the probabilities,
    renormalizing after each draw.
    """
    probs = np.asarray(po.link_probs, dtype=np.float64)
    n = probs.shape[0]
    if k > n:
        raise ParameterError(f"budget {k} exceeds {n} candidates")
    if mode == "exploit":
        order = sorted(range(n), key=lambda i: (-probs[i], i))
        return tuple(sorted(order[:k]))
    if mode != "explore":
        raise ParameterError(f"unknown selection mode {mode!r}")
    chosen = []
    weights = probs.copy()
    for _ in range(k):
        total = weights.sum()
        if total <= 0:
            remaining = [i for i in range(n) if i not in chosen]
            pick = remaining[int(rng.integers(len(remaining)))]
        else:
            u = rng.random() * total
            acc = 0.0
            pick = n - 1
            for i in range(n):
                acc += weights[i]
                if u < acc:
                    pick = i
                    break
        chosen.append(pick)
        weights[pick] = 0.0
    return tuple(sorted(chosen))


# -- returns, advantages, loss ------------------------------------------------------


def compute_returns_and_advantages(
    log: Sequence[ExperienceEntry], bootstrap_value: float, cfg: TrainConfig
) -> tuple[np.ndarray, np.ndarray]:
    """n-step bootstrapped discounted returns plus GAE (or plain n-step)
    advantages over a replay window; `bootstrap_value` is V of the state
    following the window (zero when the episode terminated there)."""
    if not log:
        raise ParameterError("empty experience log")
    rewards = np.array([e.step_reward for e in log], dtype=np.float64)
    values = np.array([e.value_estimate for e in log], dtype=np.float64)
    n = len(log)
    returns = np.zeros(n)
    acc = bootstrap_value
    for t in range(n - 1, -1, -1):
        acc = rewards[t] + cfg.gamma * acc
        returns[t] = acc
    if cfg.advantage == "nstep":
        advantages = returns - values
    else:
        next_values = np.append(values[1:], bootstrap_value)
        deltas = rewards + cfg.gamma * next_values - values
        advantages = np.zeros(n)
        acc = 0.0
        for t in range(n - 1, -1, -1):
            acc = deltas[t] + cfg.gamma * cfg.gae_lambda * acc
            advantages[t] = acc
    return returns, advantages


def compute_loss(
    net: PolicyValueNet,
    log: Sequence[ExperienceEntry],
    returns: np.ndarray,
    advantages: np.ndarray,
    cfg: TrainConfig,
    accumulate_grads: bool = True,
) -> float:
    """Policy-gradient loss over a replay window.

    loss = sum_t [ -sum_{i in chosen_t} log pi_i(s_t) * A_t
                   - beta * H(pi(s_t)) ]
           + c_v * sum_t (R_t - V(s_t))^2

    Advantages are treated as constants. When `accumulate_grads` is set the
    exact parameter gradients are accumulated on the net's layers.
    """
    if not (len(log) == len(returns) == len(advantages)):
        raise ParameterError("log, returns and advantages must align")
    if accumulate_grads:
        net.zero_grads()
    total = 0.0
    for entry, ret, adv in zip(log, returns, advantages):
        po = net.forward(entry.state)
        p = np.asarray(po.link_probs, dtype=np.float64)
        logp = np.log(p)
        chosen = np.asarray(entry.chosen_links, dtype=np.intp)
        entropy = float(-(p * logp).sum())
        policy_term = -float(logp[chosen].sum()) * adv - cfg.entropy_beta * entropy
        value_err = ret - po.value
        total += policy_term + cfg.value_coef * value_err * value_err
        if accumulate_grads:
            dp = cfg.entropy_beta * (logp + 1.0)
            dp[chosen] -= adv / p[chosen]
            dv = -2.0 * cfg.value_coef * value_err
            net.backward(dp, dv)
    nn.ensure_finite("loss", total)
    return float(total)


# -- central parameter store ----------------------------------------------------------


class ParameterStore:
    """Shared parameter server: atomic snapshot, atomic gradient application
    in arrival order, monotone version counter and per-episode lr decay."""

    def __init__(self, params: nn.Params, cfg: TrainConfig):
        self._lock = threading.Lock()
        self._params = {k: v.copy() for k, v in params.items()}
        self._adam = nn.Adam(self._params)
        self._cfg = cfg
        self.version = 0
        self.episodes_done = 0
        self._episode_counter = 0

    @property
    def lr(self) -> float:
        return nn.decay_lr(self._cfg.lr0, self.episodes_done, self._cfg.lr_decay)

    def snapshot(self) -> nn.Params:
        with self._lock:
            return {k: v.copy() for k, v in self._params.items()}

    def apply(self, grads: nn.Params) -> int:
        with self._lock:
            for key, g in grads.items():
                nn.ensure_finite(f"gradient {key}", g)
            self._adam.update(self._params, grads, self.lr)
            self.version += 1
            return self.version

    def claim_episode(self) -> int:
        with self._lock:
            idx = self._episode_counter
            self._episode_counter += 1
            return idx

    def finish_episode(self) -> int:
        with self._lock:
            self.episodes_done += 1
            return self.episodes_done

    def optimizer(self) -> nn.Adam:
        return self._adam

    def load_optimizer_state(self, state: dict) -> None:
        self._adam.load_state(state)

    def set_progress(self, episodes_done: int) -> None:
        self.episodes_done = episodes_done
        self._episode_counter = episodes_done


# -- training and evaluation -------------------------------------------------------------


@dataclass
class TrainLogRow:
    episode: int
    worker: int
    total_reward: float
    loss: float
    lr: float


@dataclass
class TrainResult:
    params: nn.Params
    log: list[TrainLogRow]
    store: ParameterStore


def _episode_mode(episode: int, cfg: TrainConfig, rng: np.random.Generator) -> Callable[[], str]:
    if episode < cfg.explore_episodes:
        return lambda: "explore"
    return lambda: "explore" if rng.random() < cfg.exploit_sample_prob else "exploit"


def run_episode(
    net: PolicyValueNet,
    store: ParameterStore,
    topo: Topology,
    trace: Sequence[FlowRecord],
    sim_cfg: SimConfig,
    cfg: TrainConfig,
    rng: np.random.Generator,
    episode: int,
    paths: Optional[RackPathEnumerator] = None,
) -> tuple[float, float]:
    """One training episode; returns (raw episode reward, mean replay loss)."""
    sim, report = reset(topo, trace, sim_cfg, paths)
    net.set_params(store.snapshot())
    state = encode_state(report)
    mode_fn = _episode_mode(episode, cfg, rng)
    log: list[ExperienceEntry] = []
    losses: list[float] = []
    total_reward = 0.0
    while not report.done:
        po = net.forward(state)
        action = select_action(po, mode_fn(), rng, topo.budget_k)
        sim.apply_action([topo.candidate_optical[i] for i in action])
        report = sim.step()
        total_reward += report.reward
        log.append(
            ExperienceEntry(
                state=state,
                chosen_links=action,
                step_reward=report.reward * cfg.reward_scale - cfg.reward_baseline,
                value_estimate=po.value,
                link_probs_snapshot=po.link_probs.copy(),
            )
        )
        state = encode_state(report)
        if len(log) >= cfg.replay_n or report.done:
            bootstrap = 0.0 if report.done else net.forward(state).value
            returns, advantages = compute_returns_and_advantages(log, bootstrap, cfg)
            loss = compute_loss(net, log, returns, advantages, cfg)
            grads = net.grads()
            nn.clip_global_norm(grads, cfg.grad_clip)
            store.apply(grads)
            net.set_params(store.snapshot())
            losses.append(loss)
            log = []
    return total_reward, float(np.mean(losses)) if losses else 0.0


def train(
    topo: Topology,
    trace_fn: Callable[[int], Sequence[FlowRecord]],
    cfg: TrainConfig,
    sim_cfg: SimConfig | None = None,
    checkpoint_dir: Optional[str] = None,
    checkpoint_every: int = 0,
    resume_from: Optional[str] = None,
    progress: Optional[Callable[[TrainLogRow], None]] = None,
) -> TrainResult:
    """Run `cfg.workers` asynchronous workers over `cfg.episodes` episodes.

    `trace_fn(episode)` supplies the workload for each episode. Workers share
    only the parameter store; each owns a simulator, network tape and RNG
    stream derived from the master seed and its index. With one worker
    training runs inline and is fully deterministic.
    """
    sim_cfg = sim_cfg or SimConfig()
    proto = net_for_topology(topo, cfg)
    store = ParameterStore(proto.params(), cfg)
    start_episode = 0
    if resume_from:
        params, adam_state, meta = nn.load_checkpoint(resume_from, proto.fingerprint())
        with store._lock:
            for k in store._params:
                store._params[k][...] = params[k]
        store.load_optimizer_state(adam_state)
        start_episode = int(meta.get("episodes_done", 0))
        store.set_progress(start_episode)

    rows: list[TrainLogRow] = []
    rows_lock = threading.Lock()
    shared_paths = RackPathEnumerator(topo)

    def save_checkpoint_if_due(done: int):
        if checkpoint_dir and checkpoint_every > 0 and done % checkpoint_every == 0:
            _save(done)

    def _save(done: int):
        import os

        os.makedirs(checkpoint_dir, exist_ok=True)
        # rng state: episode streams derive from (seed, episode), so the
        # master seed plus the episode counter pins the remaining randomness
        meta = {
            "episodes_done": done,
            "lr": store.lr,
            "topology": topo.name,
            "rng": {"master_seed": cfg.seed, "next_episode": done},
        }
        path = f"{checkpoint_dir}/checkpoint_ep{done:05d}.npz"
        nn.save_checkpoint(path, store.snapshot(), store.optimizer(), meta)
        nn.save_checkpoint(f"{checkpoint_dir}/latest.npz", store.snapshot(), store.optimizer(), meta)

    def worker(worker_idx: int):
        net = net_for_topology(topo, cfg)
        paths = shared_paths if cfg.workers == 1 else RackPathEnumerator(topo)
        while True:
            episode = store.claim_episode()
            if episode >= cfg.episodes:
                break
            # per-episode stream: resuming from a checkpoint replays exactly
            # the episodes an uninterrupted run would have produced
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, episode]))
            trace = trace_fn(episode)
            reward, loss = run_episode(
                net, store, topo, trace, sim_cfg, cfg, rng, episode, paths
            )
            lr_used = store.lr
            done = store.finish_episode()
            row = TrainLogRow(episode, worker_idx, reward, loss, lr_used)
            with rows_lock:
                rows.append(row)
            if progress:
                progress(row)
            save_checkpoint_if_due(done)

    if cfg.workers == 1:
        worker(0)
    else:
        threads = [
            threading.Thread(target=worker, args=(i,), name=f"trainer-{i}")
            for i in range(cfg.workers)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    if checkpoint_dir:
        _save(store.episodes_done)
    rows.sort(key=lambda r: r.episode)
    return TrainResult(params=store.snapshot(), log=rows, store=store)


def evaluate(
    params: nn.Params,
    topo: Topology,
    trace: Sequence[FlowRecord],
    sim_cfg: SimConfig | None = None,
    cfg: TrainConfig | None = None,
    paths: Optional[RackPathEnumerator] = None,
):
    """Exploit-mode rollout of a trained policy; no learning."""
    from .baselines import make_policy, rollout

    cfg = cfg or TrainConfig()
    policy = make_policy("agent", topo, params=params, train_cfg=cfg)
    return rollout(topo, trace, sim_cfg or SimConfig(), policy, paths=paths)
