"""Evaluation and diagnostics for trained critics and policies."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .algorithm import Agent, CriticPair, TrainConfig, binary_accuracy_from_logits, critic_logits, train
from .dataset import TrajectoryStore, assemble_batch, valid_transitions
from .env import DISCRETE, GoalProcess, GridWorld, PointMass, SuccessCriterion
from .nn import cosine_similarity


@dataclass
class EvalReport:
    success_rate: float
    mean_episode_length: float
    outcomes: list = field(default_factory=list)  # (goal_index, success, steps)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["goal_index", "success", "steps"])
            w.writerows(self.outcomes)
            w.writerow([])
            w.writerow(["success_rate", repr(self.success_rate)])
            w.writerow(["mean_episode_length", repr(self.mean_episode_length)])


def _agent_actor(process, agent: Agent):
    def act(states, goals):
        f = process.features
        out = agent.policy.act(f(np.asarray(states)), f(np.asarray(goals)), greedy=True)
        if process.action_kind == DISCRETE:
            return list(np.argmax(out, axis=1))
        return list(out)
    return act


def evaluate_policy(process: GoalProcess, policy, critic=None, goals=None, horizon=None,
                    criterion: SuccessCriterion | None = None, seed=0, starts=None) -> EvalReport:
    """Greedy rollouts, one per goal; success if the criterion holds at any step.

    ``policy`` is an :class:`Agent` or a callable mapping lists of
    (states, goals) to lists of actions. Starts are drawn from the initial
    distribution, redrawn while they already satisfy the criterion.
    ``critic`` is accepted for interface symmetry and unused.
    """
    if goals is None or len(goals) == 0:
        raise ValueError("empty goal set")
    horizon = process.horizon if horizon is None else horizon
    criterion = criterion or process.default_criterion()
    act = _agent_actor(process, policy) if isinstance(policy, Agent) else policy
    rng = np.random.default_rng(seed)
    n = len(goals)
    if starts is None:
        starts = []
        for g in goals:
            s = process.sample_initial(rng)
            while criterion.is_success(s, g):
                s = process.sample_initial(rng)
            starts.append(s)
    states = list(starts)
    done = [criterion.is_success(s, g) for s, g in zip(states, goals)]
    steps = [0] * n
    for t in range(horizon):
        active = [i for i in range(n) if not done[i]]
        if not active:
            break
        actions = act([states[i] for i in active], [goals[i] for i in active])
        for i, a in zip(active, actions):
            states[i] = process.step(states[i], a, rng)
            steps[i] = t + 1
            if criterion.is_success(states[i], goals[i]):
                done[i] = True
    outcomes = [(i, int(done[i]), steps[i]) for i in range(n)]
    return EvalReport(sum(done) / n, float(np.mean(steps)), outcomes)


def sample_goals(process: GoalProcess, n: int, seed=0) -> list:
    rng = np.random.default_rng(seed)
    return [process.sample_goal(rng) for _ in range(n)]


# ---------------------------------------------------------------- scripted rollouts

def oracle_rollout(process: GoalProcess, start, goal, max_steps=None):
    """Noise-free shortest-path rollout from start to goal.

    Gridworlds move along the first greedy action (vertical before
    horizontal); point-masses move straight at full speed. Returns
    (states, actions) with len(states) == len(actions) + 1 and the last
    state equal to (or within the criterion of) the goal.
    """
    max_steps = process.horizon if max_steps is None else max_steps
    criterion = process.default_criterion()
    if isinstance(process, GridWorld):
        if process.slip_prob > 0:
            raise ValueError("oracle rollouts need a deterministic gridworld")
        step = lambda s: process.greedy_actions(s, goal)[0]
    elif isinstance(process, PointMass):
        if process.noise_std > 0:
            raise ValueError("oracle rollouts need a noise-free point-mass")
        step = lambda s: np.clip((np.asarray(goal) - s) / process.max_step, -1.0, 1.0)
    else:
        raise ValueError(f"no scripted controller for {process.name}")
    states, actions = [start], []
    rng = np.random.default_rng(0)  # unused by noise-free dynamics
    while not criterion.is_success(states[-1], goal):
        if len(actions) >= max_steps:
            raise ValueError("oracle rollout did not reach the goal")
        actions.append(step(states[-1]))
        states.append(process.step(states[-1], actions[-1], rng))
    return states, actions


def start_goal_pairs(process: GoalProcess, n, seed=0, min_states=3):
    """Start/goal pairs whose oracle rollouts visit at least ``min_states`` states."""
    rng = np.random.default_rng(seed)
    crit = process.default_criterion()
    pairs = []
    for _ in range(1000 * max(n, 1)):
        if len(pairs) == n:
            break
        s, g = process.sample_initial(rng), process.sample_goal(rng)
        if crit.is_success(s, g):
            continue
        states, _ = oracle_rollout(process, s, g)
        if len(states) >= min_states:
            pairs.append((s, g))
    if len(pairs) < n:
        raise ValueError(f"could not find {n} start/goal pairs {min_states - 1}+ steps apart in {process.name}")
    return pairs


def interpolation_frames(process: GoalProcess, start, goal, num_frames=8):
    """``num_frames`` evenly spaced states of an oracle rollout, in temporal order."""
    states, _ = oracle_rollout(process, start, goal)
    idx = np.round(np.linspace(0, len(states) - 1, num_frames)).astype(int)
    return [states[i] for i in idx]


# ---------------------------------------------------------------- binary accuracy

def feature_batch(process: GoalProcess, agent: Agent, batch):
    f = process.features
    return f(batch.states), agent.action_features(batch.actions), f(batch.future_goals)


def held_out_batches(process, agent, store: TrajectoryStore, n_batches, batch_size, gamma, seed=0):
    rng = np.random.default_rng(seed)
    valid = valid_transitions(store)
    return [feature_batch(process, agent, assemble_batch(store, batch_size, gamma, rng, valid))
            for _ in range(n_batches)]


def binary_accuracy(critic: CriticPair, held_out_batches) -> float:
    """Mean over batches of B x B accuracy; a pair is called positive iff f > 0."""
    accs = [binary_accuracy_from_logits(critic.logits(s, a, g)) for s, a, g in held_out_batches]
    return float(np.mean(accs))


# ---------------------------------------------------------------- interpolation

@dataclass
class InterpolationTrace:
    alphas: np.ndarray
    perm: np.ndarray
    similarity: np.ndarray
    error: int

    def records(self):
        return [{"alpha": float(a), "retrieved_index": int(p), "similarity": float(s)}
                for a, p, s in zip(self.alphas, self.perm, self.similarity)]

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({"error": int(self.error), "steps": self.records()}, fh, indent=2)


def permutation_error(perm) -> int:
    perm = np.asarray(perm, dtype=np.int64)
    return int(np.abs(perm - np.arange(len(perm))).sum())


def _retrieve(z, candidates, metric):
    if metric == "cosine":
        sims = np.stack([cosine_similarity(np.broadcast_to(zi, candidates.shape), candidates) for zi in z])
        return np.argmax(sims, axis=1), sims.max(axis=1)
    d = np.linalg.norm(z[:, None, :] - candidates[None, :, :], axis=2)
    return np.argmin(d, axis=1), -d.min(axis=1)


def interpolate_and_retrieve(critic: CriticPair, start_obs, goal_obs, validation_set, num_alphas=8):
    """Linearly interpolate psi(start) -> psi(goal) and retrieve, for each
    alpha, the validation observation whose psi has the highest cosine."""
    validation_set = np.asarray(validation_set)
    if len(validation_set) == 0:
        raise ValueError("empty validation set")
    alphas = np.linspace(0.0, 1.0, num_alphas)
    ends = critic.psi(np.stack([np.asarray(start_obs), np.asarray(goal_obs)])).astype(np.float64)
    z = (1 - alphas)[:, None] * ends[0] + alphas[:, None] * ends[1]
    perm, sim = _retrieve(z, critic.psi(validation_set).astype(np.float64), "cosine")
    return InterpolationTrace(alphas, perm, sim, permutation_error(perm))


def pixel_interpolate_and_retrieve(start_obs, goal_obs, validation_set, num_alphas=8):
    """Baseline: blend raw observations and retrieve by L2 distance."""
    validation_set = np.asarray(validation_set, dtype=np.float64)
    if len(validation_set) == 0:
        raise ValueError("empty validation set")
    alphas = np.linspace(0.0, 1.0, num_alphas)
    a = np.asarray(start_obs, dtype=np.float64).reshape(-1)
    b = np.asarray(goal_obs, dtype=np.float64).reshape(-1)
    z = (1 - alphas)[:, None] * a + alphas[:, None] * b
    perm, sim = _retrieve(z, validation_set.reshape(len(validation_set), -1), "l2")
    return InterpolationTrace(alphas, perm, sim, permutation_error(perm))


# ---------------------------------------------------------------- Q trace

def normalize_trace(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    lo, hi = q.min(), q.max()
    if hi == lo:
        return np.zeros_like(q)
    return (q - lo) / (hi - lo)


def q_trace(critic: CriticPair, states, actions, goal) -> np.ndarray:
    """Min-max normalized f(s_t, a_t, g) along a trajectory (features in)."""
    states = np.asarray(states)
    if len(states) < 2:
        raise ValueError("q_trace needs a trajectory of at least 2 steps")
    goals = np.repeat(np.asarray(goal)[None], len(states), axis=0)
    phi = critic.phi(states, actions).astype(np.float64)
    psi = critic.psi(goals).astype(np.float64)
    return normalize_trace(np.sum(phi * psi, axis=1))


def spearman(x, y) -> float:
    """Rank correlation; 0 when either input is constant."""
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    r = spearmanr(x, y).statistic
    return float(r) if np.isfinite(r) else 0.0


# ---------------------------------------------------------------- alignment at init

def alignment_at_init(critic_factory, init_ranges, probe_batches) -> dict:
    """Mean cos(phi(s, a), psi(g+)) over probe positive pairs, per init range."""
    out = {}
    for eps in init_ranges:
        if eps <= 0:
            raise ValueError("init ranges must be positive")
        critic = critic_factory(eps)
        sims = [cosine_similarity(critic.phi(s, a), critic.psi(g)) for s, a, g in probe_batches]
        out[eps] = float(np.mean(np.concatenate(sims)))
    return out


def mean_pairwise_cosine(x) -> float:
    """Mean cosine over all distinct row pairs of x."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    i, j = np.triu_indices(n, 1)
    return float(np.mean(cosine_similarity(x[i], x[j])))


# ---------------------------------------------------------------- ablations

ABLATION_AXES = ("mlp_width_depth", "batch_size", "cold_init_range", "layer_norm", "augmentation", "repr_dim")


def ablation_config(base: TrainConfig, axis: str, value, seed: int) -> TrainConfig:
    if axis == "mlp_width_depth":
        w, d = value
        return base.replace(mlp_width=int(w), mlp_depth=int(d), seed=seed)
    if axis == "batch_size":
        return base.replace(batch_size=int(value), seed=seed)
    if axis == "cold_init_range":
        return base.replace(cold_init_range=float(value), seed=seed)
    if axis == "layer_norm":
        return base.replace(use_layer_norm=bool(value), seed=seed)
    if axis == "augmentation":
        return base.replace(aug_prob=float(value), seed=seed)
    if axis == "repr_dim":
        return base.replace(repr_dim=int(value), seed=seed)
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


@dataclass
class AblationRow:
    axis_value: object
    seed: int
    success_rate: float
    binary_accuracy: float


def run_ablation(base_config: TrainConfig, axis: str, values, seeds, process: GoalProcess,
                 store: TrajectoryStore, held_out: TrajectoryStore | None = None, num_goals=50,
                 eval_seed=1234, accuracy_batches=10, horizon=None, out_csv=None) -> list:
    """Train every (value, seed) variant and report success rate and held-out
    binary accuracy. ``held_out`` defaults to the training store."""
    if not len(values):
        raise ValueError("ablation needs at least one value")
    goals = sample_goals(process, num_goals, eval_seed)
    rows = []
    for value in values:
        for seed in seeds:
            cfg = ablation_config(base_config, axis, value, seed)
            try:
                agent, _ = train(cfg, process, store)
            except Exception as e:
                raise type(e)(f"variant {axis}={value} seed={seed}: {e}") from e
            report = evaluate_policy(process, agent, goals=goals, horizon=horizon, seed=eval_seed + seed)
            batches = held_out_batches(process, agent, held_out or store, accuracy_batches,
                                       cfg.batch_size, cfg.gamma, seed=eval_seed)
            rows.append(AblationRow(value, seed, report.success_rate, binary_accuracy(agent.critic, batches)))
    if out_csv is not None:
        write_ablation_csv(rows, out_csv)
    return rows


def write_ablation_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis_value", "seed", "success_rate", "binary_accuracy"])
        for r in rows:
            w.writerow([r.axis_value, r.seed, repr(r.success_rate), repr(r.binary_accuracy)])


def summarize(rows) -> dict:
    """Mean success rate and accuracy per axis value, in first-seen order."""
    out = {}
    for r in rows:
        key = r.axis_value if not isinstance(r.axis_value, list) else tuple(r.axis_value)
        out.setdefault(key, []).append((r.success_rate, r.binary_accuracy))
    return {k: tuple(np.mean(v, axis=0)) for k, v in out.items()}
