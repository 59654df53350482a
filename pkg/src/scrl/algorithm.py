"""Contrastive critic losses, the BC-regularized actor and the offline training loop."""
from __future__ import annotations

import csv
import dataclasses
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .dataset import ContrastiveBatch, TrajectoryStore, assemble_batch, random_crop_batch, valid_transitions
from .env import DISCRETE, IMAGE, GoalProcess
from .nn import Adam, Network, TrainingDivergence, build_encoder, load_checkpoint, save_checkpoint

LOGP_FLOOR = -30.0
METRIC_FIELDS = ("step", "critic_loss", "actor_loss", "bc_loss", "binary_accuracy",
                 "pos_logit_mean", "neg_logit_mean", "wall_ms")


@dataclass
class TrainConfig:
    gamma: float = 0.99
    batch_size: int = 2048
    repr_dim: int = 16
    lr: float = 3e-4
    lam: float = 0.5
    critic_mode: str = "mc"
    cold_init_range: float = 1e-12
    use_layer_norm: bool = True
    aug_prob: float = 0.5
    aug_pad: int = 4
    augment_critic: bool = False
    td_weight_clip: float = 20.0
    target_period: int = 0
    total_steps: int = 300_000
    steps_per_epoch: int = 1000
    mlp_width: int = 1024
    mlp_depth: int = 4
    policy_std: float = 0.15
    update_actor: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if not 0.0 <= self.aug_prob <= 1.0:
            raise ValueError(f"aug_prob must be in [0, 1], got {self.aug_prob}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.critic_mode not in ("mc", "td"):
            raise ValueError(f"critic_mode must be mc or td, got {self.critic_mode!r}")
        if self.td_weight_clip <= 0:
            raise ValueError("td_weight_clip must be positive")
        if self.total_steps < 0 or self.steps_per_epoch < 1:
            raise ValueError("total_steps must be >= 0 and steps_per_epoch >= 1")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class LossReport:
    critic_loss: float
    actor_loss: float
    bc_loss: float
    critic_term_of_actor: float
    binary_accuracy: float
    pos_logit_mean: float
    neg_logit_mean: float


# ---------------------------------------------------------------- networks

@dataclass
class CriticPair:
    phi: Network
    psi: Network

    def __post_init__(self):
        if self.phi.output_dim != self.psi.output_dim:
            raise ValueError("phi and psi must share the representation dimension")

    @property
    def repr_dim(self) -> int:
        return self.phi.output_dim

    def logits(self, states, actions, goals) -> np.ndarray:
        return critic_logits(self.phi(states, actions), self.psi(goals))

    def copy(self) -> "CriticPair":
        return CriticPair(self.phi.copy(), self.psi.copy())


@dataclass
class PolicyNet:
    net: Network
    kind: str  # "categorical" | "gaussian"
    action_dim: int
    std: float = 0.15

    def __post_init__(self):
        if self.kind == "gaussian" and not self.std > 0:
            raise ValueError("Gaussian policy std must be positive")

    def output(self, states, goals):
        return self.net(policy_input(states, goals))

    def probs(self, states, goals):
        return np.exp(log_softmax(self.output(states, goals)))

    def act(self, states, goals, rng=None, greedy=True):
        """Action features: one-hot rows (categorical) or vectors (Gaussian)."""
        out = self.output(states, goals).astype(np.float64)
        if self.kind == "categorical":
            if greedy:
                idx = np.argmax(out, axis=1)
            else:
                idx = sample_categorical(np.exp(log_softmax(out)), rng)
            return one_hot(idx, self.action_dim)
        if greedy:
            return out
        return out + self.std * rng.normal(size=out.shape)


@dataclass
class Agent:
    critic: CriticPair
    policy: PolicyNet
    feature_shape: tuple
    discrete: bool
    obs_kind: str = "feature-vector"
    meta: dict = field(default_factory=dict)

    def nets(self) -> dict:
        return {"phi": self.critic.phi, "psi": self.critic.psi, "policy": self.policy.net}

    def action_features(self, actions) -> np.ndarray:
        if self.discrete:
            return one_hot(np.asarray(actions).reshape(-1).astype(np.int64), self.policy.action_dim)
        return np.asarray(actions, dtype=np.float32).reshape(len(actions), -1)


def build_agent(process: GoalProcess, config: TrainConfig, rng=None) -> Agent:
    rng = np.random.default_rng(config.seed if rng is None else rng)
    shape = tuple(process.feature_shape)
    discrete = process.action_kind == DISCRETE
    n_act = process.action_dim
    kw = dict(width=config.mlp_width, depth=config.mlp_depth, use_layer_norm=config.use_layer_norm,
              init_range=config.cold_init_range)
    phi = build_encoder(shape, config.repr_dim, extra_dim=n_act, rng=rng, **kw)
    psi = build_encoder(shape, config.repr_dim, rng=rng, **kw)
    pshape = (2 * shape[0],) + shape[1:]
    pnet = build_encoder(pshape, n_act, rng=rng, **kw)
    policy = PolicyNet(pnet, "categorical" if discrete else "gaussian", n_act, config.policy_std)
    return Agent(CriticPair(phi, psi), policy, shape, discrete, process.obs_kind)


def policy_input(states, goals) -> np.ndarray:
    """Concatenate state and goal along the feature (or channel) axis."""
    return np.concatenate([states, goals], axis=1)


def one_hot(idx, n) -> np.ndarray:
    out = np.zeros((len(idx), n), dtype=np.float32)
    out[np.arange(len(idx)), idx] = 1.0
    return out


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_categorical(probs, rng):
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,))
    return np.minimum((cdf <= u).sum(axis=-1), probs.shape[-1] - 1)


def sample_categorical_grouped(probs, group, rng):
    """Same draws as sample_categorical(probs[group], rng) without
    materializing one distribution per entry of ``group``."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(group.shape)
    out = np.zeros(group.shape, dtype=np.int64)
    for k in range(probs.shape[-1] - 1):
        out += cdf[:, k][group] <= u
    return out


def softplus(x):
    return -log_expit(-np.asarray(x, dtype=np.float64))


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------- critic

def critic_logits(phi_out, psi_out) -> np.ndarray:
    """L[i, j] = phi_i . psi_j."""
    phi_out, psi_out = np.asarray(phi_out), np.asarray(psi_out)
    if phi_out.ndim != 2 or psi_out.ndim != 2 or phi_out.shape[1] != psi_out.shape[1]:
        raise ValueError(f"representation shapes {phi_out.shape} and {psi_out.shape} do not match")
    return phi_out.astype(np.float64) @ psi_out.T.astype(np.float64)


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise TrainingDivergence(f"non-finite {what}")


def mc_critic_loss(logits):
    """Negated NCE-Binary objective over a B x B logit matrix.

    Positives are the diagonal, negatives every off-diagonal entry.
    Returns (loss, d loss / d logits).
    """
    L = np.asarray(logits, dtype=np.float64)
    B = L.shape[0]
    if L.shape != (B, B) or B < 2:
        raise ValueError("mc_critic_loss needs a square logit matrix with B >= 2")
    _check_finite(L, "logits")
    pos = np.diag(L)
    sp = softplus(L)
    loss = softplus(-pos).mean() + (sp.sum() - np.trace(sp)) / (B * (B - 1))
    grad = sigmoid(L) / (B * (B - 1))
    np.fill_diagonal(grad, -sigmoid(-pos) / B)
    return float(loss), grad


def mc_critic_step(critic: CriticPair, states, actions, goals, backward=True):
    """NCE-Binary loss on one batch; accumulates phi and psi gradients.
    Returns (loss, logits)."""
    phi_out, t_phi = critic.phi.forward(states, actions)
    psi_out, t_psi = critic.psi.forward(goals)
    L = critic_logits(phi_out, psi_out)
    loss, dL = mc_critic_loss(L)
    if backward:
        critic.phi.backward(t_phi, dL @ psi_out.astype(np.float64))
        critic.psi.backward(t_psi, dL.T @ phi_out.astype(np.float64))
    return loss, L


def td_critic_loss(critic: CriticPair, policy: PolicyNet, states, actions, next_states, goals,
                   gamma, weight_clip=20.0, rng=None, target: CriticPair | None = None,
                   backward=True):
    """Negated TD contrastive objective; accumulates critic gradients.

    Per row i, with random goals g_j (j != i) and a'_ij ~ pi(. | s'_i, g_j):
      (1-g) softplus(-f(s_i,a_i,s'_i))
      + mean_j [ softplus(f_ij) + g * w_ij * softplus(-f_ij) ]
    where w_ij = exp(f_target(s'_i, a'_ij, g_j)) is clipped to
    [0, weight_clip] and carries no gradient.
    Returns (loss, logits, aux) where aux holds the importance weights.
    """
    rng = np.random.default_rng() if rng is None else rng
    target = critic if target is None else target
    B = len(states)
    if B < 2:
        raise ValueError("td_critic_loss needs B >= 2")
    phi_sa, t_sa = critic.phi.forward(states, actions)
    psi_g, t_g = critic.psi.forward(goals)
    psi_n, t_n = critic.psi.forward(next_states)
    L = critic_logits(phi_sa, psi_g)
    pos_next = np.sum(phi_sa.astype(np.float64) * psi_n, axis=1)
    _check_finite(L, "logits")
    _check_finite(pos_next, "logits")

    w = importance_weights(target, policy, next_states, goals, weight_clip, rng)
    n_off = B * (B - 1)
    sp = softplus(L)
    # softplus(-x) = softplus(x) - x and sigmoid(-x) = 1 - sigmoid(x): one pass over B^2 entries
    loss = ((1 - gamma) * softplus(-pos_next)).mean()
    term = sp + gamma * w * (sp - L)
    loss += (term.sum() - np.trace(term)) / n_off

    if backward:
        sg = sigmoid(L)
        dL = (sg - gamma * w * (1.0 - sg)) / n_off
        np.fill_diagonal(dL, 0.0)
        dpos = -(1 - gamma) * sigmoid(-pos_next) / B
        d_phi = dL @ psi_g.astype(np.float64) + dpos[:, None] * psi_n
        d_psi_g = dL.T @ phi_sa.astype(np.float64)
        d_psi_n = dpos[:, None] * phi_sa
        critic.phi.backward(t_sa, d_phi)
        critic.psi.backward(t_g, d_psi_g)
        critic.psi.backward(t_n, d_psi_n)
    return float(loss), L, {"weights": w, "pos_next": pos_next}


def _unique_rows(x):
    flat = np.asarray(x).reshape(len(x), -1)
    uniq, first, inverse = np.unique(flat, axis=0, return_index=True, return_inverse=True)
    return np.asarray(x)[first], inverse.reshape(-1)


def importance_weights(critic: CriticPair, policy: PolicyNet, next_states, goals, clip, rng):
    """w[i, j] = min(exp(f(s'_i, a'_ij, g_j)), clip) with a'_ij ~ pi(. | s'_i, g_j).

    Network passes run on the distinct next-states and goals only, which is
    exact and makes tabular batches cheap.
    """
    B = len(next_states)
    us, inv_s = _unique_rows(next_states)
    ug, inv_g = _unique_rows(goals)
    ns, ng = len(us), len(ug)
    psi_g = critic.psi(ug).astype(np.float64)
    pair_s = np.repeat(us, ng, axis=0)
    pair_g = np.tile(ug, (ns,) + (1,) * (ug.ndim - 1))
    if policy.kind == "categorical":
        A = policy.action_dim
        probs = policy.probs(pair_s, pair_g).reshape(ns * ng, A)
        a_idx = sample_categorical_grouped(probs, inv_s[:, None] * ng + inv_g[None, :], rng)
        F = all_action_logits_cross(critic, us, psi_g, A)  # [A, ns, ng]
        f = F[a_idx, inv_s[:, None], inv_g[None, :]]
    else:
        mean = policy.output(pair_s, pair_g).astype(np.float64).reshape(ns, ng, -1)
        a = mean[inv_s][:, inv_g] + policy.std * rng.normal(size=(B, B, mean.shape[-1]))
        rep_s = np.repeat(next_states, B, axis=0)
        phi_sa = critic.phi(rep_s, a.reshape(B * B, -1)).astype(np.float64).reshape(B, B, -1)
        f = np.einsum("ijd,jd->ij", phi_sa, psi_g[inv_g])
    _check_finite(f, "importance weights")
    return np.exp(np.minimum(f, np.log(clip)))


def all_action_logits_cross(critic: CriticPair, states, psi_goals, n_actions) -> np.ndarray:
    """f(s_i, a, g_j) for every discrete action, shape [A, len(states), len(goals)]."""
    n = len(states)
    rep = np.tile(states, (n_actions,) + (1,) * (np.ndim(states) - 1))
    phi = critic.phi(rep, one_hot(np.repeat(np.arange(n_actions), n), n_actions)).reshape(n_actions, n, -1)
    return np.einsum("aid,jd->aij", phi.astype(np.float64), psi_goals)


def all_action_logits(critic: CriticPair, states, psi_g, n_actions) -> np.ndarray:
    """f(s_i, a, g_i) for every discrete action a, shape [A, B]."""
    B = len(states)
    rep = np.tile(states, (n_actions,) + (1,) * (np.ndim(states) - 1))
    phi = critic.phi(rep, one_hot(np.repeat(np.arange(n_actions), B), n_actions)).reshape(n_actions, B, -1)
    return np.einsum("aid,id->ai", phi.astype(np.float64), np.asarray(psi_g, dtype=np.float64))


def hard_negative_gradient(phi_out, psi_neg_out) -> np.ndarray:
    """d/d psi of log(1 - sigma(phi . psi)), i.e. -sigma(phi . psi) * phi."""
    phi = np.asarray(phi_out, dtype=np.float64)
    psi = np.asarray(psi_neg_out, dtype=np.float64)
    if phi.shape != psi.shape:
        raise ValueError("phi and psi must have equal dimension")
    return -sigmoid(phi @ psi) * phi


def binary_accuracy_from_logits(logits) -> float:
    """Pair classified positive iff sigma(f) > 0.5, i.e. f > 0."""
    L = np.asarray(logits)
    B = L.shape[0]
    # correct = true negatives off the diagonal + true positives on it
    diag = np.diag(L) > 0
    wrong_off = np.count_nonzero(L > 0) - np.count_nonzero(diag)
    return float((B * B - wrong_off - np.count_nonzero(~diag)) / (B * B))


# ---------------------------------------------------------------- actor

def actor_loss(agent: Agent, states, goals, actions_orig, lam, aug_prob=0.0, rng=None, pad=4,
               backward=True):
    """Negated (1 - lam) f(s, a~pi, g) + lam log pi(a_orig | s, g).

    Only the policy receives gradient. ``actions_orig`` are raw stored
    actions (indices for discrete processes). Returns
    (loss, critic_term, bc_loss).
    """
    rng = np.random.default_rng() if rng is None else rng
    policy, critic = agent.policy, agent.critic
    B = len(states)
    pin = policy_input(states, goals)
    out, tape = policy.net.forward(pin)
    out64 = out.astype(np.float64)

    augment = aug_prob > 0 and lam > 0 and np.asarray(states).ndim == 4
    if augment:
        bc_in = np.concatenate([random_crop_batch(states, pad, rng, aug_prob),
                                random_crop_batch(goals, pad, rng, aug_prob)], axis=1)
        bc_out, bc_tape = policy.net.forward(bc_in)
        bc_out = bc_out.astype(np.float64)
    else:
        bc_out, bc_tape = out64, tape

    psi_g = critic.psi(goals).astype(np.float64)
    if policy.kind == "categorical":
        A = policy.action_dim
        a_orig = np.asarray(actions_orig).reshape(-1).astype(np.int64)
        logp = log_softmax(out64)
        pi = np.exp(logp)
        F = all_action_logits(critic, states, psi_g, A).T
        crit = np.sum(pi * F, axis=1)
        d_out = -(1 - lam) / B * pi * (F - crit[:, None])
        bc_logp_all = log_softmax(bc_out)
        bc_raw = bc_logp_all[np.arange(B), a_orig]
        bc = np.maximum(bc_raw, LOGP_FLOOR)
        d_bc = -lam / B * (one_hot(a_orig, A) - np.exp(bc_logp_all)) * (bc_raw > LOGP_FLOOR)[:, None]
    else:
        a_orig = np.asarray(actions_orig, dtype=np.float64).reshape(B, -1)
        noise = rng.normal(size=out64.shape)
        a_tilde = out64 + policy.std * noise
        phi_sa, t_phi = critic.phi.forward(states, a_tilde)
        crit = np.sum(phi_sa.astype(np.float64) * psi_g, axis=1)
        d_out = np.zeros_like(out64)
        if lam < 1:
            _, d_act = critic.phi.backward(t_phi, -(1 - lam) / B * psi_g, param_grads=False)
            d_out = d_act.astype(np.float64)
        diff = a_orig - bc_out
        D = diff.shape[1]
        bc = -0.5 * np.sum(diff**2, axis=1) / policy.std**2 - D * np.log(policy.std * np.sqrt(2 * np.pi))
        d_bc = -lam / B * diff / policy.std**2
    loss = -np.mean((1 - lam) * crit + lam * bc)
    if backward:
        if augment:
            policy.net.backward(tape, d_out)
            policy.net.backward(bc_tape, d_bc)
        else:
            policy.net.backward(tape, d_out + d_bc)
    return float(loss), float(np.mean(crit)), float(-np.mean(bc))


# ---------------------------------------------------------------- training

class BatchStream:
    """Feature batches for training. One worker is deterministic; N workers
    each own an RNG seeded base_seed + worker_id and are consumed round-robin."""

    def __init__(self, process, store, agent, config, rng, workers=1):
        self.process, self.store, self.agent, self.config = process, store, agent, config
        self.valid = valid_transitions(store)
        self.workers = workers
        self.rng = rng
        if workers > 1:
            self.rngs = [np.random.default_rng(config.seed + w) for w in range(workers)]
            self.pool = ThreadPoolExecutor(workers)
            self.pending = [self.pool.submit(self._make, r) for r in self.rngs]
            self.turn = 0

    def _make(self, rng):
        b = assemble_batch(self.store, self.config.batch_size, self.config.gamma, rng, self.valid)
        f = self.process.features
        feats = {"s": f(b.states), "g": f(b.future_goals), "a": self.agent.action_features(b.actions),
                 "a_raw": b.actions, "batch": b}
        if self.config.critic_mode == "td":
            feats["s_next"] = f(b.next_states)
        return feats

    def next(self):
        if self.workers == 1:
            return self._make(self.rng)
        w = self.turn
        out = self.pending[w].result()
        self.pending[w] = self.pool.submit(self._make, self.rngs[w])
        self.turn = (w + 1) % self.workers
        return out

    def close(self):
        if self.workers > 1:
            self.pool.shutdown(cancel_futures=True)


class Trainer:
    def __init__(self, config: TrainConfig, process: GoalProcess, store: TrajectoryStore,
                 agent: Agent | None = None, workers: int = 1):
        self.config, self.process, self.store = config, process, store
        if store.num_transitions == 0:
            raise ValueError("training store is empty")
        ss = np.random.SeedSequence(config.seed)
        init_seq, batch_seq, actor_seq, td_seq = ss.spawn(4)
        self.agent = agent or build_agent(process, config, np.random.default_rng(init_seq))
        self.rng_batch = np.random.default_rng(batch_seq)
        self.rng_actor = np.random.default_rng(actor_seq)
        self.rng_td = np.random.default_rng(td_seq)
        self.optims = {k: Adam(n.n_params, config.lr) for k, n in self.agent.nets().items()}
        self.target = self.agent.critic.copy() if config.target_period > 0 else None
        self.step_count = 0
        self.stream = BatchStream(process, store, self.agent, config, self.rng_batch, workers)

    def _critic_inputs(self, feats):
        s, g = feats["s"], feats["g"]
        c = self.config
        if c.augment_critic and c.aug_prob > 0 and s.ndim == 4:
            s = random_crop_batch(s, c.aug_pad, self.rng_actor, c.aug_prob)
            g = random_crop_batch(g, c.aug_pad, self.rng_actor, c.aug_prob)
        return s, g

    def step(self) -> LossReport:
        c, agent = self.config, self.agent
        critic = agent.critic
        feats = self.stream.next()
        s, g = self._critic_inputs(feats)
        critic.phi.zero_grad()
        critic.psi.zero_grad()
        if c.critic_mode == "mc":
            closs, L = mc_critic_step(critic, s, feats["a"], g)
        else:
            if self.target is not None and self.step_count % c.target_period == 0:
                self.target = critic.copy()
            closs, L, _ = td_critic_loss(critic, agent.policy, s, feats["a"], feats["s_next"], g, c.gamma,
                                         c.td_weight_clip, self.rng_td, self.target)
        if not np.isfinite(closs):
            raise TrainingDivergence("non-finite critic loss", self.step_count)
        self.optims["phi"].step(critic.phi.params, critic.phi.grads)
        self.optims["psi"].step(critic.psi.params, critic.psi.grads)

        if c.update_actor:
            agent.policy.net.zero_grad()
            aloss, crit, bc = actor_loss(agent, feats["s"], feats["g"], feats["a_raw"], c.lam, c.aug_prob,
                                         self.rng_actor, c.aug_pad)
            if not np.isfinite(aloss):
                raise TrainingDivergence("non-finite actor loss", self.step_count)
            self.optims["policy"].step(agent.policy.net.params, agent.policy.net.grads)
        else:
            aloss, crit, bc = actor_loss(agent, feats["s"], feats["g"], feats["a_raw"], c.lam, 0.0,
                                         self.rng_actor, c.aug_pad, backward=False)
        self.step_count += 1
        B, diag = len(L), np.trace(L)
        return LossReport(closs, aloss, bc, crit, binary_accuracy_from_logits(L),
                          float(diag / B), float((L.sum() - diag) / (B * (B - 1))))

    # -- persistence

    def state(self) -> dict:
        return {
            "step": self.step_count,
            "config": dataclasses.asdict(self.config),
            "env": self.process.name,
            "env_config": self.process.config(),
            "rng": {k: getattr(self, k).bit_generator.state for k in ("rng_batch", "rng_actor", "rng_td")},
        }

    def save(self, path):
        nets = dict(self.agent.nets())
        if self.target is not None:
            nets.update(phi_target=self.target.phi, psi_target=self.target.psi)
        save_checkpoint(path, nets, self.optims, self.state())

    def restore(self, path):
        expected = {k: n.descriptor() for k, n in self.agent.nets().items()}
        nets, optims, state = load_checkpoint(path, expected)
        for k, net in self.agent.nets().items():
            net.params[...] = nets[k].params
        for k, opt in optims.items():
            self.optims[k].m[...] = opt.m
            self.optims[k].v[...] = opt.v
            self.optims[k].t = opt.t
        if self.target is not None and "phi_target" in nets:
            self.target.phi.params[...] = nets["phi_target"].params
            self.target.psi.params[...] = nets["psi_target"].params
        for k, st in state["rng"].items():
            getattr(self, k).bit_generator.state = st
        self.step_count = int(state["step"])
        return state

    def close(self):
        self.stream.close()


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def train(config: TrainConfig, process: GoalProcess, store: TrajectoryStore, out_dir=None,
          resume=None, on_step=None, workers: int = 1, wall_clock: bool = False):
    """Run ``config.total_steps`` critic+actor updates.

    With ``out_dir``: writes metrics.csv (one row per step), ckpt_epochN at
    every epoch boundary and ckpt_final at the end. ``resume`` continues
    from a checkpoint; existing metrics rows past the checkpoint step are
    dropped. Returns (agent, reports).
    """
    trainer = Trainer(config, process, store, workers=workers)
    if resume is not None:
        trainer.restore(resume)
    record_time = wall_clock or workers > 1
    reports = []
    writer = fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        mpath = os.path.join(out_dir, "metrics.csv")
        kept = []
        if resume is not None and os.path.exists(mpath):
            with open(mpath, newline="") as old:
                rows = list(csv.reader(old))[1:]
            kept = [r for r in rows if r and int(r[0]) <= trainer.step_count]
        fh = open(mpath, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        writer.writerows(kept)
    try:
        while trainer.step_count < config.total_steps:
            t0 = time.perf_counter()
            try:
                rep = trainer.step()
            except TrainingDivergence as e:
                if e.step is not None:
                    raise
                raise TrainingDivergence(str(e), trainer.step_count) from e
            step = trainer.step_count
            reports.append(rep)
            if on_step is not None:
                on_step(step, rep)
            if writer is not None:
                wall = (time.perf_counter() - t0) * 1000 if record_time else 0
                writer.writerow([step, _fmt(rep.critic_loss), _fmt(rep.actor_loss), _fmt(rep.bc_loss),
                                 _fmt(rep.binary_accuracy), _fmt(rep.pos_logit_mean), _fmt(rep.neg_logit_mean),
                                 _fmt(float(wall)) if record_time else "0"])
                if step % config.steps_per_epoch == 0:
                    fh.flush()
                    trainer.save(os.path.join(out_dir, f"ckpt_epoch{step // config.steps_per_epoch}"))
        if out_dir is not None:
            trainer.save(os.path.join(out_dir, "ckpt_final"))
    finally:
        trainer.close()
        if fh is not None:
            fh.close()
    return trainer.agent, reports


def agent_from_checkpoint(path, process: GoalProcess, config: TrainConfig | None = None) -> tuple[Agent, dict]:
    """Rebuild an agent from a checkpoint; the architecture must match ``config``
    (or the config stored in the checkpoint)."""
    _, _, state = load_checkpoint(path)
    if config is None:
        config = TrainConfig(**state["config"])
    agent = build_agent(process, config)
    expected = {k: n.descriptor() for k, n in agent.nets().items()}
    nets, _, state = load_checkpoint(path, expected)
    for k, net in agent.nets().items():
        net.params[...] = nets[k].params
    return agent, state
