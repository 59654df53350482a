"""Offline trajectory stores, positive-pair sampling and augmentation."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .env import CONTINUOUS, DISCRETE, IMAGE, TABULAR, VECTOR, GoalProcess, GridWorld, PointMass

MAGIC = b"SCRL"
VERSION = 1
OBS_TAGS = {TABULAR: 0, VECTOR: 1, IMAGE: 2}
ACTION_TAGS = {DISCRETE: 0, CONTINUOUS: 1}


class CorruptFile(Exception):
    pass


class DegenerateTrajectory(Exception):
    pass


@dataclass(eq=False)
class TrajectoryStore:
    """Trajectories packed end to end.

    ``observations`` holds L+1 states per trajectory (the last one is only
    ever a next-observation); ``actions`` holds L actions per trajectory.
    """

    observations: np.ndarray
    actions: np.ndarray
    lengths: np.ndarray  # transitions per trajectory
    obs_kind: str = VECTOR
    action_kind: str = CONTINUOUS
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        self.obs_offsets = np.concatenate([[0], np.cumsum(self.lengths + 1)]).astype(np.int64)
        self.act_offsets = np.concatenate([[0], np.cumsum(self.lengths)]).astype(np.int64)
        # transition id -> (trajectory, step)
        self.traj_of = np.repeat(np.arange(len(self.lengths)), self.lengths)
        self.step_of = np.arange(self.num_transitions) - self.act_offsets[self.traj_of]

    @property
    def num_trajectories(self) -> int:
        return len(self.lengths)

    @property
    def num_transitions(self) -> int:
        return int(self.lengths.sum())

    def _obs_row(self, ids):
        ids = np.asarray(ids)
        return self.obs_offsets[self.traj_of[ids]] + self.step_of[ids]

    def observation(self, ids):
        return self.observations[self._obs_row(ids)]

    def next_observation(self, ids):
        return self.observations[self._obs_row(ids) + 1]

    def action(self, ids):
        return self.actions[np.asarray(ids)]

    def trajectory(self, i: int):
        """(observations[L+1], actions[L]) of trajectory i."""
        o0, o1 = self.obs_offsets[i], self.obs_offsets[i + 1]
        a0, a1 = self.act_offsets[i], self.act_offsets[i + 1]
        return self.observations[o0:o1], self.actions[a0:a1]

    def remaining(self, ids):
        """Number of later transition observations in the same trajectory."""
        ids = np.asarray(ids)
        return self.lengths[self.traj_of[ids]] - 1 - self.step_of[ids]

    def split(self, holdout_fraction: float, seed=0):
        """Partition by whole trajectories into (train, held_out)."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(self.num_trajectories)
        n_hold = int(round(holdout_fraction * self.num_trajectories))
        return self.subset(np.sort(order[n_hold:])), self.subset(np.sort(order[:n_hold]))

    def subset(self, traj_ids):
        obs = [self.trajectory(i)[0] for i in traj_ids]
        acts = [self.trajectory(i)[1] for i in traj_ids]
        return TrajectoryStore(
            _concat(obs, self.observations), _concat(acts, self.actions),
            self.lengths[np.asarray(traj_ids, dtype=np.int64)], self.obs_kind, self.action_kind,
            dict(self.metadata),
        )

    def __eq__(self, other):
        if not isinstance(other, TrajectoryStore):
            return NotImplemented
        return (
            self.obs_kind == other.obs_kind and self.action_kind == other.action_kind
            and self.metadata == other.metadata and np.array_equal(self.lengths, other.lengths)
            and self.observations.dtype == other.observations.dtype
            and self.observations.shape == other.observations.shape
            and np.array_equal(self.observations, other.observations)
            and self.actions.shape == other.actions.shape
            and np.array_equal(self.actions, other.actions)
        )


def _concat(parts, like):
    if parts:
        return np.concatenate(parts)
    return np.zeros((0,) + like.shape[1:], dtype=like.dtype)


# ---------------------------------------------------------------- generation

def parse_behavior(behavior: str) -> float:
    """Map a behavior name to its uniform-action probability."""
    if behavior in ("uniform", "uniform-random"):
        return 1.0
    if behavior in ("scripted", "scripted-goal-reacher"):
        return 0.1
    for prefix in ("mix:", "epsilon-mix:"):
        if behavior.startswith(prefix):
            eps = float(behavior[len(prefix):])
            if not 0.0 <= eps <= 1.0:
                raise ValueError(f"mixture epsilon must be in [0, 1], got {eps}")
            return eps
    raise ValueError(f"unknown behavior {behavior!r}")


def _scripted_action(process, state, goal, rng):
    if isinstance(process, GridWorld):
        acts = process.greedy_actions(state, goal)
        return acts[int(rng.integers(len(acts)))]
    if isinstance(process, PointMass):
        return np.clip((np.asarray(goal) - np.asarray(state)) / process.max_step, -1.0, 1.0)
    raise ValueError(f"no scripted controller for {process.name}")


def _random_action(process, rng):
    if process.action_kind == DISCRETE:
        return int(rng.integers(process.action_dim))
    return rng.uniform(-1.0, 1.0, process.action_dim)


def generate_offline(process: GoalProcess, behavior: str, num_transitions: int, seed=0) -> TrajectoryStore:
    """Roll out a behavior policy until ``num_transitions`` are collected.

    The scripted reacher chases a per-episode goal and redraws the goal when
    it arrives. Each step draws the same random numbers whatever the
    behavior, so ``mix:1`` and ``uniform`` produce identical stores.
    """
    eps = parse_behavior(behavior)
    if num_transitions < process.horizon:
        raise ValueError(f"num_transitions ({num_transitions}) must be >= horizon ({process.horizon})")
    rng = np.random.default_rng(seed)
    criterion = process.default_criterion()
    obs, acts, lengths = [], [], []
    total = 0
    while total < num_transitions:
        length = min(process.horizon, num_transitions - total)
        ep = process.episode(rng)
        goal = process.sample_goal(rng)
        states = [ep.state]
        for _ in range(length):
            if criterion.is_success(ep.state, goal):
                goal = process.sample_goal(rng)
            u = rng.random()
            rand_a = _random_action(process, rng)
            a = rand_a if u < eps else _scripted_action(process, ep.state, goal, rng)
            acts.append(a)
            states.append(ep.step(a))
        obs.extend(states)
        lengths.append(length)
        total += length
    observations = np.asarray(obs, dtype=np.float32).reshape(len(obs), -1)
    actions = np.asarray(acts, dtype=np.float32).reshape(len(acts), -1)
    meta = {"env": process.name, "env_config": process.config(), "seed": int(seed), "behavior": behavior}
    return TrajectoryStore(observations, actions, np.asarray(lengths), _stored_obs_kind(process),
                           process.action_kind, meta)


def _stored_obs_kind(process):
    # pixel processes store state vectors and render on demand
    return TABULAR if process.obs_kind == TABULAR else VECTOR


# ---------------------------------------------------------------- sampling

def sample_offsets(rng, gamma: float, remaining) -> np.ndarray:
    """k ~ Geometric(1 - gamma) on {1, 2, ...} conditioned on k <= remaining.

    Uses the closed-form inverse CDF of the truncated geometric, which has
    exactly the distribution of resampling until k fits.
    """
    m = np.asarray(remaining, dtype=np.int64)
    if np.any(m < 1):
        raise DegenerateTrajectory("no later observation in the trajectory")
    if gamma == 0.0:
        return np.ones(m.shape, dtype=np.int64)
    u = rng.random(m.shape)
    # P(k <= j | k <= m) = (1 - gamma^j) / (1 - gamma^m)
    mass = -np.expm1(m * np.log(gamma))
    k = np.ceil(np.log1p(-u * mass) / np.log(gamma))
    return np.clip(k, 1, m).astype(np.int64)


def sample_future_positive(store: TrajectoryStore, index: int, gamma: float, rng):
    """Observation k steps after transition ``index``, k truncated-geometric."""
    rem = store.remaining(index)
    k = sample_offsets(rng, gamma, rem)
    return store.observations[store._obs_row(index) + k]


@dataclass
class ContrastiveBatch:
    states: np.ndarray
    actions: np.ndarray
    future_goals: np.ndarray
    next_states: np.ndarray
    indices: np.ndarray
    with_replacement: bool = False

    @property
    def size(self) -> int:
        return len(self.states)


def valid_transitions(store: TrajectoryStore) -> np.ndarray:
    return np.nonzero(store.remaining(np.arange(store.num_transitions)) >= 1)[0]


def assemble_batch(store: TrajectoryStore, batch_size: int, gamma: float, rng, valid=None) -> ContrastiveBatch:
    """B distinct transitions, each with a truncated-geometric future positive.

    Falls back to sampling with replacement (``with_replacement`` set) when
    the store has fewer than B transitions with a future observation.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    if valid is None:
        valid = valid_transitions(store)
    if len(valid) == 0:
        raise DegenerateTrajectory("store has no transition with a future observation")
    replace = len(valid) < batch_size
    ids = valid[rng.choice(len(valid), size=batch_size, replace=replace)]
    k = sample_offsets(rng, gamma, store.remaining(ids))
    rows = store._obs_row(ids)
    return ContrastiveBatch(
        states=store.observations[rows],
        actions=store.actions[ids],
        future_goals=store.observations[rows + k],
        next_states=store.observations[rows + 1],
        indices=ids,
        with_replacement=replace,
    )


# ---------------------------------------------------------------- augmentation

def random_crop(image: np.ndarray, pad: int = 4, rng=None, offset=None) -> np.ndarray:
    """Edge-replicate pad an (H, W, C) image and crop a random H x W window."""
    img = np.asarray(image)
    H, W = img.shape[:2]
    if H < 2 * pad or W < 2 * pad:
        raise ValueError(f"image {H}x{W} too small for pad {pad}")
    if offset is None:
        offset = rng.integers(0, 2 * pad + 1, size=2)
    dy, dx = int(offset[0]), int(offset[1])
    widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (img.ndim - 2)
    padded = np.pad(img, widths, mode="edge")
    return padded[dy:dy + H, dx:dx + W]


def random_crop_batch(images: np.ndarray, pad: int, rng, prob: float = 1.0) -> np.ndarray:
    """Crop each [C, H, W] image of a batch with probability ``prob``."""
    out = images.copy()
    N, _, H, W = images.shape
    if H < 2 * pad or W < 2 * pad:
        raise ValueError(f"image {H}x{W} too small for pad {pad}")
    apply = rng.random(N) < prob
    offsets = rng.integers(0, 2 * pad + 1, size=(N, 2))
    if not apply.any():
        return out
    padded = np.pad(images, [(0, 0), (0, 0), (pad, pad), (pad, pad)], mode="edge")
    for i in np.nonzero(apply)[0]:
        dy, dx = offsets[i]
        out[i] = padded[i, :, dy:dy + H, dx:dx + W]
    return out


# ---------------------------------------------------------------- persistence

def _pack_store(store: TrajectoryStore) -> bytes:
    obs_dtype = np.uint8 if store.obs_kind == IMAGE else np.float32
    obs_shape = store.observations.shape[1:]
    act_dim = store.actions.shape[1] if store.actions.ndim > 1 else 1
    meta = json.dumps(store.metadata, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, OBS_TAGS[store.obs_kind]),
             struct.pack("<I", len(obs_shape)), struct.pack(f"<{len(obs_shape)}I", *obs_shape),
             struct.pack("<II", ACTION_TAGS[store.action_kind], act_dim),
             struct.pack("<I", len(meta)), meta,
             struct.pack("<Q", store.num_trajectories)]
    for i in range(store.num_trajectories):
        o, a = store.trajectory(i)
        parts.append(struct.pack("<I", len(a)))
        parts.append(np.ascontiguousarray(o, dtype=np.dtype(obs_dtype).newbyteorder("<")).tobytes())
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_store(store: TrajectoryStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_pack_store(store))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptFile("unexpected end of file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_store(path) -> TrajectoryStore:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CorruptFile(f"{path}: bad magic")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    r = _Reader(body)
    r.take(4)
    version, obs_tag = r.unpack("<II")
    if version != VERSION:
        raise CorruptFile(f"{path}: unsupported version {version}")
    obs_kind = {v: k for k, v in OBS_TAGS.items()}.get(obs_tag)
    if obs_kind is None:
        raise CorruptFile(f"{path}: unknown observation tag {obs_tag}")
    (ndim,) = r.unpack("<I")
    obs_shape = r.unpack(f"<{ndim}I")
    act_tag, act_dim = r.unpack("<II")
    action_kind = {v: k for k, v in ACTION_TAGS.items()}.get(act_tag)
    if action_kind is None:
        raise CorruptFile(f"{path}: unknown action tag {act_tag}")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<Q")
    obs_dtype = np.dtype("u1") if obs_kind == IMAGE else np.dtype("<f4")
    per_obs = int(np.prod(obs_shape)) * obs_dtype.itemsize
    obs, acts, lengths = [], [], []
    for _ in range(count):
        (L,) = r.unpack("<I")
        obs.append(np.frombuffer(r.take((L + 1) * per_obs), dtype=obs_dtype).reshape((L + 1,) + tuple(obs_shape)))
        acts.append(np.frombuffer(r.take(L * act_dim * 4), dtype="<f4").reshape(L, act_dim))
        lengths.append(L)
    if r.pos != len(body):
        raise CorruptFile(f"{path}: trailing bytes")
    empty_obs = np.zeros((0,) + tuple(obs_shape), dtype=obs_dtype)
    observations = np.concatenate(obs) if obs else empty_obs
    actions = np.concatenate(acts) if acts else np.zeros((0, act_dim), dtype="<f4")
    native = np.uint8 if obs_kind == IMAGE else np.float32
    return TrajectoryStore(observations.astype(native), actions.astype(np.float32),
                           np.asarray(lengths, dtype=np.int64), obs_kind, action_kind, meta)
