"""Small goal-conditioned controlled Markov processes.

Processes are immutable descriptions. Simulation state lives in an
:class:`Episode` owned by the caller, so one process can be shared freely.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

TABULAR = "tabular-index"
VECTOR = "feature-vector"
IMAGE = "image"

DISCRETE = "discrete"
CONTINUOUS = "continuous-box"

# gridworld moves as (dx, dy); y grows downward
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))
ACTION_NAMES = ("up", "down", "left", "right", "stay")


class UnsupportedOperation(Exception):
    pass


@dataclass(frozen=True)
class SuccessCriterion:
    kind: str = "exact"  # "exact" | "l2"
    radius: float = 0.05

    def is_success(self, state, goal) -> bool:
        if self.kind == "exact":
            return int(np.asarray(state).reshape(-1)[0]) == int(np.asarray(goal).reshape(-1)[0])
        if self.kind == "l2":
            d = np.asarray(state, dtype=np.float64) - np.asarray(goal, dtype=np.float64)
            return bool(np.sqrt(np.sum(d * d)) <= self.radius)
        raise ValueError(f"unknown success criterion {self.kind!r}")


class GoalProcess:
    """Common interface. Subclasses set the observation/action kinds."""

    obs_kind: str
    action_kind: str
    horizon: int
    name: str = "process"

    @property
    def state_dim(self) -> int:
        raise NotImplementedError

    @property
    def action_dim(self) -> int:
        """Number of actions (discrete) or box dimension (continuous)."""
        raise NotImplementedError

    def sample_initial(self, rng: np.random.Generator):
        raise NotImplementedError

    def sample_goal(self, rng: np.random.Generator):
        raise NotImplementedError

    def step(self, state, action, rng: np.random.Generator):
        raise NotImplementedError

    def features(self, states: np.ndarray) -> np.ndarray:
        """Network-facing observations for a batch of stored states."""
        raise NotImplementedError

    @property
    def feature_shape(self) -> tuple:
        raise NotImplementedError

    def default_criterion(self) -> SuccessCriterion:
        raise NotImplementedError

    def config(self) -> dict:
        """Keyword arguments that rebuild this process via make_process."""
        raise UnsupportedOperation(f"{self.name} has no config form")

    def episode(self, rng: np.random.Generator, state=None) -> "Episode":
        if state is None:
            state = self.sample_initial(rng)
        return Episode(self, state, rng)


@dataclass
class Episode:
    process: GoalProcess
    state: object
    rng: np.random.Generator
    t: int = 0

    def step(self, action):
        self.state = self.process.step(self.state, action, self.rng)
        self.t += 1
        return self.state

    @property
    def done(self) -> bool:
        return self.t >= self.process.horizon


class TabularProcess(GoalProcess):
    obs_kind = TABULAR
    action_kind = DISCRETE

    def __init__(self, transitions, horizon: int = 50, initial=None, name: str = "tabular"):
        P = np.asarray(transitions, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("transition tensor must have shape [S, A, S]")
        if np.any(P < 0) or not np.allclose(P.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("transition rows must be probability vectors")
        P.setflags(write=False)
        self.P = P
        self.horizon = int(horizon)
        self.name = name
        n = P.shape[0]
        init = np.full(n, 1.0 / n) if initial is None else np.asarray(initial, dtype=np.float64)
        init.setflags(write=False)
        self.initial = init

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def state_dim(self) -> int:
        return 1

    @property
    def action_dim(self) -> int:
        return self.n_actions

    @cached_property
    def _cdf(self):
        c = np.cumsum(self.P, axis=2)
        c[..., -1] = 1.0
        return c

    def sample_initial(self, rng):
        return int(np.searchsorted(np.cumsum(self.initial), rng.random(), side="right").clip(max=self.n_states - 1))

    def sample_goal(self, rng):
        return int(rng.integers(self.n_states))

    def step(self, state, action, rng):
        row = self._cdf[int(state), int(action)]
        return int(min(np.searchsorted(row, rng.random(), side="right"), self.n_states - 1))

    def step_many(self, states, actions, rng):
        rows = self._cdf[states, actions]
        u = rng.random(len(states))[:, None]
        return np.minimum((rows <= u).sum(axis=1), self.n_states - 1)

    def features(self, states):
        idx = np.asarray(states).reshape(-1).astype(np.int64)
        out = np.zeros((idx.size, self.n_states), dtype=np.float32)
        out[np.arange(idx.size), idx] = 1.0
        return out

    @property
    def feature_shape(self):
        return (self.n_states,)

    def default_criterion(self):
        return SuccessCriterion("exact")


class GridWorld(TabularProcess):
    def __init__(self, width: int, height: int, slip_prob: float, horizon: int = 50):
        self.width, self.height, self.slip_prob = width, height, slip_prob
        super().__init__(_grid_transitions(width, height, slip_prob), horizon, name=f"grid{width}x{height}")

    def cell(self, state) -> tuple[int, int]:
        s = int(state)
        return s % self.width, s // self.width

    def index(self, x: int, y: int) -> int:
        return y * self.width + x

    def distance(self, a, b) -> int:
        (ax, ay), (bx, by) = self.cell(a), self.cell(b)
        return abs(ax - bx) + abs(ay - by)

    def config(self) -> dict:
        return {"kind": "grid", "width": self.width, "height": self.height,
                "slip_prob": self.slip_prob, "horizon": self.horizon}

    def greedy_actions(self, state, goal) -> list[int]:
        """Actions that reduce Manhattan distance to goal; [stay] at the goal."""
        (x, y), (gx, gy) = self.cell(state), self.cell(goal)
        acts = []
        if gy < y:
            acts.append(0)
        if gy > y:
            acts.append(1)
        if gx < x:
            acts.append(2)
        if gx > x:
            acts.append(3)
        return acts or [4]


def _grid_transitions(width, height, slip):
    n = width * height
    P = np.zeros((n, 5, n))
    for s in range(n):
        x, y = s % width, s // width
        dest = []
        for dx, dy in MOVES:
            nx = min(max(x + dx, 0), width - 1)
            ny = min(max(y + dy, 0), height - 1)
            dest.append(ny * width + nx)
        for a in range(5):
            P[s, a, dest[a]] += 1.0 - slip
            for b in range(5):
                if b != a:
                    P[s, a, dest[b]] += slip / 4.0
    return P


def make_gridworld(width: int, height: int, slip_prob: float = 0.0, horizon: int = 50) -> GridWorld:
    if width < 1 or height < 1 or width * height < 2:
        raise ValueError(f"gridworld needs at least 2 cells, got {width}x{height}")
    if not 0.0 <= slip_prob < 1.0:
        raise ValueError(f"slip_prob must be in [0, 1), got {slip_prob}")
    return GridWorld(width, height, slip_prob, horizon)


@dataclass(frozen=True)
class PointMass(GoalProcess):
    dim: int = 2
    max_step: float = 0.1
    noise_std: float = 0.0
    horizon: int = 100
    pixels: bool = False
    image_size: int = 48
    channels: int = 1
    disc_radius: float = 3.0
    success_radius: float = 0.05
    action_kind: str = field(default=CONTINUOUS, init=False)

    @property
    def obs_kind(self):
        return IMAGE if self.pixels else VECTOR

    @property
    def name(self):
        return f"{'pixel' if self.pixels else 'point'}{self.dim}d"

    @property
    def state_dim(self):
        return self.dim

    @property
    def action_dim(self):
        return self.dim

    def sample_initial(self, rng):
        return rng.random(self.dim)

    def sample_goal(self, rng):
        return rng.random(self.dim)

    def step(self, state, action, rng):
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        nxt = np.asarray(state, dtype=np.float64) + a * self.max_step
        if self.noise_std > 0:
            nxt = nxt + rng.normal(0.0, self.noise_std, self.dim)
        return np.clip(nxt, 0.0, 1.0)

    def features(self, states):
        s = np.asarray(states, dtype=np.float32).reshape(-1, self.dim)
        if not self.pixels:
            return s
        return render_batch(self, s)

    @property
    def feature_shape(self):
        if self.pixels:
            return (self.channels, self.image_size, self.image_size)
        return (self.dim,)

    def default_criterion(self):
        return SuccessCriterion("l2", self.success_radius)

    def config(self) -> dict:
        return {"kind": "pixel" if self.pixels else "pointmass", "dim": self.dim, "max_step": self.max_step,
                "noise_std": self.noise_std, "horizon": self.horizon, "image_size": self.image_size,
                "channels": self.channels, "success_radius": self.success_radius}


def make_pointmass(dim: int = 2, max_step: float = 0.1, noise_std: float = 0.0, **kw) -> PointMass:
    if dim not in (1, 2):
        raise ValueError(f"point-mass dim must be 1 or 2, got {dim}")
    if max_step <= 0:
        raise ValueError("max_step must be positive")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    return PointMass(dim=dim, max_step=max_step, noise_std=noise_std, **kw)


def _pixel_centers(process: PointMass, states):
    s = np.asarray(states, dtype=np.float64).reshape(-1, process.dim)
    size = process.image_size
    if process.dim == 1:
        return np.full(len(s), 0.5 * size), s[:, 0] * size
    # state (x, y) -> (row, col) = (y, x) scaled to pixels
    return s[:, 1] * size, s[:, 0] * size


def render_batch(process: PointMass, states) -> np.ndarray:
    """Render states as [N, C, H, W] float32 images."""
    rows, cols = _pixel_centers(process, states)
    size = process.image_size
    grid = np.arange(size, dtype=np.float64)
    dr = (grid[None, :] - rows[:, None]) ** 2
    dc = (grid[None, :] - cols[:, None]) ** 2
    disc = (dr[:, :, None] + dc[:, None, :]) <= process.disc_radius**2
    img = disc.astype(np.float32)[:, None]
    if process.channels > 1:
        img = np.repeat(img, process.channels, axis=1)
    return img


def render_pixel(process: GoalProcess, state) -> np.ndarray:
    """Render a single state as an (H, W, C) image with values in {0, 1}."""
    if not isinstance(process, PointMass):
        raise UnsupportedOperation(f"{process.name} cannot be rendered")
    return render_batch(process, state)[0].transpose(1, 2, 0)


def make_process(kind: str, **kw) -> GoalProcess:
    """Build a process from a config name: grid, pointmass or pixel."""
    if kind == "grid":
        return make_gridworld(kw.get("width", 5), kw.get("height", 5), kw.get("slip_prob", 0.0),
                              kw.get("horizon") or 50)
    if kind in ("pointmass", "pixel"):
        return make_pointmass(
            kw.get("dim", 2), kw.get("max_step", 0.1), kw.get("noise_std", 0.0),
            horizon=kw.get("horizon") or 100, pixels=(kind == "pixel"),
            image_size=kw.get("image_size", 48), channels=kw.get("channels", 1),
            success_radius=kw.get("success_radius", 0.05),
        )
    raise ValueError(f"unknown env kind {kind!r}")


def named_process(name: str) -> GoalProcess:
    """Shorthand names used by the CLI: grid<N>, grid<W>x<H>, point1d, point2d, pixel2d."""
    if name.startswith("grid"):
        dims = name[4:].split("x")
        if all(d.isdigit() for d in dims) and len(dims) in (1, 2):
            w = int(dims[0])
            return make_gridworld(w, int(dims[-1]), 0.0)
    presets = {"point1d": ("pointmass", 1), "point2d": ("pointmass", 2), "pixel1d": ("pixel", 1), "pixel2d": ("pixel", 2)}
    if name in presets:
        kind, dim = presets[name]
        return make_process(kind, dim=dim)
    raise ValueError(f"unknown env name {name!r}")
