"""Native episodic environments with discrete actions.

Environmental reward exists only for evaluation; the learner never sees it.
All dynamics are deterministic functions of (seed, action sequence).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

ENV_IDS = ("gridworld", "cartpole", "mountaincar")

# gridworld geometry
GRID_SIZE = 8  # outer grid; playable interior is (GRID_SIZE-2)^2
# view covers the full room laterally, so the goal is out of view only when
# it lies behind the agent
VIEW_SIZE = 11
GRID_ACTIONS = ("turn_left", "turn_right", "forward")
CELL_CHANNELS = ("empty", "wall", "goal", "out_of_view")
# direction index -> (dx, dy), y grows downward
DIR_VECS = ((0, -1), (1, 0), (0, 1), (-1, 0))
DIR_NAMES = ("north", "east", "south", "west")

# cartpole constants
CP_GRAVITY = 9.8
CP_MASS_CART = 1.0
CP_MASS_POLE = 0.1
CP_TOTAL_MASS = CP_MASS_CART + CP_MASS_POLE
CP_HALF_LENGTH = 0.5
CP_POLEMASS_LENGTH = CP_MASS_POLE * CP_HALF_LENGTH
CP_FORCE_MAG = 10.0
CP_DT = 0.02
CP_X_LIMIT = 2.4
CP_THETA_LIMIT = 12.0 * math.pi / 180.0
CP_MAX_STEPS = 500
CP_ACTIONS = ("push_left", "push_right")

# mountaincar constants
MC_MIN_POSITION = -1.2
MC_MAX_POSITION = 0.6
MC_MAX_SPEED = 0.07
MC_GOAL_POSITION = 0.5
MC_FORCE = 0.001
MC_GRAVITY = 0.0025
MC_MAX_STEPS = 200
MC_ACTIONS = ("left", "coast", "right")


class EpisodeDone(RuntimeError):
    """step() called on a finished episode."""


class UnknownAction(ValueError):
    pass


class DegenerateNorms(ValueError):
    pass


@dataclass(frozen=True)
class GridState:
    width: int
    height: int
    walls: frozenset  # set of (x, y)
    goal_pos: tuple
    agent_pos: tuple
    agent_dir: int
    steps_taken: int

    @property
    def max_steps(self) -> int:
        return 4 * self.width * self.height

    def cell(self, x: int, y: int) -> str:
        if (x, y) in self.walls:
            return "wall"
        if (x, y) == self.goal_pos:
            return "goal"
        return "empty"

    def cells(self) -> list:
        return [[self.cell(x, y) for x in range(self.width)] for y in range(self.height)]


@dataclass(frozen=True)
class CartPoleState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float
    steps_taken: int


@dataclass(frozen=True)
class MountainCarState:
    position: float
    velocity: float
    steps_taken: int


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


def border_walls(width: int, height: int) -> frozenset:
    walls = set()
    for x in range(width):
        walls.add((x, 0))
        walls.add((x, height - 1))
    for y in range(height):
        walls.add((0, y))
        walls.add((width - 1, y))
    return frozenset(walls)


def reset_gridworld(seed: int, width: int = GRID_SIZE, height: int = GRID_SIZE) -> GridState:
    rng = np.random.default_rng(seed)
    gx = int(rng.integers(1, width - 1))
    gy = int(rng.integers(1, height - 1))
    while True:
        ax = int(rng.integers(1, width - 1))
        ay = int(rng.integers(1, height - 1))
        if (ax, ay) != (gx, gy):
            break
    return GridState(
        width=width,
        height=height,
        walls=border_walls(width, height),
        goal_pos=(gx, gy),
        agent_pos=(ax, ay),
        agent_dir=int(rng.integers(0, 4)),
        steps_taken=0,
    )


def gridworld_step(state: GridState, action: int) -> StepResult:
    if action not in (0, 1, 2):
        raise UnknownAction(f"gridworld action {action}")
    pos, direction = state.agent_pos, state.agent_dir
    if action == 0:
        direction = (direction - 1) % 4
    elif action == 1:
        direction = (direction + 1) % 4
    else:
        dx, dy = DIR_VECS[direction]
        target = (pos[0] + dx, pos[1] + dy)
        if target not in state.walls:
            pos = target
    new = replace(state, agent_pos=pos, agent_dir=direction, steps_taken=state.steps_taken + 1)
    if new.agent_pos == new.goal_pos:
        reward = 1.0 - 0.9 * new.steps_taken / new.max_steps
        done = True
    elif new.steps_taken >= new.max_steps:
        reward, done = 0.0, True
    else:
        reward, done = 0.0, False
    return StepResult(encode_observation(new), reward, done, {"state": new})


def reset_cartpole(seed: int) -> CartPoleState:
    rng = np.random.default_rng(seed)
    x, x_dot, theta, theta_dot = rng.uniform(-0.05, 0.05, size=4)
    return CartPoleState(float(x), float(x_dot), float(theta), float(theta_dot), 0)


def cartpole_step(state: CartPoleState, action: int) -> StepResult:
    if action not in (0, 1):
        raise UnknownAction(f"cartpole action {action}")
    force = CP_FORCE_MAG if action == 1 else -CP_FORCE_MAG
    cos_t = math.cos(state.theta)
    sin_t = math.sin(state.theta)
    # accelerations from the pre-step state, then one simultaneous Euler update
    temp = (force + CP_POLEMASS_LENGTH * state.theta_dot**2 * sin_t) / CP_TOTAL_MASS
    theta_acc = (CP_GRAVITY * sin_t - cos_t * temp) / (
        CP_HALF_LENGTH * (4.0 / 3.0 - CP_MASS_POLE * cos_t**2 / CP_TOTAL_MASS)
    )
    x_acc = temp - CP_POLEMASS_LENGTH * theta_acc * cos_t / CP_TOTAL_MASS
    new = CartPoleState(
        x=state.x + CP_DT * state.x_dot,
        x_dot=state.x_dot + CP_DT * x_acc,
        theta=state.theta + CP_DT * state.theta_dot,
        theta_dot=state.theta_dot + CP_DT * theta_acc,
        steps_taken=state.steps_taken + 1,
    )
    done = (
        abs(new.x) > CP_X_LIMIT
        or abs(new.theta) > CP_THETA_LIMIT
        or new.steps_taken >= CP_MAX_STEPS
    )
    return StepResult(encode_observation(new), 1.0, done, {"state": new})


def reset_mountaincar(seed: int) -> MountainCarState:
    rng = np.random.default_rng(seed)
    return MountainCarState(float(rng.uniform(-0.6, -0.4)), 0.0, 0)


def mountaincar_step(state: MountainCarState, action: int) -> StepResult:
    if action not in (0, 1, 2):
        raise UnknownAction(f"mountaincar action {action}")
    velocity = state.velocity + (action - 1) * MC_FORCE - MC_GRAVITY * math.cos(3 * state.position)
    velocity = min(max(velocity, -MC_MAX_SPEED), MC_MAX_SPEED)
    position = min(max(state.position + velocity, MC_MIN_POSITION), MC_MAX_POSITION)
    if position <= MC_MIN_POSITION and velocity < 0.0:
        velocity = 0.0  # inelastic left wall, as in the standard formulation
    new = MountainCarState(position, velocity, state.steps_taken + 1)
    done = position >= MC_GOAL_POSITION or new.steps_taken >= MC_MAX_STEPS
    return StepResult(encode_observation(new), -1.0, done, {"state": new})


def in_view(state: GridState, cell: tuple) -> bool:
    """Whether a world cell falls inside the agent's forward view window."""
    fwd = DIR_VECS[state.agent_dir]
    right = DIR_VECS[(state.agent_dir + 1) % 4]
    dx = cell[0] - state.agent_pos[0]
    dy = cell[1] - state.agent_pos[1]
    ahead = dx * fwd[0] + dy * fwd[1]
    lateral = dx * right[0] + dy * right[1]
    return 0 <= ahead < VIEW_SIZE and abs(lateral) <= VIEW_SIZE // 2


def encode_observation(state) -> np.ndarray:
    """Fixed-length observation vector for a hidden env state.

    Gridworld: egocentric VIEW_SIZE x VIEW_SIZE window ahead of the agent,
    rotated into the agent frame, one-hot over CELL_CHANNELS, flattened.
    Physics states pass through as raw value vectors.
    """
    if isinstance(state, CartPoleState):
        return np.array([state.x, state.x_dot, state.theta, state.theta_dot])
    if isinstance(state, MountainCarState):
        return np.array([state.position, state.velocity])
    if not isinstance(state, GridState):
        raise TypeError(f"cannot encode {type(state).__name__}")
    v = VIEW_SIZE
    fwd = DIR_VECS[state.agent_dir]
    right = DIR_VECS[(state.agent_dir + 1) % 4]
    ax, ay = state.agent_pos
    out = np.zeros((v, v, len(CELL_CHANNELS)))
    for r in range(v):
        ahead = v - 1 - r
        for c in range(v):
            lateral = c - v // 2
            x = ax + ahead * fwd[0] + lateral * right[0]
            y = ay + ahead * fwd[1] + lateral * right[1]
            if 0 <= x < state.width and 0 <= y < state.height:
                channel = CELL_CHANNELS.index(state.cell(x, y))
            else:
                channel = CELL_CHANNELS.index("out_of_view")
            out[r, c, channel] = 1.0
    return out.reshape(-1)


class Environment:
    """Stateful wrapper over the pure step functions; one instance per run."""

    def __init__(self, env_id: str):
        if env_id not in ENV_IDS:
            raise ValueError(f"unknown env {env_id!r}")
        self.env_id = env_id
        self._reset_fn, self._step_fn = {
            "gridworld": (reset_gridworld, gridworld_step),
            "cartpole": (reset_cartpole, cartpole_step),
            "mountaincar": (reset_mountaincar, mountaincar_step),
        }[env_id]
        self.action_names = {
            "gridworld": GRID_ACTIONS,
            "cartpole": CP_ACTIONS,
            "mountaincar": MC_ACTIONS,
        }[env_id]
        self.n_actions = len(self.action_names)
        self.max_steps = {
            "gridworld": 4 * GRID_SIZE * GRID_SIZE,
            "cartpole": CP_MAX_STEPS,
            "mountaincar": MC_MAX_STEPS,
        }[env_id]
        self._state = None
        self._done = True

    @property
    def obs_dim(self) -> int:
        return {
            "gridworld": VIEW_SIZE * VIEW_SIZE * len(CELL_CHANNELS),
            "cartpole": 4,
            "mountaincar": 2,
        }[self.env_id]

    @property
    def hidden_state(self):
        if self._state is None:
            raise EpisodeDone("environment not reset")
        return self._state

    @property
    def done(self) -> bool:
        return self._done

    def reset(self, seed: int) -> np.ndarray:
        self._state = self._reset_fn(seed)
        self._done = False
        return encode_observation(self._state)

    def step(self, action: int) -> StepResult:
        if self._done or self._state is None:
            raise EpisodeDone("episode finished; reset before stepping")
        result = self._step_fn(self._state, action)
        self._state = result.info["state"]
        self._done = result.done
        return result


def make_env(env_id: str) -> Environment:
    return Environment(env_id)


@dataclass(frozen=True)
class ScoreNorms:
    r_random: float
    r_expert: float

    def __post_init__(self):
        if not self.r_expert > self.r_random:
            raise DegenerateNorms(
                f"expert return {self.r_expert} must exceed random return {self.r_random}"
            )


def normalized_score(raw_return: float, norms: ScoreNorms) -> float:
    """Affine rescale: random -> 0, expert -> 1. Deliberately unclamped."""
    return (raw_return - norms.r_random) / (norms.r_expert - norms.r_random)


Policy = Callable[[np.ndarray, object, np.random.Generator], int]


def run_episode(env: Environment, policy: Policy, seed: int, policy_seed: int | None = None) -> float:
    """Roll one episode and return the total raw reward."""
    rng = np.random.default_rng(seed if policy_seed is None else policy_seed)
    obs = env.reset(seed)
    total = 0.0
    while True:
        action = policy(obs, env.hidden_state, rng)
        result = env.step(action)
        total += result.reward
        obs = result.observation
        if result.done:
            return total


def random_policy(env: Environment) -> Policy:
    n = env.n_actions
    return lambda obs, hidden, rng: int(rng.integers(n))


def calibrate_norms(
    env_id: str,
    expert_policy: Policy,
    eval_seeds,
    n_random_episodes: int = 1000,
    seed: int = 0,
) -> ScoreNorms:
    """Empirical normalization constants: random-policy mean and expert mean.

    The expert is averaged over the fixed eval seeds so that a perfect eval
    run scores exactly 1; the random baseline uses its own seeded episodes.
    """
    env = make_env(env_id)
    rand = random_policy(env)
    master = np.random.default_rng(seed)
    episode_seeds = master.integers(0, 2**31 - 1, size=n_random_episodes)
    r_random = float(
        np.mean([run_episode(env, rand, int(s)) for s in episode_seeds])
    )
    r_expert = float(np.mean([run_episode(env, expert_policy, int(s)) for s in eval_seeds]))
    return ScoreNorms(r_random=r_random, r_expert=r_expert)
