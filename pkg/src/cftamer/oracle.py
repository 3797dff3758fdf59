"""Synthetic trainer: expert policies, evaluative feedback, counterfactuals.

The oracle never reads the learner's H values; feedback depends only on the
hidden environment state, the taken action, and the oracle's own RNG stream.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .envs import (
    DIR_VECS,
    CartPoleState,
    Environment,
    GridState,
    MountainCarState,
    in_view,
    make_env,
)
from .tamer import VARIANTS, Counterfactual, FeedbackEvent

log = logging.getLogger(__name__)

CARTPOLE_WEIGHTS = (0.1, 0.3, 1.0, 0.3)  # (x, x_dot, theta, theta_dot)


class UnreachableGoal(ValueError):
    pass


class GridworldExpert:
    """Breadth-first shortest-path planner over (position, direction) nodes.

    Plans on the full grid; only the oracle is allowed this omniscience.
    When the goal lies outside the learner's view window the planner's first
    move would depend on hidden information, so the advice there is a fixed
    scanning turn instead: identical views always receive identical advice,
    at a cost of at most a few extra turns.
    """

    def __init__(self):
        self._dist_cache: dict = {}

    def _distances(self, state: GridState) -> dict:
        key = (state.walls, state.goal_pos, state.width, state.height)
        cached = self._dist_cache.get(key)
        if cached is not None:
            return cached
        dist: dict = {}
        queue = deque()
        for d in range(4):
            dist[(state.goal_pos, d)] = 0
            queue.append((state.goal_pos, d))
        while queue:
            (pos, d), = (queue.popleft(),)
            base = dist[(pos, d)]
            preds = [(pos, (d + 1) % 4), (pos, (d - 1) % 4)]
            back = (pos[0] - DIR_VECS[d][0], pos[1] - DIR_VECS[d][1])
            if back not in state.walls:
                preds.append((back, d))
            for node in preds:
                if node not in dist:
                    dist[node] = base + 1
                    queue.append(node)
        self._dist_cache[key] = dist
        return dist

    def action(self, state: GridState) -> int:
        dist = self._distances(state)
        pos, d = state.agent_pos, state.agent_dir
        if (pos, d) not in dist:
            raise UnreachableGoal(f"no path from {pos} to {state.goal_pos}")
        if not in_view(state, state.goal_pos):
            return 0  # canonical scan: turn left until the goal is visible
        # candidate order encodes the tie preference: forward, then turns
        candidates = []
        ahead = (pos[0] + DIR_VECS[d][0], pos[1] + DIR_VECS[d][1])
        if ahead not in state.walls:
            candidates.append((2, dist[(ahead, d)]))
        candidates.append((0, dist[(pos, (d - 1) % 4)]))
        candidates.append((1, dist[(pos, (d + 1) % 4)]))
        best_action, best = candidates[0]
        for action, value in candidates[1:]:
            if value < best:
                best_action, best = action, value
        return best_action


class CartpoleExpert:
    """Linear rule: push right iff w . (x, x_dot, theta, theta_dot) > 0."""

    def action(self, state: CartPoleState) -> int:
        wx, wxd, wt, wtd = CARTPOLE_WEIGHTS
        score = wx * state.x + wxd * state.x_dot + wt * state.theta + wtd * state.theta_dot
        return 1 if score > 0 else 0


class MountaincarExpert:
    """Energy pumping: push along the velocity sign, coast at rest."""

    def action(self, state: MountainCarState) -> int:
        if state.velocity > 0:
            return 2
        if state.velocity < 0:
            return 0
        return 1


def make_expert(env_id: str):
    return {
        "gridworld": GridworldExpert,
        "cartpole": CartpoleExpert,
        "mountaincar": MountaincarExpert,
    }[env_id]()


def expert_action(policy, hidden_state) -> int:
    return policy.action(hidden_state)


def expert_policy_fn(policy):
    """Adapt an expert to the (obs, hidden, rng) -> action rollout protocol."""
    return lambda obs, hidden, rng: policy.action(hidden)


@dataclass
class OracleConfig:
    feedback_frequency: float = 1.0
    feedback_quality: float = 1.0
    variant: str = "vanilla"
    seed: int = 0
    bank_episodes: int = 200

    def __post_init__(self):
        if not 0.0 <= self.feedback_frequency <= 1.0:
            raise ValueError("feedback_frequency must be in [0, 1]")
        if not 0.0 <= self.feedback_quality <= 1.0:
            raise ValueError("feedback_quality must be in [0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class BankEntry:
    obs: np.ndarray
    hidden: object
    action: int


@dataclass
class StateBank:
    """Expert-visited states keyed by the action the expert prefers there."""

    n_actions: int
    buckets: dict = field(default_factory=dict)  # action -> list[BankEntry]

    @property
    def entries(self) -> list:
        return [e for a in range(self.n_actions) for e in self.buckets.get(a, [])]

    def sample_bucket(self, action: int, rng: np.random.Generator) -> BankEntry:
        bucket = self.buckets.get(action, [])
        if not bucket:
            log.warning("empty bank bucket for action %d; sampling whole bank", action)
            bucket = self.entries
        return bucket[int(rng.integers(len(bucket)))]

    def sample_any(self, rng: np.random.Generator) -> BankEntry:
        entries = self.entries
        return entries[int(rng.integers(len(entries)))]

    def sample_excluding(self, action: int, rng: np.random.Generator) -> BankEntry:
        pool = [e for a in range(self.n_actions) if a != action for e in self.buckets.get(a, [])]
        if not pool:
            log.warning("no bank entries outside action %d; sampling whole bank", action)
            pool = self.entries
        return pool[int(rng.integers(len(pool)))]


def _sample_random_state(env_id: str, rng: np.random.Generator):
    if env_id == "gridworld":
        from .envs import GRID_SIZE, border_walls

        gx, gy = int(rng.integers(1, GRID_SIZE - 1)), int(rng.integers(1, GRID_SIZE - 1))
        while True:
            ax, ay = int(rng.integers(1, GRID_SIZE - 1)), int(rng.integers(1, GRID_SIZE - 1))
            if (ax, ay) != (gx, gy):
                break
        return GridState(
            GRID_SIZE, GRID_SIZE, border_walls(GRID_SIZE, GRID_SIZE),
            (gx, gy), (ax, ay), int(rng.integers(0, 4)), 0,
        )
    if env_id == "cartpole":
        return CartPoleState(
            float(rng.uniform(-2.0, 2.0)), float(rng.uniform(-2.0, 2.0)),
            float(rng.uniform(-0.2, 0.2)), float(rng.uniform(-2.0, 2.0)), 0,
        )
    return MountainCarState(
        float(rng.uniform(-1.2, 0.5)), float(rng.uniform(-0.07, 0.07)), 0
    )


def build_state_bank(
    env: Environment, policy, n_episodes: int = 200, seed: int = 0
) -> StateBank:
    """Roll the expert out and index visited states by its preferred action.

    Identical observations are deduplicated per bucket; a bucket still empty
    after the rollouts is filled by rejection-sampling random states.
    """
    from .envs import encode_observation

    bank = StateBank(n_actions=env.n_actions, buckets={a: [] for a in range(env.n_actions)})
    seen: dict = {a: set() for a in range(env.n_actions)}
    master = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    episode_seeds = master.integers(0, 2**31 - 1, size=n_episodes)
    for ep_seed in episode_seeds:
        obs = env.reset(int(ep_seed))
        while True:
            hidden = env.hidden_state
            action = policy.action(hidden)
            key = obs.tobytes()
            if key not in seen[action]:
                seen[action].add(key)
                bank.buckets[action].append(BankEntry(obs, hidden, action))
            result = env.step(action)
            obs = result.observation
            if result.done:
                break
    for action in range(env.n_actions):
        attempts = 0
        while not bank.buckets[action] and attempts < 100_000:
            hidden = _sample_random_state(env.env_id, master)
            attempts += 1
            if policy.action(hidden) == action:
                bank.buckets[action].append(
                    BankEntry(encode_observation(hidden), hidden, action)
                )
                log.warning(
                    "bank bucket %d empty after rollouts; filled by random sampling", action
                )
        if not bank.buckets[action]:
            raise RuntimeError(f"could not populate bank bucket for action {action}")
    return bank


def construct_counterfactual(
    variant: str,
    preferred: int,
    s_prev: np.ndarray,
    a_prev: int,
    bank: StateBank,
    degraded: bool,
    rng: np.random.Generator,
) -> tuple[Counterfactual | None, bool]:
    """Variant-specific counterfactual content plus the contrastive flag.

    Upward variants are called in the f=-1 (disagreement) context, downward
    variants in the f=+1 context. Quality degradation was already applied to
    `preferred`, which corrupts counterfactual actions for free; the degraded
    flag additionally widens counterfactual-state sampling to the whole bank.
    """
    if variant == "cfa":
        return Counterfactual(f_cf=1, kind="action", a_cf=preferred), True
    if variant == "cfs":
        entry = bank.sample_any(rng) if degraded else bank.sample_bucket(a_prev, rng)
        return Counterfactual(f_cf=1, kind="state", s_cf=entry.obs), True
    if variant == "cfa_down":
        others = [a for a in range(bank.n_actions) if a != preferred]
        a_cf = others[int(rng.integers(len(others)))]
        return Counterfactual(f_cf=-1, kind="action", a_cf=a_cf), True
    if variant == "cfs_down":
        entry = bank.sample_excluding(a_prev, rng)
        return Counterfactual(f_cf=-1, kind="state", s_cf=entry.obs), True
    if variant == "random_extra":
        entry = bank.sample_any(rng)
        return Counterfactual(f_cf=1, kind="pair", s_cf=entry.obs, a_cf=entry.action), False
    return None, True  # vanilla


def gather_feedback(
    cfg: OracleConfig,
    policy,
    bank: StateBank,
    s_prev: np.ndarray,
    hidden_prev,
    a_prev: int,
    rng: np.random.Generator,
) -> FeedbackEvent | None:
    """One oracle decision about the previous (state, action) pair."""
    if rng.random() >= cfg.feedback_frequency:
        return None
    preferred = policy.action(hidden_prev)
    degraded = rng.random() >= cfg.feedback_quality
    if degraded:
        preferred = int(rng.integers(bank.n_actions))
    contrastive = cfg.variant != "random_extra"
    if a_prev == preferred:
        cf = None
        if cfg.variant in ("cfa_down", "cfs_down"):
            cf, contrastive = construct_counterfactual(
                cfg.variant, preferred, s_prev, a_prev, bank, degraded, rng
            )
        return FeedbackEvent(
            f=1, state=s_prev, action=a_prev, cf=cf, contrastive_enabled=contrastive
        )
    cf = None
    if cfg.variant in ("cfa", "cfs", "random_extra"):
        cf, contrastive = construct_counterfactual(
            cfg.variant, preferred, s_prev, a_prev, bank, degraded, rng
        )
    return FeedbackEvent(
        f=-1, state=s_prev, action=a_prev, cf=cf, contrastive_enabled=contrastive
    )


class Oracle:
    """Feedback source for the training loop, with its own RNG stream."""

    def __init__(self, env_id: str, config: OracleConfig, bank: StateBank | None = None):
        self.config = config
        self.policy = make_expert(env_id)
        if bank is None:
            bank = build_state_bank(
                make_env(env_id), self.policy, config.bank_episodes, config.seed
            )
        self.bank = bank
        self.rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))

    def gather(self, s_prev, hidden_prev, a_prev) -> FeedbackEvent | None:
        return gather_feedback(
            self.config, self.policy, self.bank, s_prev, hidden_prev, a_prev, self.rng
        )
