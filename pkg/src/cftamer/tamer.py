"""H-function learner: model, counterfactual losses, replay, training loop.

The learner sees observations and feedback events only. Environmental reward
never reaches any update; it is consumed exclusively by the frozen evaluation
checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .envs import Environment, make_env

VARIANTS = ("vanilla", "cfa", "cfs", "cfa_down", "cfs_down", "random_extra")

CF_KINDS = ("action", "state", "pair")


@dataclass(frozen=True, eq=False)
class Counterfactual:
    f_cf: int
    kind: str
    s_cf: np.ndarray | None = None
    a_cf: int | None = None

    def __post_init__(self):
        if self.f_cf not in (-1, 1):
            raise ValueError(f"f_cf must be -1 or +1, got {self.f_cf}")
        if self.kind == "action":
            ok = self.a_cf is not None and self.s_cf is None
        elif self.kind == "state":
            ok = self.s_cf is not None and self.a_cf is None
        elif self.kind == "pair":
            ok = self.s_cf is not None and self.a_cf is not None
        else:
            raise ValueError(f"unknown counterfactual kind {self.kind!r}")
        if not ok:
            raise ValueError(f"malformed {self.kind} counterfactual")


@dataclass(frozen=True, eq=False)
class FeedbackEvent:
    f: int
    state: np.ndarray
    action: int
    cf: Counterfactual | None = None
    contrastive_enabled: bool = True

    def __post_init__(self):
        if self.f not in (-1, 1):
            raise ValueError(f"f must be -1 or +1, got {self.f}")
        if self.cf is not None:
            if self.cf.f_cf != -self.f:
                raise ValueError("counterfactual feedback must oppose the factual sign")
            if self.cf.kind == "action" and self.cf.a_cf == self.action:
                raise ValueError("counterfactual action must differ from the taken action")

    @property
    def is_upward(self) -> bool:
        return self.cf is not None and self.f == -1

    def cf_pair(self) -> tuple[np.ndarray, int]:
        """State/action the counterfactual term trains on."""
        s = self.cf.s_cf if self.cf.s_cf is not None else self.state
        a = self.cf.a_cf if self.cf.a_cf is not None else self.action
        return s, a


class ReplayBuffer:
    """Fixed-capacity FIFO ring of feedback events."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list[FeedbackEvent] = []
        self._next = 0

    def append(self, event: FeedbackEvent):
        if len(self._items) < self.capacity:
            self._items.append(event)
        else:
            self._items[self._next] = event
            self._next = (self._next + 1) % self.capacity

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> FeedbackEvent:
        return self._items[i]

    def in_order(self) -> list[FeedbackEvent]:
        return self._items[self._next:] + self._items[: self._next]


@dataclass
class TrainerConfig:
    variant: str = "vanilla"
    episodes: int = 300
    max_steps: int | None = None  # episode cap; None -> env default
    buffer_capacity: int = 1000
    minibatch_size: int = 16
    replay_interval: int = 4
    seed: int = 0
    trunk_sizes: tuple | None = None  # None -> per-env default
    embed_dim: int = 32
    step_size: float = 1e-3
    optimizer: str = "adam"
    checkpoint_every: int = 500  # env steps; 0 disables evaluation checkpoints

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for name in ("episodes", "buffer_capacity", "minibatch_size", "replay_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def resolved_trunk_sizes(self, env_id: str) -> tuple:
        if self.trunk_sizes is not None:
            return tuple(self.trunk_sizes)
        return (64, 64) if env_id == "gridworld" else (32, 32)


@dataclass
class HModel:
    """Shared trunk plus one two-layer head (relu embed, linear scalar) per action."""

    trunk: nn.NetworkParams
    heads: list[nn.NetworkParams]
    trunk_opt: nn.OptimizerState
    head_opts: list[nn.OptimizerState]
    embed_dim: int

    @property
    def n_actions(self) -> int:
        return len(self.heads)

    @property
    def obs_dim(self) -> int:
        return self.trunk.in_size

    def copy(self) -> "HModel":
        import copy

        return copy.deepcopy(self)


def init_model(
    obs_dim: int,
    n_actions: int,
    rng: np.random.Generator,
    trunk_sizes: tuple = (64, 64),
    embed_dim: int = 32,
    step_size: float = 1e-3,
    optimizer: str = "adam",
) -> HModel:
    adam = nn.AdamConfig(step_size=step_size, algorithm=optimizer)
    trunk = nn.init_network(
        [obs_dim, *trunk_sizes], ["relu"] * len(trunk_sizes), rng
    )
    trunk_dim = trunk_sizes[-1]
    heads = [
        nn.init_network([trunk_dim, embed_dim, 1], ["relu", "linear"], rng)
        for _ in range(n_actions)
    ]
    return HModel(
        trunk=trunk,
        heads=heads,
        trunk_opt=nn.adam_init(trunk, adam),
        head_opts=[nn.adam_init(h, adam) for h in heads],
        embed_dim=embed_dim,
    )


def _head_views(head: nn.NetworkParams) -> tuple[nn.NetworkParams, nn.NetworkParams]:
    # embed layer and scalar output layer share the head's arrays
    return nn.NetworkParams(head.layers[:1]), nn.NetworkParams(head.layers[1:])


def h_values(model: HModel, s: np.ndarray) -> np.ndarray:
    trunk_out, _ = nn.forward(model.trunk, s)
    values = np.empty(model.n_actions)
    for a, head in enumerate(model.heads):
        out, _ = nn.forward(head, trunk_out)
        values[a] = out[0]
    return values


def embed(model: HModel, s: np.ndarray, a: int) -> np.ndarray:
    if not 0 <= a < model.n_actions:
        raise ValueError(f"action {a} out of range")
    trunk_out, _ = nn.forward(model.trunk, s)
    emb_net, _ = _head_views(model.heads[a])
    e, _ = nn.forward(emb_net, trunk_out)
    return e


def select_action(model: HModel, s: np.ndarray, rng: np.random.Generator) -> int:
    values = h_values(model, s)
    best = np.flatnonzero(values == values.max())
    if len(best) == 1:
        return int(best[0])
    return int(rng.choice(best))


def contrastive_loss(
    e_fact: np.ndarray, e_cf: np.ndarray
) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Hinge on cosine similarity: max(0, cos). Degenerate norms soft-skip."""
    zero = (np.zeros_like(e_fact), np.zeros_like(e_cf))
    try:
        value, grads = nn.cosine_similarity(e_fact, e_cf)
    except nn.DegenerateEmbeddingError:
        return 0.0, zero
    if value <= 0.0:
        return 0.0, zero
    return value, grads


@dataclass
class ModelGrads:
    trunk: nn.GradientSet
    heads: dict  # action index -> GradientSet

    def add_(self, other: "ModelGrads") -> "ModelGrads":
        self.trunk.add_(other.trunk)
        for a, g in other.heads.items():
            if a in self.heads:
                self.heads[a].add_(g)
            else:
                self.heads[a] = g
        return self

    def scale(self, factor: float) -> "ModelGrads":
        return ModelGrads(
            self.trunk.scale(factor), {a: g.scale(factor) for a, g in self.heads.items()}
        )


def _merge_head_grads(emb_grads: nn.GradientSet, out_grads: nn.GradientSet) -> nn.GradientSet:
    return nn.GradientSet(emb_grads.layers + out_grads.layers)


def full_loss(model: HModel, event: FeedbackEvent) -> tuple[float, ModelGrads]:
    """Combined loss: factual L2 + counterfactual L2 + cosine hinge.

    Without a counterfactual this degenerates to the single factual L2 term.
    Gradients flow into the shared trunk from every term.
    """
    s, a = event.state, event.action
    trunk_out, trunk_cache = nn.forward(model.trunk, s)
    emb_f, out_f = _head_views(model.heads[a])
    e_fact, cache_ef = nn.forward(emb_f, trunk_out)
    h_fact, cache_hf = nn.forward(out_f, e_fact)
    residual_f = h_fact[0] - event.f
    loss = residual_f**2

    # factual L2 path back to the embedding
    g_at_e_fact, grads_out_f = nn.backward(out_f, cache_hf, np.array([2.0 * residual_f]))

    if event.cf is None:
        input_grad, grads_emb_f = nn.backward(emb_f, cache_ef, g_at_e_fact)
        _, trunk_grads = nn.backward(model.trunk, trunk_cache, input_grad)
        head_grads = _merge_head_grads(grads_emb_f, grads_out_f)
        return loss, ModelGrads(trunk_grads, {a: head_grads})

    s_cf, a_cf = event.cf_pair()
    shared_trunk = event.cf.kind == "action"
    if shared_trunk:
        trunk_out_cf, trunk_cache_cf = trunk_out, trunk_cache
    else:
        trunk_out_cf, trunk_cache_cf = nn.forward(model.trunk, s_cf)
    emb_c, out_c = _head_views(model.heads[a_cf])
    e_cf, cache_ec = nn.forward(emb_c, trunk_out_cf)
    h_cf, cache_hc = nn.forward(out_c, e_cf)
    residual_c = h_cf[0] - event.cf.f_cf
    loss += residual_c**2

    g_at_e_cf, grads_out_c = nn.backward(out_c, cache_hc, np.array([2.0 * residual_c]))

    if event.contrastive_enabled:
        l_cos, (d_e_fact, d_e_cf) = contrastive_loss(e_fact, e_cf)
        loss += l_cos
        g_at_e_fact = g_at_e_fact + d_e_fact
        g_at_e_cf = g_at_e_cf + d_e_cf

    input_grad_f, grads_emb_f = nn.backward(emb_f, cache_ef, g_at_e_fact)
    input_grad_c, grads_emb_c = nn.backward(emb_c, cache_ec, g_at_e_cf)

    head_grads: dict = {a: _merge_head_grads(grads_emb_f, grads_out_f)}
    cf_head_grads = _merge_head_grads(grads_emb_c, grads_out_c)
    if a_cf in head_grads:
        head_grads[a_cf].add_(cf_head_grads)
    else:
        head_grads[a_cf] = cf_head_grads

    if shared_trunk:
        _, trunk_grads = nn.backward(
            model.trunk, trunk_cache, input_grad_f + input_grad_c
        )
    else:
        _, trunk_grads = nn.backward(model.trunk, trunk_cache, input_grad_f)
        _, trunk_grads_cf = nn.backward(model.trunk, trunk_cache_cf, input_grad_c)
        trunk_grads.add_(trunk_grads_cf)
    return loss, ModelGrads(trunk_grads, head_grads)


def _apply_grads(model: HModel, grads: ModelGrads):
    model.trunk, model.trunk_opt = nn.adam_update(model.trunk, grads.trunk, model.trunk_opt)
    for a, g in grads.heads.items():
        model.heads[a], model.head_opts[a] = nn.adam_update(
            model.heads[a], g, model.head_opts[a]
        )


def apply_feedback(model: HModel, buffer: ReplayBuffer, event: FeedbackEvent) -> HModel:
    """One immediate gradient step on the event, then store it for replay."""
    _, grads = full_loss(model, event)
    _apply_grads(model, grads)
    buffer.append(event)
    return model


def replay_update(
    model: HModel, buffer: ReplayBuffer, rng: np.random.Generator, minibatch_size: int = 16
) -> HModel:
    """Averaged gradient step over a uniform with-replacement minibatch."""
    if len(buffer) == 0:
        return model
    indices = rng.integers(0, len(buffer), size=minibatch_size)
    total: ModelGrads | None = None
    for i in indices:
        _, grads = full_loss(model, buffer[int(i)])
        total = grads if total is None else total.add_(grads)
    _apply_grads(model, total.scale(1.0 / minibatch_size))
    return model


@dataclass
class Checkpoint:
    env_steps: int
    score: float
    feedback_count: int = 0
    cf_count: int = 0


@dataclass
class LoggedEvent:
    global_step: int
    episode: int
    event: FeedbackEvent


@dataclass
class TrainingLog:
    env_id: str
    variant: str
    seed: int
    events: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    episodes_completed: int = 0
    total_steps: int = 0
    feedback_count: int = 0
    cf_count: int = 0
    model: HModel | None = None

    def to_json(self) -> dict:
        def cf_json(cf):
            if cf is None:
                return None
            return {
                "f_cf": cf.f_cf,
                "kind": cf.kind,
                "s_cf": None if cf.s_cf is None else cf.s_cf.tolist(),
                "a_cf": cf.a_cf,
            }

        return {
            "env": self.env_id,
            "variant": self.variant,
            "seed": self.seed,
            "episodes_completed": self.episodes_completed,
            "total_steps": self.total_steps,
            "feedback_count": self.feedback_count,
            "cf_count": self.cf_count,
            "events": [
                {
                    "global_step": le.global_step,
                    "episode": le.episode,
                    "f": le.event.f,
                    "state": le.event.state.tolist(),
                    "action": le.event.action,
                    "cf": cf_json(le.event.cf),
                    "contrastive_enabled": le.event.contrastive_enabled,
                }
                for le in self.events
            ],
            "checkpoints": [
                {
                    "env_steps": c.env_steps,
                    "score": c.score,
                    "feedback_count": c.feedback_count,
                    "cf_count": c.cf_count,
                }
                for c in self.checkpoints
            ],
            "model": None
            if self.model is None
            else {
                "trunk": [
                    {"w": l.w.tolist(), "b": l.b.tolist()} for l in self.model.trunk.layers
                ],
                "heads": [
                    [{"w": l.w.tolist(), "b": l.b.tolist()} for l in head.layers]
                    for head in self.model.heads
                ],
            },
        }


class StopTraining(Exception):
    """Raised by a feedback source or hook to end the run, keeping the partial log."""


class TrainingLoop:
    """Stepwise Algorithm-1 executor.

    The same loop backs offline oracle runs and interactive sessions; hooks
    never consume the run's RNG streams, so a session replaying an oracle's
    decision stream reproduces the offline model bit for bit.
    """

    def __init__(
        self,
        config: TrainerConfig,
        env: Environment,
        feedback_source,
        norms=None,
        eval_seeds=None,
        on_state=None,
        on_checkpoint=None,
    ):
        if config.checkpoint_every > 0 and norms is None:
            raise ValueError("evaluation checkpoints require calibrated norms")
        self.config = config
        self.env = env
        self.source = feedback_source
        self.norms = norms
        self.eval_seeds = tuple(eval_seeds) if eval_seeds is not None else ()
        self.on_state = on_state
        self.on_checkpoint = on_checkpoint

        streams = np.random.SeedSequence(config.seed).spawn(4)
        init_rng = np.random.default_rng(streams[0])
        self.tie_rng = np.random.default_rng(streams[1])
        self.replay_rng = np.random.default_rng(streams[2])
        self.episode_rng = np.random.default_rng(streams[3])

        self.model = init_model(
            env.obs_dim,
            env.n_actions,
            init_rng,
            trunk_sizes=config.resolved_trunk_sizes(env.env_id),
            embed_dim=config.embed_dim,
            step_size=config.step_size,
            optimizer=config.optimizer,
        )
        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.max_steps = config.max_steps or env.max_steps
        self.eval_env = make_env(env.env_id) if config.checkpoint_every > 0 else None

        self.log = TrainingLog(env.env_id, config.variant, config.seed)
        self.episode = 0
        self.episode_step = 0
        self.global_step = 0
        self.cur_obs = None
        self.prev = None  # (obs, hidden, action) of the previous step
        if config.checkpoint_every > 0:
            self._record_checkpoint()

    @property
    def finished(self) -> bool:
        return self.episode >= self.config.episodes

    def _evaluate(self) -> float:
        from .stats import evaluate_policy

        return evaluate_policy(self.model, self.eval_env, self.eval_seeds, self.norms)

    def _record_checkpoint(self):
        cp = Checkpoint(
            env_steps=self.global_step,
            score=self._evaluate(),
            feedback_count=self.log.feedback_count,
            cf_count=self.log.cf_count,
        )
        self.log.checkpoints.append(cp)
        if self.on_checkpoint:
            self.on_checkpoint(self, cp)

    def _begin_episode(self):
        seed = int(self.episode_rng.integers(0, 2**31 - 1))
        self.cur_obs = self.env.reset(seed)
        self.episode_step = 0
        self.prev = None

    def step_once(self):
        if self.finished:
            raise StopTraining("training already finished")
        if self.cur_obs is None:
            self._begin_episode()
        self.episode_step += 1
        if self.on_state:
            self.on_state(self)
        if self.prev is not None:
            prev_obs, prev_hidden, prev_action = self.prev
            event = self.source.gather(prev_obs, prev_hidden, prev_action)
            if event is not None:
                apply_feedback(self.model, self.buffer, event)
                self.log.events.append(LoggedEvent(self.global_step, self.episode, event))
                self.log.feedback_count += 1
                if event.cf is not None:
                    self.log.cf_count += 1
        if (
            self.global_step > 0
            and self.global_step % self.config.replay_interval == 0
            and len(self.buffer) > 0
        ):
            replay_update(
                self.model, self.buffer, self.replay_rng, self.config.minibatch_size
            )
        action = select_action(self.model, self.cur_obs, self.tie_rng)
        hidden_before = self.env.hidden_state
        result = self.env.step(action)
        self.prev = (self.cur_obs, hidden_before, action)
        self.cur_obs = result.observation
        self.global_step += 1
        self.log.total_steps = self.global_step
        if (
            self.config.checkpoint_every > 0
            and self.global_step % self.config.checkpoint_every == 0
        ):
            self._record_checkpoint()
        if result.done or self.episode_step >= self.max_steps:
            self.episode += 1
            self.log.episodes_completed = self.episode
            self.cur_obs = None

    def run(self) -> TrainingLog:
        try:
            while not self.finished:
                self.step_once()
        except StopTraining:
            pass
        self.log.model = self.model
        return self.log


def run_training(
    config: TrainerConfig,
    env: Environment,
    feedback_source,
    norms=None,
    eval_seeds=None,
    on_state=None,
    on_checkpoint=None,
) -> TrainingLog:
    """Execute the full training procedure and return its log."""
    loop = TrainingLoop(
        config, env, feedback_source, norms, eval_seeds, on_state, on_checkpoint
    )
    return loop.run()
