"""Combined DQN (sub-band) + DDPG (power) agent and its training loop.

One set of networks is shared by all V2V agents; agent identity enters only
through the observation. Experiences from every agent land in one replay
buffer, and each agent performs its own mini-batch update every slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import mdp
from .channel_env import Decision, Environment, LinkRates, compute_rates
from .neuralnet import (ActivationSpec, AdamState, DESK_HIDDEN, Head, ParamSet,
                        adam_step, backward, blend, forward, init_params)


class TrainingDiverged(RuntimeError):
    """A loss went non-finite during training."""


@dataclass
class Experience:
    state: np.ndarray
    subband: int
    power_w: float
    reward: float
    next_state: np.ndarray
    agent_id: int
    slot_index: int


class ReplayBuffer:
    """Uniform-sampling ring buffer over flat transition arrays."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self._n = 0
        self._head = 0
        self._states = None

    def __len__(self) -> int:
        return self._n

    def _ensure(self, dim: int) -> None:
        if self._states is None:
            c = self.capacity
            self._states = np.zeros((c, dim))
            self._subbands = np.zeros(c, dtype=int)
            self._powers = np.zeros(c)
            self._rewards = np.zeros(c)
            self._next_states = np.zeros((c, dim))
            self._agents = np.zeros(c, dtype=int)
            self._slots = np.zeros(c, dtype=int)

    def push(self, exp: Experience) -> None:
        self._ensure(len(exp.state))
        i = self._head
        self._states[i] = exp.state
        self._subbands[i] = exp.subband
        self._powers[i] = exp.power_w
        self._rewards[i] = exp.reward
        self._next_states[i] = exp.next_state
        self._agents[i] = exp.agent_id
        self._slots[i] = exp.slot_index
        self._head = (i + 1) % self.capacity
        self._n = min(self._n + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        """(states, subbands, powers, rewards, next_states) arrays."""
        if self._n < batch_size:
            raise ValueError(f"buffer holds {self._n} < batch {batch_size}")
        idx = rng.choice(self._n, size=batch_size, replace=False)
        return (self._states[idx], self._subbands[idx], self._powers[idx],
                self._rewards[idx], self._next_states[idx])

    def oldest_slots(self):
        # exposes eviction order for tests
        return self._slots[:self._n]


@dataclass
class TrainConfig:
    episodes: int = 200
    slots_per_episode: int = 100
    gamma: float = 0.5
    tau: float = 0.001
    lr_q: float = 0.001
    lr_actor: float = 0.0001
    lr_critic: float = 0.001
    batch_size: int = 256          # paper uses 2000
    buffer_capacity: int = 200_000
    eps_start: float = 1.0
    eps_end: float = 0.02
    eps_anneal_frac: float = 0.8
    noise_variance: float = 0.2    # normalized power units
    hard_update_period: int = 100
    hidden_sizes: tuple[int, ...] = DESK_HIDDEN
    segment_dt_s: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("gamma", "tau", "eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if min(self.lr_q, self.lr_actor, self.lr_critic) <= 0:
            raise ValueError("learning rates must be positive")


def epsilon_schedule(cfg: TrainConfig, episode: int) -> float:
    """Linear anneal over the first eps_anneal_frac of episodes, then flat."""
    horizon = max(1, int(round(cfg.episodes * cfg.eps_anneal_frac)))
    frac = min(episode / horizon, 1.0)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


class AgentNets:
    """Q, actor, and critic networks with their frozen target copies."""

    def __init__(self, q, actor, critic):
        self.q = q
        self.q_target = q.clone()
        self.actor = actor
        self.actor_target = actor.clone()
        self.critic = critic
        self.critic_target = critic.clone()
        self.adam_q = AdamState(q)
        self.adam_actor = AdamState(actor)
        self.adam_critic = AdamState(critic)

    @classmethod
    def create(cls, obs_dim: int, num_subbands: int, max_power_w: float,
               hidden: tuple[int, ...], seed: int) -> "AgentNets":
        ss = np.random.SeedSequence(seed).spawn(3)
        q = init_params((obs_dim, *hidden, num_subbands),
                        ActivationSpec(Head.LINEAR), seed=ss[0])
        actor = init_params((obs_dim, *hidden, 1),
                            ActivationSpec(Head.SIGMOID_SCALED, max_power_w),
                            seed=ss[1])
        critic = init_params((obs_dim + 1, *hidden, 1),
                             ActivationSpec(Head.LINEAR), seed=ss[2])
        return cls(q, actor, critic)

    def clone(self) -> "AgentNets":
        other = AgentNets(self.q.clone(), self.actor.clone(), self.critic.clone())
        blend(other.q_target, self.q_target, 1.0)
        blend(other.actor_target, self.actor_target, 1.0)
        blend(other.critic_target, self.critic_target, 1.0)
        return other

    def checksum(self) -> bytes:
        return (self.q.to_bytes() + self.actor.to_bytes()
                + self.critic.to_bytes())


# -- action selection -------------------------------------------------------


def select_subband(q: ParamSet, obs: np.ndarray, eps: float,
                   rng: np.random.Generator) -> int:
    """Epsilon-greedy over Q values; ties break to the lowest index."""
    num_actions = q.layer_sizes[-1]
    if eps > 0.0 and rng.uniform() < eps:
        return int(rng.integers(num_actions))
    values, _ = forward(q, obs)
    return int(np.argmax(values))


def power_exploration_noise(noise_variance: float, max_power_w: float,
                            rng: np.random.Generator) -> float:
    """Gaussian exploration noise drawn in normalized units, scaled to watts."""
    return float(rng.normal(0.0, np.sqrt(noise_variance))) * max_power_w


def select_power(actor: ParamSet, obs: np.ndarray, noise_variance: float,
                 rng: np.random.Generator, explore: bool) -> float:
    """Actor output plus optional exploration noise, clamped to [0, P_max]."""
    out, _ = forward(actor, obs)
    p = float(out[0])
    if explore:
        p += power_exploration_noise(noise_variance, actor.act.scale, rng)
    return min(max(p, 0.0), actor.act.scale)


# -- losses and gradients ----------------------------------------------------


def dqn_loss_grad(nets: AgentNets, batch, gamma: float):
    """Squared TD error of the Q network against the frozen target."""
    states, subbands, _, rewards, next_states = batch
    target_q, _ = forward(nets.q_target, next_states)
    y = rewards + gamma * target_q.max(axis=1)
    q_all, cache = forward(nets.q, states)
    rows = np.arange(len(rewards))
    chosen = q_all[rows, subbands]
    resid = y - chosen
    loss = float(np.sum(resid ** 2))
    out_grad = np.zeros_like(q_all)
    out_grad[rows, subbands] = -2.0 * resid
    grad, _ = backward(nets.q, cache, out_grad)
    return loss, grad


def critic_loss_grad(nets: AgentNets, batch, gamma: float):
    """Squared Bellman error of the critic; targets use frozen networks."""
    states, _, powers, rewards, next_states = batch
    next_actions, _ = forward(nets.actor_target, next_states)
    target_in = np.concatenate([next_states, next_actions], axis=1)
    target_q, _ = forward(nets.critic_target, target_in)
    y = rewards + gamma * target_q[:, 0]
    critic_in = np.concatenate([states, powers[:, None]], axis=1)
    q, cache = forward(nets.critic, critic_in)
    resid = y - q[:, 0]
    loss = float(np.sum(resid ** 2))
    grad, _ = backward(nets.critic, cache, (-2.0 * resid)[:, None])
    return loss, grad


def actor_loss_grad(nets: AgentNets, batch):
    """Deterministic policy-gradient loss -mean Q(s, pi(s)); critic frozen."""
    states = batch[0]
    n = len(states)
    actions, actor_cache = forward(nets.actor, states)
    critic_in = np.concatenate([states, actions], axis=1)
    q, critic_cache = forward(nets.critic, critic_in)
    loss = float(-np.mean(q[:, 0]))
    dq = np.full((n, 1), -1.0 / n)
    _, input_grad = backward(nets.critic, critic_cache, dq)
    action_grad = input_grad[:, -1:]
    grad, _ = backward(nets.actor, actor_cache, action_grad)
    return loss, grad


def _check_finite(name: str, loss: float, context: dict) -> None:
    if not np.isfinite(loss):
        raise TrainingDiverged(f"{name} loss became non-finite: {loss} "
                               f"(context {context})")


# -- policies ---------------------------------------------------------------


class Policy:
    """Acting + learning interface shared by the trained agents and
    baselines."""

    min_train_size: int = 0

    def act(self, obs: np.ndarray, eps: float, explore: bool,
            rng: np.random.Generator) -> tuple[int, float]:
        raise NotImplementedError

    def update(self, buffer: ReplayBuffer, num_agents: int,
               rng: np.random.Generator) -> dict:
        return {}

    def hard_sync(self, global_slot: int) -> None:
        pass


class JointPolicy(Policy):
    """Algorithm-1 agent: DQN picks the sub-band, DDPG picks the power."""

    def __init__(self, nets: AgentNets, cfg: TrainConfig):
        self.nets = nets
        self.cfg = cfg
        self.min_train_size = cfg.batch_size
        self.hard_copy_log: list[int] = []

    def act(self, obs, eps, explore, rng):
        sb = select_subband(self.nets.q, obs, eps if explore else 0.0, rng)
        pw = select_power(self.nets.actor, obs, self.cfg.noise_variance, rng,
                          explore)
        return sb, pw

    def update(self, buffer, num_agents, rng):
        losses = {"dqn": 0.0, "critic": 0.0, "actor": 0.0}
        cfg = self.cfg
        for _ in range(num_agents):
            batch = buffer.sample(cfg.batch_size, rng)
            dqn_loss, dqn_grad = dqn_loss_grad(self.nets, batch, cfg.gamma)
            _check_finite("dqn", dqn_loss, {"batch": cfg.batch_size})
            adam_step(self.nets.q, dqn_grad, self.nets.adam_q, cfg.lr_q)

            c_loss, c_grad = critic_loss_grad(self.nets, batch, cfg.gamma)
            _check_finite("critic", c_loss, {"batch": cfg.batch_size})
            adam_step(self.nets.critic, c_grad, self.nets.adam_critic,
                      cfg.lr_critic)

            a_loss, a_grad = actor_loss_grad(self.nets, batch)
            _check_finite("actor", a_loss, {"batch": cfg.batch_size})
            adam_step(self.nets.actor, a_grad, self.nets.adam_actor,
                      cfg.lr_actor)

            blend(self.nets.actor_target, self.nets.actor, cfg.tau)
            blend(self.nets.critic_target, self.nets.critic, cfg.tau)
            losses["dqn"] += dqn_loss
            losses["critic"] += c_loss
            losses["actor"] += a_loss
        return losses

    def hard_sync(self, global_slot):
        if global_slot % self.cfg.hard_update_period == 0:
            blend(self.nets.q_target, self.nets.q, 1.0)
            self.hard_copy_log.append(global_slot)


class RandomPolicy(Policy):
    """Uniform sub-band and uniform power in [0, P_max]; training-free."""

    def __init__(self, num_subbands: int, max_power_w: float):
        self.num_subbands = num_subbands
        self.max_power_w = max_power_w

    def act(self, obs, eps, explore, rng):
        sb = int(rng.integers(self.num_subbands))
        pw = float(rng.uniform(0.0, self.max_power_w))
        return sb, pw


def quantized_power_levels(max_power_dbm: float, num_levels: int = 5,
                           low_dbm: float = -10.0) -> np.ndarray:
    """Uniform dBm grid from low_dbm to P_max, converted to watts."""
    dbm = np.linspace(low_dbm, max_power_dbm, num_levels)
    return 10.0 ** ((dbm - 30.0) / 10.0)


class QuantizedDqnPolicy(Policy):
    """Single DQN over the joint (sub-band x 5 power levels) action set."""

    def __init__(self, obs_dim: int, num_subbands: int, max_power_dbm: float,
                 cfg: TrainConfig, seed: int, num_levels: int = 5):
        self.num_subbands = num_subbands
        self.levels_w = quantized_power_levels(max_power_dbm, num_levels)
        self.num_levels = num_levels
        self.cfg = cfg
        self.q = init_params((obs_dim, *cfg.hidden_sizes,
                              num_subbands * num_levels),
                             ActivationSpec(Head.LINEAR), seed=seed)
        self.q_target = self.q.clone()
        self.adam_q = AdamState(self.q)
        self.min_train_size = cfg.batch_size
        self.hard_copy_log: list[int] = []

    def act(self, obs, eps, explore, rng):
        joint = select_subband(self.q, obs, eps if explore else 0.0, rng)
        return joint // self.num_levels, float(self.levels_w[joint % self.num_levels])

    def _joint_index(self, subbands, powers):
        level = np.argmin(np.abs(powers[:, None] - self.levels_w[None, :]), axis=1)
        return subbands * self.num_levels + level

    def update(self, buffer, num_agents, rng):
        total = 0.0
        cfg = self.cfg
        for _ in range(num_agents):
            states, subbands, powers, rewards, next_states = \
                buffer.sample(cfg.batch_size, rng)
            joint = self._joint_index(subbands, powers)
            target_q, _ = forward(self.q_target, next_states)
            y = rewards + cfg.gamma * target_q.max(axis=1)
            q_all, cache = forward(self.q, states)
            rows = np.arange(len(rewards))
            resid = y - q_all[rows, joint]
            loss = float(np.sum(resid ** 2))
            _check_finite("dqn(quantized)", loss, {"batch": cfg.batch_size})
            out_grad = np.zeros_like(q_all)
            out_grad[rows, joint] = -2.0 * resid
            grad, _ = backward(self.q, cache, out_grad)
            adam_step(self.q, grad, self.adam_q, cfg.lr_q)
            total += loss
        return {"dqn": total}

    def hard_sync(self, global_slot):
        if global_slot % self.cfg.hard_update_period == 0:
            blend(self.q_target, self.q, 1.0)
            self.hard_copy_log.append(global_slot)


# -- rollout machinery --------------------------------------------------------


@dataclass
class SlotStats:
    rewards: np.ndarray
    v2i_rate_sum: float
    events: list


class RolloutSession:
    """Drives one environment slot by slot under the Algorithm-1 acting path.

    Handles the one-slot experience lag (next states become available at the
    following slot), per-slot fading redraws, and the 100-slot large-scale
    segment cadence.
    """

    def __init__(self, env: Environment, weights: mdp.RewardWeights,
                 buffer: ReplayBuffer | None, slots_per_episode: int,
                 segment_dt_s: float = 0.1, act_seed: int = 0):
        self.env = env
        self.weights = weights
        self.buffer = buffer
        self.slots_per_episode = slots_per_episode
        self.segment_dt_s = segment_dt_s
        self.prev = mdp.PrevSlotRecords.initial()
        self.pending = None
        self.slot_in_episode = 0
        self.episodes_started = 0
        # one action stream per agent: draws for agent k are unaffected by
        # how many other agents exist (keeps paired sweeps comparable)
        self.act_rngs = [
            np.random.default_rng(np.random.SeedSequence(act_seed,
                                                         spawn_key=(7, k)))
            for k in range(env.cfg.num_v2v)]

    def begin_episode(self) -> None:
        if self.episodes_started > 0:
            self._flush_pending()
            self.env.advance_segment(self.segment_dt_s)
        self.env.reset_payloads()
        self.prev = mdp.PrevSlotRecords.initial()
        self.slot_in_episode = 0
        self.episodes_started += 1

    def _flush_pending(self) -> None:
        if self.pending is None:
            return
        self.env.update_small_scale()
        obs = mdp.observe_all(self.env, self.prev)
        self._push_experiences(obs)

    def _push_experiences(self, next_obs: np.ndarray) -> None:
        if self.pending is None:
            return
        obs, actions, rewards, slot = self.pending
        if self.buffer is not None:
            for k, (sb, pw) in enumerate(actions):
                self.buffer.push(Experience(obs[k], sb, pw, rewards[k],
                                            next_obs[k], k, slot))
        self.pending = None

    def step_slot(self, policy: Policy, eps: float, explore: bool) -> SlotStats:
        if self.slot_in_episode >= self.slots_per_episode:
            self.begin_episode()
        env = self.env
        env.update_small_scale()
        obs = mdp.observe_all(env, self.prev)
        self._push_experiences(obs)

        actions = [policy.act(obs[k], eps, explore, self.act_rngs[k])
                   for k in range(env.cfg.num_v2v)]
        decision = Decision(subband=np.array([a[0] for a in actions]),
                            power_w=np.array([a[1] for a in actions]))
        gains = env.gains()
        rates = compute_rates(env.compute_sinr(decision, gains),
                              env.cfg.subband_bandwidth_hz)
        rewards = mdp.reward_all(rates, env.tracker, self.weights,
                                 env.cfg.subband_bandwidth_hz)
        interf = env.interference_received(decision, gains)
        slot = env.slot
        events = env.advance_payloads(rates)
        self.prev = mdp.PrevSlotRecords(interference_w=interf,
                                        subbands=decision.subband)
        self.pending = (obs, actions, rewards, slot)
        self.slot_in_episode += 1
        return SlotStats(rewards=rewards,
                         v2i_rate_sum=float(np.sum(rates.v2i_rate)),
                         events=events)


# -- training and evaluation ---------------------------------------------------


@dataclass
class EpisodeMetrics:
    episode: int
    v2i_sum_rate_mbps: float
    v2v_fail_prob: float
    mean_reward: float
    epsilon: float


def run_training(env: Environment, policy: Policy, cfg: TrainConfig,
                 weights: mdp.RewardWeights | None = None
                 ) -> list[EpisodeMetrics]:
    """Generic Algorithm-1 style loop; the policy provides act/update."""
    weights = weights or mdp.RewardWeights()
    sample_rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(11,)))
    buffer = ReplayBuffer(cfg.buffer_capacity)
    session = RolloutSession(env, weights, buffer, cfg.slots_per_episode,
                             cfg.segment_dt_s, act_seed=cfg.seed)
    metrics = []
    global_slot = 0
    K = env.cfg.num_v2v
    for ep in range(cfg.episodes):
        eps = epsilon_schedule(cfg, ep)
        session.begin_episode()
        succ0, tot0 = env.tracker.recorded()
        rates_acc, reward_acc = [], []
        for _ in range(cfg.slots_per_episode):
            stats = session.step_slot(policy, eps, True)
            rates_acc.append(stats.v2i_rate_sum)
            reward_acc.append(float(stats.rewards.mean()))
            global_slot += 1
            if policy.min_train_size and len(buffer) >= policy.min_train_size:
                policy.update(buffer, K, sample_rng)
            policy.hard_sync(global_slot)
        succ1, tot1 = env.tracker.recorded()
        attempts = tot1 - tot0
        fails = attempts - (succ1 - succ0)
        metrics.append(EpisodeMetrics(
            episode=ep,
            v2i_sum_rate_mbps=float(np.mean(rates_acc)) / 1e6,
            v2v_fail_prob=fails / attempts if attempts else 0.0,
            mean_reward=float(np.mean(reward_acc)),
            epsilon=eps,
        ))
    return metrics


def run_algorithm1(env: Environment, nets: AgentNets, cfg: TrainConfig,
                   weights: mdp.RewardWeights | None = None
                   ) -> tuple[AgentNets, list[EpisodeMetrics]]:
    """Train the combined DQN+DDPG agent in the given environment."""
    policy = JointPolicy(nets, cfg)
    metrics = run_training(env, policy, cfg, weights)
    return nets, metrics


@dataclass
class EvalMetrics:
    v2i_sum_rate_mbps: float
    v2v_fail_prob: float
    mean_reward: float


def evaluate_policy(env: Environment, policy: Policy, episodes: int,
                    slots_per_episode: int = 100, seed: int = 0,
                    weights: mdp.RewardWeights | None = None) -> EvalMetrics:
    """Run the policy with exploration off; never mutates parameters."""
    weights = weights or mdp.RewardWeights()
    session = RolloutSession(env, weights, None, slots_per_episode,
                             act_seed=seed)
    rates_acc, reward_acc = [], []
    succ0, tot0 = env.tracker.recorded()
    for _ in range(episodes):
        session.begin_episode()
        for _ in range(slots_per_episode):
            stats = session.step_slot(policy, 0.0, False)
            rates_acc.append(stats.v2i_rate_sum)
            reward_acc.append(float(stats.rewards.mean()))
    succ1, tot1 = env.tracker.recorded()
    attempts = tot1 - tot0
    fails = attempts - (succ1 - succ0)
    return EvalMetrics(
        v2i_sum_rate_mbps=float(np.mean(rates_acc)) / 1e6,
        v2v_fail_prob=fails / attempts if attempts else 0.0,
        mean_reward=float(np.mean(reward_acc)),
    )
