"""MAML-style off-policy meta-training and few-shot meta-adaptation.

The individual level adapts copies of the global Q/critic/actor parameters
with plain gradient steps on per-task support batches; the global level
applies Adam to the accumulated query-set gradients. The outer gradient is
first-order by default; the exact mode differentiates through the inner
steps via the Jacobian product of the update maps and is guarded to small
parameter counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mdp
from .channel_env import Environment, ScenarioKind, build_scenario, scenario_by_name
from .drl_core import (AgentNets, JointPolicy, ReplayBuffer, RolloutSession,
                       TrainConfig, TrainingDiverged, actor_loss_grad,
                       critic_loss_grad, dqn_loss_grad)
from .neuralnet import ParamSet, adam_step, sgd_step

EXACT_MODE_MAX_PARAMS = 300


@dataclass(frozen=True)
class TaskSpec:
    """One meta-task: a scenario kind plus the seed fixing initial positions."""

    kind: ScenarioKind
    env_seed: int
    task_id: int


@dataclass
class MetaConfig:
    tasks_per_batch: int = 100
    num_batches: int = 200
    inner_steps: int = 1
    inner_lr_q: float = 0.01
    inner_lr_critic: float = 0.01
    inner_lr_actor: float = 0.001
    outer_lr_q: float = 0.001
    outer_lr_critic: float = 0.001
    outer_lr_actor: float = 0.0001
    support_size: int = 100
    query_size: int = 100
    slots_per_batch: int = 100       # T_max
    adapt_samples: int = 40          # T_Ap
    adapt_batch_size: int = 32
    adapt_steps_per_slot: int = 1
    outer_mode: str = "first_order"  # or "exact"
    task_buffer_capacity: int = 20_000
    seed: int = 0

    def __post_init__(self):
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if min(self.inner_lr_q, self.inner_lr_critic, self.inner_lr_actor) < 0:
            raise ValueError("inner learning rates must be >= 0")
        if self.outer_mode not in ("first_order", "exact"):
            raise ValueError(f"unknown outer mode {self.outer_mode!r}")


def make_task_set(kind: ScenarioKind, num_tasks: int,
                  base_seed: int = 0) -> list[TaskSpec]:
    """Tasks differ only in environment seed (initial vehicle positions)."""
    return [TaskSpec(kind=kind, env_seed=base_seed + 1000 * i, task_id=i)
            for i in range(num_tasks)]


def sample_tasks(task_set: list[TaskSpec], n: int,
                 rng: np.random.Generator) -> list[TaskSpec]:
    """Uniform draw of n tasks, with replacement once n exceeds the set."""
    if not task_set:
        raise ValueError("task set is empty")
    replace = n > len(task_set)
    idx = rng.choice(len(task_set), size=n, replace=replace)
    return [task_set[i] for i in idx]


# -- generic flat-vector machinery (shared by toy tests and net wrappers) ----


def adapt_vector(loss_grad_fn, w0: np.ndarray, batch, num_steps: int,
                 lr: float) -> np.ndarray:
    """Plain gradient descent from w0; returns the adapted vector."""
    w = np.array(w0, dtype=float)
    for _ in range(num_steps):
        _, g = loss_grad_fn(w, batch)
        w = w - lr * np.asarray(g, dtype=float)
    return w


def first_order_outer_grad(loss_grad_fn, w_adapted: np.ndarray, query):
    """Query-set gradient at the adapted point, treated as the global
    gradient."""
    loss, g = loss_grad_fn(w_adapted, query)
    return loss, np.asarray(g, dtype=float)


def exact_outer_grad(loss_grad_fn, hessian_fn, w0: np.ndarray, support, query,
                     num_steps: int, lr: float):
    """Differentiate the query loss through the inner gradient steps.

    With update map U(w) = w - lr*grad(w), the outer gradient is the product
    of (I - lr*H) Jacobians along the inner trajectory, applied to the query
    gradient at the adapted point.
    """
    w = np.array(w0, dtype=float)
    iterates = [w.copy()]
    for _ in range(num_steps):
        _, g = loss_grad_fn(w, support)
        w = w - lr * np.asarray(g, dtype=float)
        iterates.append(w.copy())
    loss, v = first_order_outer_grad(loss_grad_fn, w, query)
    for w_i in reversed(iterates[:-1]):
        h = np.atleast_2d(np.asarray(hessian_fn(w_i, support), dtype=float))
        v = v - lr * (h.T @ v)
    return loss, v


def numerical_hessian(loss_grad_fn, w: np.ndarray, batch,
                      step: float = 1e-5) -> np.ndarray:
    """Central differences of the analytic gradient; small vectors only."""
    w = np.asarray(w, dtype=float)
    if w.size > EXACT_MODE_MAX_PARAMS:
        raise ValueError(
            f"exact mode supports <= {EXACT_MODE_MAX_PARAMS} parameters, "
            f"got {w.size}; use first_order")
    h = np.zeros((w.size, w.size))
    for i in range(w.size):
        wp = w.copy()
        wp[i] += step
        wm = w.copy()
        wm[i] -= step
        _, gp = loss_grad_fn(wp, batch)
        _, gm = loss_grad_fn(wm, batch)
        h[:, i] = (np.asarray(gp) - np.asarray(gm)) / (2 * step)
    return h


# -- the three network channels ----------------------------------------------


class _Channel:
    """Flat-vector view of one loss/parameter pair inside AgentNets."""

    def __init__(self, name: str, get_params, loss_grad):
        self.name = name
        self.get_params = get_params    # nets -> ParamSet
        self.loss_grad = loss_grad      # (nets, batch) -> (loss, grad ParamSet)

    def vector_loss_grad(self, nets: AgentNets):
        def fn(w, batch):
            p = self.get_params(nets)
            saved = p.to_flat()
            p.from_flat(w)
            try:
                loss, grad = self.loss_grad(nets, batch)
            finally:
                p.from_flat(saved)
            return loss, grad.to_flat()
        return fn


def _channels(gamma: float) -> list[_Channel]:
    return [
        _Channel("q", lambda n: n.q,
                 lambda n, b: dqn_loss_grad(n, b, gamma)),
        _Channel("critic", lambda n: n.critic,
                 lambda n, b: critic_loss_grad(n, b, gamma)),
        _Channel("actor", lambda n: n.actor,
                 lambda n, b: actor_loss_grad(n, b)),
    ]


def _inner_lrs(cfg: MetaConfig) -> dict:
    return {"q": cfg.inner_lr_q, "critic": cfg.inner_lr_critic,
            "actor": cfg.inner_lr_actor}


def inner_adapt(global_nets: AgentNets, support, cfg: MetaConfig,
                gamma: float) -> AgentNets:
    """Individual-level update: plain gradient steps from copies of the
    global parameters on the support batch; globals stay untouched."""
    task_nets = global_nets.clone()
    lrs = _inner_lrs(cfg)
    for _ in range(cfg.inner_steps):
        for ch in _channels(gamma):
            loss, grad = ch.loss_grad(task_nets, support)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"{ch.name} inner loss non-finite")
            sgd_step(ch.get_params(task_nets), grad, lrs[ch.name])
    return task_nets


@dataclass
class TaskAdaptation:
    """Everything the outer update needs from one task."""

    task_id: int
    adapted: AgentNets
    support: tuple
    query: tuple


def outer_update(global_nets: AgentNets, adaptations: list[TaskAdaptation],
                 cfg: MetaConfig, gamma: float) -> dict:
    """Global-level update: Adam on the summed query-set gradients.

    Accumulation runs in task-id order so results do not depend on the
    sampling order.
    """
    channels = _channels(gamma)
    lrs = {"q": cfg.outer_lr_q, "critic": cfg.outer_lr_critic,
           "actor": cfg.outer_lr_actor}
    adams = {"q": global_nets.adam_q, "critic": global_nets.adam_critic,
             "actor": global_nets.adam_actor}
    inner = _inner_lrs(cfg)
    losses = {ch.name: 0.0 for ch in channels}
    grand = {}
    for ch in channels:
        total = ch.get_params(global_nets).zeros_like()
        for ad in sorted(adaptations, key=lambda a: a.task_id):
            if cfg.outer_mode == "first_order":
                loss, grad = ch.loss_grad(ad.adapted, ad.query)
                total.axpy(1.0, grad)
            else:
                # per-group chain rule: each channel's inner trajectory is
                # differentiated independently, other groups held global
                fn = ch.vector_loss_grad(global_nets)
                w0 = ch.get_params(global_nets).to_flat()
                loss, gvec = exact_outer_grad(
                    fn, lambda w, b: numerical_hessian(fn, w, b), w0,
                    ad.support, ad.query, cfg.inner_steps, inner[ch.name])
                gset = ch.get_params(global_nets).zeros_like()
                gset.from_flat(gvec)
                total.axpy(1.0, gset)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"{ch.name} query loss non-finite")
            losses[ch.name] += loss
        grand[ch.name] = total
    for ch in channels:
        adam_step(ch.get_params(global_nets), grand[ch.name], adams[ch.name],
                  lrs[ch.name])
    return losses


# -- meta-training -------------------------------------------------------------


@dataclass
class _TaskSession:
    env: Environment
    session: RolloutSession
    buffer: ReplayBuffer


class MetaTrainer:
    """Algorithm-2 meta-training over a task set."""

    def __init__(self, task_set: list[TaskSpec], meta_cfg: MetaConfig,
                 train_cfg: TrainConfig,
                 scenario_factory=None):
        self.task_set = task_set
        self.meta_cfg = meta_cfg
        self.train_cfg = train_cfg
        self.scenario_factory = scenario_factory or self._default_factory
        ss = np.random.SeedSequence(meta_cfg.seed).spawn(3)
        self.task_rng = np.random.default_rng(ss[0])
        self.act_rng = np.random.default_rng(ss[1])
        self.sample_rng = np.random.default_rng(ss[2])
        self._sessions: dict[int, _TaskSession] = {}
        self.batch_losses: list[dict] = []

    @staticmethod
    def _default_factory(spec: TaskSpec):
        return scenario_by_name(spec.kind.value, 4, 4)

    def _session_for(self, spec: TaskSpec) -> _TaskSession:
        ts = self._sessions.get(spec.task_id)
        if ts is None:
            env = build_scenario(self.scenario_factory(spec), spec.env_seed)
            buffer = ReplayBuffer(self.meta_cfg.task_buffer_capacity)
            act_seed = self.meta_cfg.seed * 1_000_003 + spec.task_id
            session = RolloutSession(env, mdp.RewardWeights(), buffer,
                                     self.train_cfg.slots_per_episode,
                                     self.train_cfg.segment_dt_s,
                                     act_seed=act_seed)
            session.begin_episode()
            ts = _TaskSession(env, session, buffer)
            self._sessions[spec.task_id] = ts
        return ts

    def _epsilon(self, step: int, total_steps: int) -> float:
        cfg = self.train_cfg
        horizon = max(1, int(round(total_steps * cfg.eps_anneal_frac)))
        frac = min(step / horizon, 1.0)
        return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)

    def _draw_disjoint(self, buffer: ReplayBuffer):
        m = self.meta_cfg
        need = m.support_size + m.query_size
        if len(buffer) < need:
            return None
        idx = self.sample_rng.choice(len(buffer), size=need, replace=False)
        sup, qry = idx[:m.support_size], idx[m.support_size:]
        pick = lambda sel: (buffer._states[sel], buffer._subbands[sel],
                            buffer._powers[sel], buffer._rewards[sel],
                            buffer._next_states[sel])
        return pick(sup), pick(qry)

    def run(self, global_nets: AgentNets) -> AgentNets:
        m = self.meta_cfg
        policy = JointPolicy(global_nets, self.train_cfg)
        total_steps = max(1, m.num_batches * m.slots_per_batch)
        step = 0
        for _ in range(m.num_batches):
            tasks = sample_tasks(self.task_set, m.tasks_per_batch, self.task_rng)
            batch_loss = {"q": 0.0, "critic": 0.0, "actor": 0.0, "updates": 0}
            for _ in range(m.slots_per_batch):
                eps = self._epsilon(step, total_steps)
                step += 1
                adaptations = []
                for spec in tasks:
                    ts = self._session_for(spec)
                    ts.session.step_slot(policy, eps, True, self.act_rng)
                    draw = self._draw_disjoint(ts.buffer)
                    if draw is None:
                        continue
                    support, query = draw
                    adapted = inner_adapt(global_nets, support, m,
                                          self.train_cfg.gamma)
                    adaptations.append(TaskAdaptation(spec.task_id, adapted,
                                                      support, query))
                if adaptations:
                    losses = outer_update(global_nets, adaptations, m,
                                          self.train_cfg.gamma)
                    for key in ("q", "critic", "actor"):
                        batch_loss[key] += losses[key] / len(adaptations)
                    batch_loss["updates"] += 1
            n = max(1, batch_loss["updates"])
            self.batch_losses.append({k: batch_loss[k] / n
                                      for k in ("q", "critic", "actor")}
                                     | {"updates": batch_loss["updates"]})
        return global_nets


def run_meta_training(task_set: list[TaskSpec], meta_cfg: MetaConfig,
                      train_cfg: TrainConfig, global_nets: AgentNets,
                      scenario_factory=None) -> tuple[AgentNets, list[dict]]:
    trainer = MetaTrainer(task_set, meta_cfg, train_cfg, scenario_factory)
    nets = trainer.run(global_nets)
    return nets, trainer.batch_losses


# -- meta-adaptation ------------------------------------------------------------


def meta_adapt(meta_init: AgentNets, env: Environment, samples: int,
               meta_cfg: MetaConfig, train_cfg: TrainConfig,
               seed: int = 0) -> AgentNets:
    """Few-shot adaptation in a new environment.

    Each sample is one time slot of experiences from all agents; after every
    slot with enough stored data, one mini-batch gradient step per channel is
    applied with the individual-level learning rates.
    """
    nets = meta_init.clone()
    ss = np.random.SeedSequence(seed).spawn(2)
    act_rng = np.random.default_rng(ss[0])
    sample_rng = np.random.default_rng(ss[1])
    policy = JointPolicy(nets, train_cfg)
    buffer = ReplayBuffer(meta_cfg.task_buffer_capacity)
    session = RolloutSession(env, mdp.RewardWeights(), buffer,
                             train_cfg.slots_per_episode,
                             train_cfg.segment_dt_s)
    session.begin_episode()
    lrs = _inner_lrs(meta_cfg)
    channels = _channels(train_cfg.gamma)
    for _ in range(samples):
        session.step_slot(policy, train_cfg.eps_end, True, act_rng)
        if len(buffer) < meta_cfg.adapt_batch_size:
            continue
        for _ in range(meta_cfg.adapt_steps_per_slot):
            batch = buffer.sample(meta_cfg.adapt_batch_size, sample_rng)
            for ch in channels:
                if lrs[ch.name] == 0.0:
                    continue
                loss, grad = ch.loss_grad(nets, batch)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"{ch.name} adapt loss non-finite")
                sgd_step(ch.get_params(nets), grad, lrs[ch.name])
    return nets
