"""Experiment front-end: configs, baselines, sweeps, metrics, CLI.

Every run writes exactly one JSON manifest (full config echo, seed, command,
outputs) next to its CSV outputs so the run can be reproduced bitwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, mdp
from .channel_env import ScenarioKind, build_scenario, scenario_by_name
from .drl_core import (AgentNets, EvalMetrics, JointPolicy, Policy,
                       QuantizedDqnPolicy, RandomPolicy, TrainConfig,
                       evaluate_policy, run_training)
from .meta import MetaConfig, make_task_set, meta_adapt, run_meta_training
from .neuralnet import ParamSet

CSV_EPISODE_HEADER = "episode,v2i_sum_rate_mbps,v2v_fail_prob,mean_reward,epsilon"


class ConfigError(ValueError):
    pass


@dataclass
class TrainSection:
    episodes: int = 200
    batch_size: int = 256
    hidden: tuple[int, ...] = (64, 32, 16)
    gamma: float = 0.5
    tau: float = 0.001
    lr_q: float = 0.001
    lr_actor: float = 0.0001
    lr_critic: float = 0.001
    eps_start: float = 1.0
    eps_end: float = 0.02
    eps_anneal_frac: float = 0.8
    noise_variance: float = 0.2
    buffer_capacity: int = 200_000


@dataclass
class MetaSection:
    tasks_per_batch: int = 100
    num_batches: int = 200
    num_tasks: int = 500
    inner_steps: int = 1
    inner_lr_q: float = 0.01
    inner_lr_critic: float = 0.01
    inner_lr_actor: float = 0.001
    support_size: int = 100
    query_size: int = 100
    slots_per_batch: int = 100
    outer_mode: str = "first_order"
    task_set_seed: int = 0


@dataclass
class AdaptSection:
    samples: int = 40
    batch_size: int = 32
    steps_per_slot: int = 1
    samples_grid: tuple[int, ...] = (10, 20, 30, 40, 50)


@dataclass
class ExperimentConfig:
    scenario: str = "urban"
    target_scenario: str = "highway"
    num_v2i: int = 4
    num_v2v: int = 4
    payload_bytes: int = 1060
    eval_episodes: int = 200
    seeds: tuple[int, ...] = (1, 2, 3)
    baseline: str = "random"
    checkpoint: str = ""
    sweep_vehicles: tuple[int, ...] = (4, 8, 12)
    sweep_payloads: tuple[int, ...] = (1060, 2120, 4240)
    train: TrainSection = field(default_factory=TrainSection)
    meta: MetaSection = field(default_factory=MetaSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)

    def __post_init__(self):
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if not self.seeds:
            raise ConfigError("need at least one seed")

    def scenario_config(self, name=None, num_v2v=None, payload_bytes=None):
        payload = self.payload_bytes if payload_bytes is None else payload_bytes
        return scenario_by_name(name or self.scenario, self.num_v2i,
                                num_v2v or self.num_v2v,
                                payload_bits=payload * 8)

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(episodes=t.episodes, batch_size=t.batch_size,
                           hidden_sizes=tuple(t.hidden), gamma=t.gamma,
                           tau=t.tau, lr_q=t.lr_q, lr_actor=t.lr_actor,
                           lr_critic=t.lr_critic, eps_start=t.eps_start,
                           eps_end=t.eps_end, eps_anneal_frac=t.eps_anneal_frac,
                           noise_variance=t.noise_variance,
                           buffer_capacity=t.buffer_capacity, seed=seed)

    def meta_config(self, seed: int) -> MetaConfig:
        m = self.meta
        a = self.adapt
        return MetaConfig(tasks_per_batch=m.tasks_per_batch,
                          num_batches=m.num_batches,
                          inner_steps=m.inner_steps,
                          inner_lr_q=m.inner_lr_q,
                          inner_lr_critic=m.inner_lr_critic,
                          inner_lr_actor=m.inner_lr_actor,
                          support_size=m.support_size,
                          query_size=m.query_size,
                          slots_per_batch=m.slots_per_batch,
                          outer_mode=m.outer_mode,
                          adapt_samples=a.samples,
                          adapt_batch_size=a.batch_size,
                          adapt_steps_per_slot=a.steps_per_slot,
                          seed=seed)


def _from_dict(cls, data: dict, path: str = ""):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key: {where}")
        ftype = fields[key].type
        if dataclasses.is_dataclass(fields[key].default_factory()) \
                if fields[key].default_factory is not dataclasses.MISSING else False:
            kwargs[key] = _from_dict(type(fields[key].default_factory()),
                                     value, where)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a typed config; unknown keys are errors reported with path."""
    return _from_dict(ExperimentConfig, data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply 'a.b=value' overrides; values parsed as JSON when possible."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return data


def config_hash(data: dict) -> str:
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(canon.encode()).hexdigest()


# -- manifests, CSV, checkpoints ------------------------------------------------


def write_manifest(out_dir: Path, command: str, cfg_dict: dict, seed: int,
                   outputs: list[str]) -> Path:
    manifest = {
        "config": cfg_dict,
        "seed": seed,
        "artifact_version": __version__,
        "command": command,
        "outputs": sorted(outputs),
        "config_hash": config_hash(cfg_dict),
    }
    path = out_dir / "manifest.json"
    with open(path, "w", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def write_csv(path: Path, header: str, rows: list[tuple]) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def save_checkpoint(ckpt_dir: Path, kind: str, params: dict[str, ParamSet],
                    meta: dict) -> None:
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for name, p in params.items():
        p.save(ckpt_dir / f"{name}.pset")
    info = {"kind": kind, "params": sorted(params)} | meta
    with open(ckpt_dir / "checkpoint.json", "w", newline="\n") as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(ckpt_dir: Path) -> tuple[dict, dict[str, ParamSet]]:
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "checkpoint.json") as f:
        info = json.load(f)
    params = {name: ParamSet.load(ckpt_dir / f"{name}.pset")
              for name in info["params"]}
    return info, params


def nets_from_checkpoint(info: dict, params: dict[str, ParamSet]) -> AgentNets:
    if not {"q", "actor", "critic"} <= set(params):
        raise ConfigError(f"checkpoint kind {info.get('kind')!r} does not "
                          "hold joint agent networks")
    return AgentNets(params["q"], params["actor"], params["critic"])


# -- metrics aggregation ---------------------------------------------------------


@dataclass
class MetricsRecord:
    v2i_sum_rate_mbps: float
    v2v_fail_prob: float
    v2i_half_width: float
    fail_half_width: float
    per_seed: list[EvalMetrics]


def half_width(values) -> float:
    """1.96 * sample std / sqrt(n) over per-seed values."""
    v = np.asarray(values, dtype=float)
    if v.size <= 1:
        return 0.0
    return float(1.96 * v.std(ddof=1) / np.sqrt(v.size))


def aggregate_metrics(per_seed: list[EvalMetrics]) -> MetricsRecord:
    rates = [m.v2i_sum_rate_mbps for m in per_seed]
    fails = [m.v2v_fail_prob for m in per_seed]
    return MetricsRecord(
        v2i_sum_rate_mbps=float(np.mean(rates)),
        v2v_fail_prob=float(np.mean(fails)),
        v2i_half_width=half_width(rates),
        fail_half_width=half_width(fails),
        per_seed=list(per_seed),
    )


# -- runners -----------------------------------------------------------------------


def _eval_seed(seed: int) -> int:
    # evaluation stream decoupled from the training stream
    return seed + 90_000


def evaluate_in_scenario(cfg: ExperimentConfig, policy: Policy, seed: int,
                         scenario: str | None = None, num_v2v=None,
                         payload_bytes=None) -> EvalMetrics:
    scn = cfg.scenario_config(scenario, num_v2v, payload_bytes)
    env = build_scenario(scn, _eval_seed(seed))
    return evaluate_policy(env, policy, cfg.eval_episodes,
                           seed=_eval_seed(seed))


def make_policy_for_checkpoint(cfg: ExperimentConfig, ckpt: str | Path,
                               seed: int) -> Policy:
    if str(ckpt) in ("", "random"):
        scn = cfg.scenario_config()
        return RandomPolicy(scn.num_v2i, scn.max_power_w)
    info, params = load_checkpoint(Path(ckpt))
    if info["kind"] == "quantized":
        scn = cfg.scenario_config()
        policy = QuantizedDqnPolicy(
            mdp.observation_length(cfg.num_v2i), cfg.num_v2i,
            scn.v2v_max_power_dbm, cfg.train_config(seed), seed=0)
        policy.q = params["q"]
        policy.q_target = params["q"].clone()
        return policy
    return JointPolicy(nets_from_checkpoint(info, params),
                       cfg.train_config(seed))


def run_train(cfg: ExperimentConfig, seed: int, out_dir: Path,
              cfg_dict: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scn = cfg.scenario_config()
    env = build_scenario(scn, seed)
    tc = cfg.train_config(seed)
    nets = AgentNets.create(mdp.observation_length(scn.num_v2i), scn.num_v2i,
                            scn.max_power_w, tc.hidden_sizes, seed)
    policy = JointPolicy(nets, tc)
    metrics = run_training(env, policy, tc)
    rows = [(m.episode, m.v2i_sum_rate_mbps, m.v2v_fail_prob, m.mean_reward,
             m.epsilon) for m in metrics]
    write_csv(out_dir / "episodes.csv", CSV_EPISODE_HEADER, rows)
    save_checkpoint(out_dir / "checkpoint", "joint",
                    {"q": nets.q, "actor": nets.actor, "critic": nets.critic},
                    {"config_hash": config_hash(cfg_dict or config_to_dict(cfg)),
                     "step_count": tc.episodes * tc.slots_per_episode,
                     "seed": seed})
    write_manifest(out_dir, "train", cfg_dict or config_to_dict(cfg), seed,
                   ["episodes.csv", "checkpoint"])
    return out_dir


def run_baseline(cfg: ExperimentConfig, kind: str, seed: int, out_dir: Path,
                 cfg_dict: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scn = cfg.scenario_config()
    if kind == "random":
        policy = RandomPolicy(scn.num_v2i, scn.max_power_w)
        m = evaluate_in_scenario(cfg, policy, seed)
        write_csv(out_dir / "metrics.csv",
                  "seed,v2i_sum_rate_mbps,v2v_fail_prob,mean_reward",
                  [(seed, m.v2i_sum_rate_mbps, m.v2v_fail_prob, m.mean_reward)])
        outputs = ["metrics.csv"]
    elif kind == "dqn_quantized":
        env = build_scenario(scn, seed)
        tc = cfg.train_config(seed)
        policy = QuantizedDqnPolicy(mdp.observation_length(scn.num_v2i),
                                    scn.num_v2i, scn.v2v_max_power_dbm, tc,
                                    seed=seed)
        metrics = run_training(env, policy, tc)
        rows = [(m.episode, m.v2i_sum_rate_mbps, m.v2v_fail_prob,
                 m.mean_reward, m.epsilon) for m in metrics]
        write_csv(out_dir / "episodes.csv", CSV_EPISODE_HEADER, rows)
        save_checkpoint(out_dir / "checkpoint", "quantized", {"q": policy.q},
                        {"config_hash": config_hash(cfg_dict or config_to_dict(cfg)),
                         "step_count": tc.episodes * tc.slots_per_episode,
                         "seed": seed})
        outputs = ["episodes.csv", "checkpoint"]
    else:
        raise ConfigError(f"unknown baseline kind {kind!r}")
    write_manifest(out_dir, f"baseline:{kind}",
                   cfg_dict or config_to_dict(cfg), seed, outputs)
    return out_dir


def run_meta_train(cfg: ExperimentConfig, seed: int, out_dir: Path,
                   cfg_dict: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scn = cfg.scenario_config()
    mc = cfg.meta_config(seed)
    tc = cfg.train_config(seed)
    task_set = make_task_set(ScenarioKind(cfg.scenario), cfg.meta.num_tasks,
                             cfg.meta.task_set_seed)
    nets = AgentNets.create(mdp.observation_length(scn.num_v2i), scn.num_v2i,
                            scn.max_power_w, tc.hidden_sizes, seed)
    factory = lambda spec: cfg.scenario_config(spec.kind.value)
    nets, losses = run_meta_training(task_set, mc, tc, nets, factory)
    rows = [(i, l["q"], l["critic"], l["actor"]) for i, l in enumerate(losses)]
    write_csv(out_dir / "batches.csv", "batch,q_loss,critic_loss,actor_loss",
              rows)
    save_checkpoint(out_dir / "checkpoint", "meta",
                    {"q": nets.q, "actor": nets.actor, "critic": nets.critic},
                    {"config_hash": config_hash(cfg_dict or config_to_dict(cfg)),
                     "seed": seed,
                     "provenance": "meta",
                     "task_seeds": [t.env_seed for t in task_set]})
    write_manifest(out_dir, "meta-train", cfg_dict or config_to_dict(cfg),
                   seed, ["batches.csv", "checkpoint"])
    return out_dir


def run_adapt_eval(cfg: ExperimentConfig, ckpt: Path, out_dir: Path,
                   samples_grid=None, cfg_dict: dict | None = None) -> list:
    """Meta-adapt fresh copies in the target scenario for each sample count
    (0 = no adaptation) and evaluate each; rows sorted by sample count."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = Path(ckpt)
    if not (ckpt / "checkpoint.json").exists():
        raise ConfigError(f"meta checkpoint not found: {ckpt}")
    info, params = load_checkpoint(ckpt)
    grid = sorted(set([0] + list(samples_grid or cfg.adapt.samples_grid)))
    target = cfg.target_scenario
    rows = []
    results = []
    for samples in grid:
        per_seed = []
        for seed in cfg.seeds:
            meta_init = nets_from_checkpoint(info, params)
            mc = cfg.meta_config(seed)
            tc = cfg.train_config(seed)
            if samples > 0:
                adapt_env = build_scenario(cfg.scenario_config(target),
                                           seed + 50_000)
                nets = meta_adapt(meta_init, adapt_env, samples, mc, tc,
                                  seed=seed)
            else:
                nets = meta_init
            policy = JointPolicy(nets, tc)
            per_seed.append(evaluate_in_scenario(cfg, policy, seed, target))
        rec = aggregate_metrics(per_seed)
        rows.append((samples, rec.v2i_sum_rate_mbps, rec.v2v_fail_prob,
                     rec.v2i_half_width, rec.fail_half_width))
        results.append((samples, rec))
    write_csv(out_dir / "adapt.csv",
              "samples,v2i_sum_rate_mbps,v2v_fail_prob,v2i_hw,fail_hw", rows)
    write_manifest(out_dir, "adapt-eval", cfg_dict or config_to_dict(cfg),
                   cfg.seeds[0], ["adapt.csv"])
    return results


def run_sweep(cfg: ExperimentConfig, axis: str, out_dir: Path, values=None,
              solutions: dict | None = None,
              cfg_dict: dict | None = None) -> dict:
    """Evaluate each solution across vehicle counts or payload sizes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if axis == "vehicles":
        grid = list(values or cfg.sweep_vehicles)
    elif axis == "payload":
        grid = list(values or cfg.sweep_payloads)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    solutions = solutions or {"random": ""}
    all_results = {}
    outputs = []
    for name, ckpt in solutions.items():
        rows = []
        results = []
        for value in grid:
            per_seed = []
            for seed in cfg.seeds:
                policy = make_policy_for_checkpoint(cfg, ckpt, seed)
                kwargs = {"num_v2v": value} if axis == "vehicles" \
                    else {"payload_bytes": value}
                per_seed.append(evaluate_in_scenario(cfg, policy, seed,
                                                     **kwargs))
            rec = aggregate_metrics(per_seed)
            rows.append((value, rec.v2i_sum_rate_mbps, rec.v2v_fail_prob,
                         rec.v2i_half_width, rec.fail_half_width))
            results.append((value, rec))
        fname = f"sweep_{axis}_{name}.csv"
        write_csv(out_dir / fname,
                  f"{axis},v2i_sum_rate_mbps,v2v_fail_prob,v2i_hw,fail_hw",
                  rows)
        outputs.append(fname)
        all_results[name] = results
    write_manifest(out_dir, f"sweep:{axis}", cfg_dict or config_to_dict(cfg),
                   cfg.seeds[0], outputs)
    return all_results


def run_eval(cfg: ExperimentConfig, ckpt: str, seed: int, out_dir: Path,
             cfg_dict: dict | None = None) -> EvalMetrics:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    policy = make_policy_for_checkpoint(cfg, ckpt, seed)
    m = evaluate_in_scenario(cfg, policy, seed)
    write_csv(out_dir / "metrics.csv",
              "seed,v2i_sum_rate_mbps,v2v_fail_prob,mean_reward",
              [(seed, m.v2i_sum_rate_mbps, m.v2v_fail_prob, m.mean_reward)])
    write_manifest(out_dir, "eval", cfg_dict or config_to_dict(cfg), seed,
                   ["metrics.csv"])
    return m


# -- CLI ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="v2xrl",
                                     description="V2X spectrum-sharing "
                                     "RL experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None,
                       help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, required=True)
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE")

    common(sub.add_parser("train", help="train the combined DQN+DDPG agent"))
    p = sub.add_parser("baseline", help="run a baseline solution")
    common(p)
    p.add_argument("--kind", choices=["random", "dqn_quantized"], default=None)
    common(sub.add_parser("meta-train", help="meta-train an initialization"))
    p = sub.add_parser("adapt-eval", help="few-shot adaptation sweep")
    common(p)
    p.add_argument("--ckpt", type=str, required=True)
    p = sub.add_parser("sweep", help="evaluate across vehicles or payload")
    common(p)
    p.add_argument("--axis", choices=["vehicles", "payload"], required=True)
    p.add_argument("--values", type=int, nargs="*", default=None)
    p = sub.add_parser("eval", help="evaluate a checkpoint or random policy")
    common(p)
    p.add_argument("--ckpt", type=str, default="random")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    data = {}
    if args.config:
        with open(args.config) as f:
            data = json.load(f)
    data = apply_overrides(data, args.override)
    try:
        cfg = config_from_dict(data)
    except (ConfigError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    cfg_dict = config_to_dict(cfg)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = Path(args.out)
    if args.command == "train":
        run_train(cfg, seed, out, cfg_dict)
    elif args.command == "baseline":
        run_baseline(cfg, args.kind or cfg.baseline, seed, out, cfg_dict)
    elif args.command == "meta-train":
        run_meta_train(cfg, seed, out, cfg_dict)
    elif args.command == "adapt-eval":
        run_adapt_eval(cfg, Path(args.ckpt), out, cfg_dict=cfg_dict)
    elif args.command == "sweep":
        run_sweep(cfg, args.axis, out, values=args.values, cfg_dict=cfg_dict)
    elif args.command == "eval":
        m = run_eval(cfg, args.ckpt, seed, out, cfg_dict)
        print(f"v2i_sum_rate_mbps={m.v2i_sum_rate_mbps:.6f} "
              f"v2v_fail_prob={m.v2v_fail_prob:.6f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
