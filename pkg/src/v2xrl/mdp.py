"""Per-agent observation vector, reward scalar, and action descriptors.

Observations are length 6M+2: four gain blocks, the previous-slot received
interference, the previous-slot neighbor sub-band counts, the remaining load
fraction, and the remaining time fraction. Gains are normalized from dB,
interference from dBm, both onto [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel_env import Environment, LinkRates, PayloadTracker, watts_to_dbm

GAIN_DB_LOW = -120.0
GAIN_DB_SPAN = 60.0
INTERF_DBM_LOW = -114.0
INTERF_DBM_SPAN = 60.0


@dataclass(frozen=True)
class RewardWeights:
    v2i: float = 0.1
    v2v: float = 0.9
    latency: float = 1.0

    def __post_init__(self):
        if min(self.v2i, self.v2v, self.latency) < 0:
            raise ValueError("reward weights must be non-negative")


@dataclass(frozen=True)
class ActionDescriptor:
    """Hybrid action space: M-way discrete sub-band + scalar power."""

    subband_count: int
    max_power_w: float

    @property
    def dimension(self) -> int:
        return self.subband_count + 1


@dataclass
class PrevSlotRecords:
    """One-slot-delayed interference and sub-band selections (zeros at
    episode start)."""

    interference_w: np.ndarray | None = None  # (K, M) watts
    subbands: np.ndarray | None = None        # (K,) int

    @classmethod
    def initial(cls) -> "PrevSlotRecords":
        return cls()


def observation_length(num_subbands: int) -> int:
    return 6 * num_subbands + 2


def normalize_gain_db(x_db):
    return np.clip((np.asarray(x_db, dtype=float) - GAIN_DB_LOW) / GAIN_DB_SPAN,
                   0.0, 1.0)


def normalize_interference_dbm(x_dbm):
    return np.clip((np.asarray(x_dbm, dtype=float) - INTERF_DBM_LOW)
                   / INTERF_DBM_SPAN, 0.0, 1.0)


def _gain_block_db(linear):
    return 10.0 * np.log10(np.maximum(linear, 1e-300))


def observe_all(env: Environment, prev: PrevSlotRecords) -> np.ndarray:
    """(K, 6M+2) observation matrix for all agents at the current slot."""
    cfg = env.cfg
    K, M = cfg.num_v2v, cfg.num_v2i
    g = env.gains()
    own = normalize_gain_db(_gain_block_db(g.g_kk))            # (K, M)
    v2i_interf = normalize_gain_db(_gain_block_db(g.h_mk.T))   # (K, M)
    agg = g.g_jk.sum(axis=0) - g.g_jk[np.arange(K), np.arange(K), :]
    agg_v2v = normalize_gain_db(_gain_block_db(agg))           # (K, M)
    own_bs = normalize_gain_db(_gain_block_db(g.g_kB))         # (K, M)

    if prev.interference_w is None:
        interf = np.zeros((K, M))
    else:
        interf = normalize_interference_dbm(watts_to_dbm(prev.interference_w))
    if prev.subbands is None or K == 1:
        neigh = np.zeros((K, M))
    else:
        counts = np.zeros((K, M))
        one_hot = np.zeros((K, M))
        one_hot[np.arange(K), np.asarray(prev.subbands, dtype=int)] = 1.0
        counts[:] = one_hot.sum(axis=0)[None, :] - one_hot
        neigh = counts / (K - 1)

    load = env.tracker.load_fraction()[:, None]
    time = env.tracker.time_fraction()[:, None]
    return np.concatenate(
        [own, v2i_interf, agg_v2v, own_bs, interf, neigh, load, time], axis=1)


def observe(env: Environment, agent_k: int, prev: PrevSlotRecords) -> np.ndarray:
    """Observation vector of Eq.-style layout for one agent (length 6M+2)."""
    return observe_all(env, prev)[agent_k]


def _spectral_efficiency_sums(rates: LinkRates, tracker: PayloadTracker,
                              bandwidth_hz: float) -> tuple[float, float]:
    se_v2i = float(np.sum(rates.v2i_rate) / bandwidth_hz)
    live = rates.v2v_rate / bandwidth_hz
    se_v2v = float(np.sum(np.where(tracker.idle, tracker.last_se, live)))
    return se_v2i, se_v2v


def reward(rates: LinkRates, tracker: PayloadTracker, weights: RewardWeights,
           agent_k: int, bandwidth_hz: float) -> float:
    """Immediate reward for one agent at the current slot.

    Sums the V2I and V2V spectral efficiencies (pairs idle after an early
    delivery contribute their stored bonus), minus the agent's elapsed
    fraction of the latency window. Call before advancing payloads.
    """
    se_v2i, se_v2v = _spectral_efficiency_sums(rates, tracker, bandwidth_hz)
    penalty = tracker.elapsed_fraction(agent_k)
    return weights.v2i * se_v2i + weights.v2v * se_v2v - weights.latency * penalty


def reward_all(rates: LinkRates, tracker: PayloadTracker,
               weights: RewardWeights, bandwidth_hz: float) -> np.ndarray:
    """Vector of per-agent rewards (shared rate terms computed once)."""
    se_v2i, se_v2v = _spectral_efficiency_sums(rates, tracker, bandwidth_hz)
    base = weights.v2i * se_v2i + weights.v2v * se_v2v
    elapsed = (tracker.window_slots - tracker.remaining_slots) / tracker.window_slots
    return base - weights.latency * elapsed


def discounted_return(rewards, gamma: float) -> float:
    """Sum of gamma**i * r_i over the finite reward sequence."""
    total = 0.0
    factor = 1.0
    for r in rewards:
        total += factor * r
        factor *= gamma
    return total
