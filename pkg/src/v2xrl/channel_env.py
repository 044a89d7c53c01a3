"""V2X world simulator: mobility, fading, interference, rates, payloads.

The world holds M V2I uplinks (one orthogonal sub-band each) and K V2V pairs
that share those sub-bands. Large-scale fading (path loss + log-normal
shadowing) is frozen within a 100-slot segment; small-scale Rayleigh fading
is redrawn every slot. All powers are carried in linear watts.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

MIN_PATH_DISTANCE_M = 3.0  # clamp floor, WINNER validity range


class ScenarioKind(enum.Enum):
    URBAN = "urban"
    HIGHWAY = "highway"
    RURAL = "rural"


class LinkType(enum.Enum):
    V2I = "v2i"  # terminates at the base station
    V2V = "v2v"  # vehicle to vehicle


class GeometryError(ValueError):
    """Vehicle placement could not satisfy the pairing constraint."""


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(w):
    return 10.0 * np.log10(np.maximum(w, 1e-300)) + 30.0


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


@dataclass(frozen=True)
class LaneGeometry:
    """Lane coordinate lists for one scenario layout.

    Vertical lanes carry their x coordinate (up = +y, down = -y); horizontal
    lanes carry their y coordinate (right = +x, left = -x).
    """

    up_lanes: tuple[float, ...]
    down_lanes: tuple[float, ...]
    left_lanes: tuple[float, ...]
    right_lanes: tuple[float, ...]
    width: float
    height: float
    wrap_horizontal: bool = False  # highway: wrap at road ends


def _manhattan_lanes(streets_x, streets_y, lane_width, lanes_per_dir,
                     width, height) -> LaneGeometry:
    up, down, left, right = [], [], [], []
    for x0 in streets_x:
        for i in range(lanes_per_dir):
            x_up = x0 + lane_width * (i + 0.5)
            x_dn = x0 - lane_width * (i + 0.5)
            if 0.0 <= x_up <= width:
                up.append(x_up)
            if 0.0 <= x_dn <= width:
                down.append(x_dn)
    for y0 in streets_y:
        for i in range(lanes_per_dir):
            y_r = y0 + lane_width * (i + 0.5)
            y_l = y0 - lane_width * (i + 0.5)
            if 0.0 <= y_r <= height:
                right.append(y_r)
            if 0.0 <= y_l <= height:
                left.append(y_l)
    return LaneGeometry(tuple(up), tuple(down), tuple(left), tuple(right),
                        width, height)


@dataclass(frozen=True)
class ScenarioConfig:
    kind: ScenarioKind
    num_v2i: int
    num_v2v: int
    lane_geometry: LaneGeometry
    bs_position: tuple[float, float]
    bs_height_m: float
    vehicle_speed_kmh: float
    carrier_freq_ghz: float = 2.0
    subband_bandwidth_hz: float = 1e6
    noise_power_dbm: float = -114.0
    v2i_tx_power_dbm: float = 35.0
    v2v_max_power_dbm: float = 23.0
    vehicle_height_m: float = 1.5
    shadow_sigma_v2i_db: float = 8.0
    shadow_sigma_v2v_db: float = 3.0
    bs_antenna_gain_db: float = 8.0
    bs_noise_figure_db: float = 5.0
    veh_antenna_gain_db: float = 3.0
    veh_noise_figure_db: float = 9.0
    pairing_radius_m: float = 150.0
    turn_probability: float = 0.4
    payload_bits: float = 1060 * 8
    slot_duration_s: float = 1e-3
    max_latency_s: float = 0.1
    # urban LOS rule: same straight corridor iff one Manhattan leg is within
    # the street half-width
    street_half_width_m: float = 7.0

    def __post_init__(self):
        if self.num_v2i < 1 or self.num_v2v < 1:
            raise ValueError("need at least one V2I link and one V2V pair")
        if self.subband_bandwidth_hz <= 0:
            raise ValueError("sub-band bandwidth must be positive")
        if self.max_power_w <= 0:
            raise ValueError("max V2V power must be positive")
        for name in ("noise_power_dbm", "v2i_tx_power_dbm", "v2v_max_power_dbm",
                     "shadow_sigma_v2i_db", "shadow_sigma_v2v_db"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def max_power_w(self) -> float:
        return dbm_to_watts(self.v2v_max_power_dbm)

    @property
    def v2i_power_w(self) -> float:
        return dbm_to_watts(self.v2i_tx_power_dbm)

    @property
    def noise_power_w(self) -> float:
        return dbm_to_watts(self.noise_power_dbm)

    @property
    def window_slots(self) -> int:
        return int(round(self.max_latency_s / self.slot_duration_s))


def urban_scenario(num_v2i: int = 4, num_v2v: int = 4, **overrides) -> ScenarioConfig:
    """Manhattan layout: 3x3 grid of 250 m x 433 m blocks, 2 lanes of 3.5 m."""
    width, height = 750.0, 1299.0
    lanes = _manhattan_lanes(streets_x=(0.0, 250.0, 500.0, 750.0),
                             streets_y=(0.0, 433.0, 866.0, 1299.0),
                             lane_width=3.5, lanes_per_dir=2,
                             width=width, height=height)
    cfg = ScenarioConfig(kind=ScenarioKind.URBAN, num_v2i=num_v2i,
                         num_v2v=num_v2v, lane_geometry=lanes,
                         bs_position=(width / 2, height / 2), bs_height_m=25.0,
                         vehicle_speed_kmh=50.0)
    return replace(cfg, **overrides) if overrides else cfg


def highway_scenario(num_v2i: int = 4, num_v2v: int = 4, **overrides) -> ScenarioConfig:
    """Freeway of 1500 m, 3 lanes of 5 m each direction, BS 35 m offset."""
    offset = 35.0
    right = tuple(offset + 5.0 * (i + 0.5) for i in range(3))
    left = tuple(offset + 15.0 + 5.0 * (i + 0.5) for i in range(3))
    lanes = LaneGeometry(up_lanes=(), down_lanes=(), left_lanes=left,
                         right_lanes=right, width=1500.0, height=offset + 30.0,
                         wrap_horizontal=True)
    cfg = ScenarioConfig(kind=ScenarioKind.HIGHWAY, num_v2i=num_v2i,
                         num_v2v=num_v2v, lane_geometry=lanes,
                         bs_position=(750.0, 0.0), bs_height_m=25.0,
                         vehicle_speed_kmh=120.0)
    return replace(cfg, **overrides) if overrides else cfg


def rural_scenario(num_v2i: int = 4, num_v2v: int = 4, **overrides) -> ScenarioConfig:
    """Like urban but 1000 m blocks, 5 m lanes, taller BS, 108 km/h."""
    width = height = 3000.0
    lanes = _manhattan_lanes(streets_x=(0.0, 1000.0, 2000.0, 3000.0),
                             streets_y=(0.0, 1000.0, 2000.0, 3000.0),
                             lane_width=5.0, lanes_per_dir=2,
                             width=width, height=height)
    cfg = ScenarioConfig(kind=ScenarioKind.RURAL, num_v2i=num_v2i,
                         num_v2v=num_v2v, lane_geometry=lanes,
                         bs_position=(width / 2, height / 2), bs_height_m=35.0,
                         vehicle_speed_kmh=108.0, street_half_width_m=10.0)
    return replace(cfg, **overrides) if overrides else cfg


_PRESETS = {"urban": urban_scenario, "highway": highway_scenario,
            "rural": rural_scenario}


def scenario_by_name(name: str, num_v2i: int, num_v2v: int,
                     **overrides) -> ScenarioConfig:
    try:
        factory = _PRESETS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; "
                         f"expected one of {sorted(_PRESETS)}") from None
    return factory(num_v2i, num_v2v, **overrides)


# -- path loss -----------------------------------------------------------


@dataclass(frozen=True)
class LinkGeometry:
    """Distance descriptor for one link.

    ``corner_legs`` holds the two Manhattan legs (d1, d2) for urban V2V
    paths around a corner; None means line of sight.
    """

    distance_m: float
    corner_legs: tuple[float, float] | None = None


def pathloss_db(kind: ScenarioKind, link_type: LinkType, geom: LinkGeometry,
                carrier_freq_ghz: float = 2.0) -> float:
    """Deterministic path loss in dB; distances clamp at 3 m."""
    d = max(geom.distance_m, MIN_PATH_DISTANCE_M)
    freq_term = 20.0 * math.log10(carrier_freq_ghz / 5.0)
    if kind is ScenarioKind.RURAL:
        return 44.2 + 21.5 * math.log10(d) + freq_term
    if link_type is LinkType.V2I:
        return 128.1 + 37.6 * math.log10(d / 1000.0)
    if geom.corner_legs is None:
        return 22.7 * math.log10(d) + 41.0 + freq_term
    d1 = max(geom.corner_legs[0], MIN_PATH_DISTANCE_M)
    d2 = max(geom.corner_legs[1], MIN_PATH_DISTANCE_M)
    pl_los = 22.7 * math.log10(d1) + 41.0 + freq_term
    n_j = max(2.8 - 0.0024 * d1, 1.84)
    return pl_los + 20.0 - 12.5 * n_j + 10.0 * n_j * math.log10(d2)


# -- vehicles and mobility -------------------------------------------------

_HEADINGS = {"u": (0.0, 1.0), "d": (0.0, -1.0), "l": (-1.0, 0.0), "r": (1.0, 0.0)}


@dataclass
class VehicleState:
    position: np.ndarray  # (2,) meters
    direction: str        # one of u/d/l/r
    speed_mps: float
    lane_id: int          # index into the flattened lane table

    @property
    def heading(self) -> np.ndarray:
        return np.asarray(_HEADINGS[self.direction])


@dataclass
class Decision:
    """Joint V2V action: one sub-band index and one transmit power per pair."""

    subband: np.ndarray  # (K,) int in [0, M)
    power_w: np.ndarray  # (K,) float in [0, P_max]

    def validate(self, num_subbands: int, max_power_w: float) -> None:
        sb = np.asarray(self.subband)
        pw = np.asarray(self.power_w)
        if sb.min() < 0 or sb.max() >= num_subbands:
            raise ValueError("sub-band index out of range")
        if pw.min() < 0 or pw.max() > max_power_w * (1 + 1e-12):
            raise ValueError("power outside [0, P_max]")


@dataclass
class LinkRates:
    v2i_sinr: np.ndarray  # (M,) linear
    v2v_sinr: np.ndarray  # (K,) linear, on each pair's chosen sub-band
    v2i_rate: np.ndarray  # (M,) bits/s
    v2v_rate: np.ndarray  # (K,) bits/s


@dataclass
class ChannelGains:
    """Composed (large x small scale) linear power gains."""

    h_mB: np.ndarray   # (M,)   V2I transmitter -> BS, own band
    g_kk: np.ndarray   # (K,M)  V2V own link per band
    g_kB: np.ndarray   # (K,M)  V2V transmitter -> BS per band
    h_mk: np.ndarray   # (M,K)  V2I transmitter m -> V2V receiver k, band m
    g_jk: np.ndarray   # (K,K,M) V2V transmitter j -> V2V receiver k per band


class PayloadTracker:
    """Per-pair delivery accounting against the latency budget.

    Each delivery starts with ``payload_bits`` remaining and a window of
    ``window_slots`` slots. On completion or timeout an outcome flag is
    recorded. By default a pair that delivers early stays silent (zero
    power) for the rest of its window and contributes its last spectral
    efficiency as a reward bonus (see mdp.reward); the next delivery starts
    at the slot after the window closes. With ``idle_after_success=False``
    a fresh delivery instead starts immediately at the next slot.
    """

    def __init__(self, num_links: int, payload_bits: float, window_slots: int,
                 slot_duration_s: float, start_slots=None,
                 idle_after_success: bool = True):
        self.num_links = num_links
        self.payload_bits = float(payload_bits)
        self.window_slots = int(window_slots)
        self.slot_duration_s = float(slot_duration_s)
        self.idle_after_success = idle_after_success
        self.start_slots = np.zeros(num_links, dtype=int) if start_slots is None \
            else np.asarray(start_slots, dtype=int)
        self.remaining_bits = np.full(num_links, self.payload_bits)
        self.remaining_slots = np.full(num_links, self.window_slots, dtype=int)
        self.success_flags: list[list[int]] = [[] for _ in range(num_links)]
        self.attempts = np.zeros(num_links, dtype=int)
        self.idle = np.zeros(num_links, dtype=bool)
        self.last_se = np.zeros(num_links)

    def reset(self) -> None:
        self.remaining_bits[:] = self.payload_bits
        self.remaining_slots[:] = self.window_slots
        self.idle[:] = False

    def active(self) -> np.ndarray:
        return ~self.idle

    def load_fraction(self) -> np.ndarray:
        if self.payload_bits == 0:
            return np.zeros(self.num_links)
        return self.remaining_bits / self.payload_bits

    def time_fraction(self) -> np.ndarray:
        return self.remaining_slots / self.window_slots

    def elapsed_fraction(self, k: int) -> float:
        return (self.window_slots - self.remaining_slots[k]) / self.window_slots

    def advance(self, v2v_rates: np.ndarray, slot: int,
                bandwidth_hz: float = 1.0) -> list[tuple[int, int]]:
        """Advance one slot; returns (link, outcome) for completed attempts."""
        events = []
        rates = np.asarray(v2v_rates, dtype=float)
        for k in range(self.num_links):
            if slot < self.start_slots[k]:
                continue
            if self.idle[k]:
                self.remaining_slots[k] -= 1
                if self.remaining_slots[k] <= 0:
                    self._restart(k)
                continue
            self.remaining_bits[k] = max(
                0.0, self.remaining_bits[k] - self.slot_duration_s * rates[k])
            self.remaining_slots[k] -= 1
            if self.remaining_bits[k] <= 0.0:
                self.success_flags[k].append(1)
                self.attempts[k] += 1
                self.last_se[k] = rates[k] / bandwidth_hz
                events.append((k, 1))
                if self.idle_after_success and self.remaining_slots[k] > 0:
                    self.idle[k] = True
                else:
                    self._restart(k)
            elif self.remaining_slots[k] <= 0:
                self.success_flags[k].append(0)
                self.attempts[k] += 1
                events.append((k, 0))
                self._restart(k)
        return events

    def _restart(self, k: int) -> None:
        self.remaining_bits[k] = self.payload_bits
        self.remaining_slots[k] = self.window_slots
        self.idle[k] = False

    def recorded(self) -> tuple[int, int]:
        succ = sum(sum(f) for f in self.success_flags)
        total = sum(len(f) for f in self.success_flags)
        return succ, total


def success_probability(trackers) -> float:
    """Fraction of recorded deliveries that met the latency budget."""
    if isinstance(trackers, PayloadTracker):
        trackers = [trackers]
    succ = total = 0
    for tr in trackers:
        s, t = tr.recorded()
        succ += s
        total += t
    if total == 0:
        raise ValueError("no completed delivery attempts recorded")
    return succ / total


# -- the environment -------------------------------------------------------


_PLACE_V2I, _PLACE_TX, _PLACE_RX = 0, 1, 2
_MOB, _SHADOW, _FADE = 3, 4, 5


class Environment:
    """Mutable V2X world; single-threaded, owned by one run.

    Every random stream is keyed per entity or per link, so a world built
    with more V2V pairs is a strict superset of the smaller world under the
    same seed: shared vehicles, shadowing, and fading realizations match.
    """

    def __init__(self, cfg: ScenarioConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.slot = 0

        lanes = cfg.lane_geometry
        self._lane_table = ([("u", x) for x in lanes.up_lanes]
                            + [("d", x) for x in lanes.down_lanes]
                            + [("l", y) for y in lanes.left_lanes]
                            + [("r", y) for y in lanes.right_lanes])
        if not self._lane_table:
            raise GeometryError("scenario has no lanes")

        M, K = cfg.num_v2i, cfg.num_v2v
        self.v2i_vehicles = [
            self._spawn_vehicle(self._stream(_PLACE_V2I, m)) for m in range(M)]
        self.v2v_tx = [
            self._spawn_vehicle(self._stream(_PLACE_TX, k)) for k in range(K)]
        self.v2v_rx = [
            self._spawn_receiver(self.v2v_tx[k], self._stream(_PLACE_RX, k))
            for k in range(K)]
        self._mob_rngs = (
            [self._stream(_MOB, 0, m) for m in range(M)]
            + [self._stream(_MOB, 1, k) for k in range(K)]
            + [self._stream(_MOB, 2, k) for k in range(K)])
        self._sh_mB = self._stream(_SHADOW, 0)
        self._sh_kB = [self._stream(_SHADOW, 1, k) for k in range(K)]
        self._sh_kk = [self._stream(_SHADOW, 2, k) for k in range(K)]
        self._sh_mk = [self._stream(_SHADOW, 3, k) for k in range(K)]
        self._sh_jk = [[self._stream(_SHADOW, 4, j, k) for k in range(K)]
                       for j in range(K)]
        self._fd_mB = self._stream(_FADE, 0)
        self._fd_kk = [self._stream(_FADE, 1, k) for k in range(K)]
        self._fd_kB = [self._stream(_FADE, 2, k) for k in range(K)]
        self._fd_mk = [self._stream(_FADE, 3, k) for k in range(K)]
        self._fd_jk = [[self._stream(_FADE, 4, j, k) for k in range(K)]
                       for j in range(K)]

        M, K = cfg.num_v2i, cfg.num_v2v
        self.alpha_mB = np.zeros(M)
        self.alpha_kk = np.zeros(K)
        self.alpha_kB = np.zeros(K)
        self.alpha_mk = np.zeros((M, K))
        self.alpha_jk = np.zeros((K, K))
        self.fade_mB = np.ones(M)
        self.fade_kk = np.ones((K, M))
        self.fade_kB = np.ones((K, M))
        self.fade_mk = np.ones((M, K))
        self.fade_jk = np.ones((K, K, M))

        self.tracker = PayloadTracker(K, cfg.payload_bits, cfg.window_slots,
                                      cfg.slot_duration_s)
        self.update_large_scale()
        self.update_small_scale()

    # -- rng streams and placement --

    def _stream(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=key)
        return np.random.default_rng(ss)

    def _random_lane_point(self, rng: np.random.Generator):
        lane_id = int(rng.integers(len(self._lane_table)))
        orient, coord = self._lane_table[lane_id]
        lanes = self.cfg.lane_geometry
        if orient in ("u", "d"):
            pos = np.array([coord, rng.uniform(0.0, lanes.height)])
        else:
            pos = np.array([rng.uniform(0.0, lanes.width), coord])
        return pos, orient, lane_id

    def _spawn_vehicle(self, rng: np.random.Generator) -> VehicleState:
        pos, orient, lane_id = self._random_lane_point(rng)
        return VehicleState(position=pos, direction=orient,
                            speed_mps=self.cfg.vehicle_speed_kmh / 3.6,
                            lane_id=lane_id)

    def _spawn_receiver(self, tx: VehicleState, rng: np.random.Generator,
                        max_tries: int = 200) -> VehicleState:
        for _ in range(max_tries):
            pos, orient, lane_id = self._random_lane_point(rng)
            if np.linalg.norm(pos - tx.position) <= self.cfg.pairing_radius_m:
                return VehicleState(position=pos, direction=orient,
                                    speed_mps=self.cfg.vehicle_speed_kmh / 3.6,
                                    lane_id=lane_id)
        raise GeometryError(
            f"no receiver lane point within {self.cfg.pairing_radius_m} m "
            f"after {max_tries} tries; geometry too sparse")

    def _all_vehicles(self) -> list[VehicleState]:
        return self.v2i_vehicles + self.v2v_tx + self.v2v_rx

    # -- mobility --

    def step_mobility(self, dt_s: float) -> None:
        """Constant-speed lane motion; grid turns in urban/rural, wrap on
        the highway."""
        if dt_s == 0:
            return
        for veh, rng in zip(self._all_vehicles(), self._mob_rngs):
            if self.cfg.lane_geometry.wrap_horizontal:
                self._advance_highway(veh, dt_s)
            else:
                self._advance_grid(veh, dt_s, rng)

    def _advance_highway(self, veh: VehicleState, dt_s: float) -> None:
        width = self.cfg.lane_geometry.width
        step = veh.speed_mps * dt_s
        x = veh.position[0] + (step if veh.direction == "r" else -step)
        veh.position[0] = x % width

    def _advance_grid(self, veh: VehicleState, dt_s: float,
                      rng: np.random.Generator) -> None:
        lanes = self.cfg.lane_geometry
        step = veh.speed_mps * dt_s
        x, y = veh.position
        d = veh.direction
        # turn with fixed probability at the first intersection crossed
        if d in ("u", "d"):
            sgn = 1.0 if d == "u" else -1.0
            y_new = y + sgn * step
            crossings = [cy for cy in sorted(set(lanes.left_lanes + lanes.right_lanes))
                         if min(y, y_new) < cy <= max(y, y_new)]
            if d == "d":
                crossings = crossings[::-1]
            for cy in crossings:
                if rng.uniform() < self.cfg.turn_probability:
                    overshoot = abs(y_new - cy)
                    turn_right = rng.uniform() < 0.5
                    veh.direction = "r" if turn_right else "l"
                    veh.position = np.array(
                        [x + overshoot if turn_right else x - overshoot, cy])
                    self._clip_into_bounds(veh)
                    return
            veh.position = np.array([x, y_new])
        else:
            sgn = 1.0 if d == "r" else -1.0
            x_new = x + sgn * step
            crossings = [cx for cx in sorted(set(lanes.up_lanes + lanes.down_lanes))
                         if min(x, x_new) < cx <= max(x, x_new)]
            if d == "l":
                crossings = crossings[::-1]
            for cx in crossings:
                if rng.uniform() < self.cfg.turn_probability:
                    overshoot = abs(x_new - cx)
                    turn_up = rng.uniform() < 0.5
                    veh.direction = "u" if turn_up else "d"
                    veh.position = np.array(
                        [cx, y + overshoot if turn_up else y - overshoot])
                    self._clip_into_bounds(veh)
                    return
            veh.position = np.array([x_new, y])
        self._clip_into_bounds(veh)

    def _clip_into_bounds(self, veh: VehicleState) -> None:
        # leaving the canvas redirects the vehicle clockwise along the edge
        lanes = self.cfg.lane_geometry
        x, y = veh.position
        if 0.0 <= x <= lanes.width and 0.0 <= y <= lanes.height:
            return
        x = min(max(x, 0.0), lanes.width)
        y = min(max(y, 0.0), lanes.height)
        if veh.direction == "u" and lanes.right_lanes:
            veh.direction = "r"
            y = max(lanes.right_lanes)
        elif veh.direction == "d" and lanes.left_lanes:
            veh.direction = "l"
            y = min(lanes.left_lanes)
        elif veh.direction == "l" and lanes.up_lanes:
            veh.direction = "u"
            x = min(lanes.up_lanes)
        elif veh.direction == "r" and lanes.down_lanes:
            veh.direction = "d"
            x = max(lanes.down_lanes)
        veh.position = np.array([x, y])

    # -- fading --

    def _bs_distance(self, veh: VehicleState) -> float:
        dx = veh.position - np.asarray(self.cfg.bs_position)
        dz = self.cfg.bs_height_m - self.cfg.vehicle_height_m
        return float(np.sqrt(dx @ dx + dz * dz))

    def _v2v_geometry(self, a: VehicleState, b: VehicleState) -> LinkGeometry:
        delta = np.abs(a.position - b.position)
        dist = float(np.hypot(delta[0], delta[1]))
        if (self.cfg.kind is ScenarioKind.URBAN
                and min(delta) > self.cfg.street_half_width_m):
            return LinkGeometry(dist, corner_legs=(float(delta[0]), float(delta[1])))
        return LinkGeometry(dist)

    def _pl_to_bs(self, veh: VehicleState) -> float:
        return pathloss_db(self.cfg.kind, LinkType.V2I,
                           LinkGeometry(self._bs_distance(veh)),
                           self.cfg.carrier_freq_ghz)

    def _pl_v2v(self, a: VehicleState, b: VehicleState) -> float:
        return pathloss_db(self.cfg.kind, LinkType.V2V, self._v2v_geometry(a, b),
                           self.cfg.carrier_freq_ghz)

    def update_large_scale(self) -> None:
        """Refresh path loss + shadowing from current positions (per segment)."""
        cfg = self.cfg
        M, K = cfg.num_v2i, cfg.num_v2v
        bs_budget = cfg.veh_antenna_gain_db + cfg.bs_antenna_gain_db \
            - cfg.bs_noise_figure_db
        vv_budget = 2 * cfg.veh_antenna_gain_db - cfg.veh_noise_figure_db
        s_i, s_v = cfg.shadow_sigma_v2i_db, cfg.shadow_sigma_v2v_db
        shadow_mB = self._sh_mB.normal(0.0, s_i, M)
        for m in range(M):
            pl = self._pl_to_bs(self.v2i_vehicles[m])
            self.alpha_mB[m] = 10 ** ((-pl - shadow_mB[m] + bs_budget) / 10.0)
        for k in range(K):
            pl = self._pl_to_bs(self.v2v_tx[k])
            shadow = self._sh_kB[k].normal(0.0, s_i)
            self.alpha_kB[k] = 10 ** ((-pl - shadow + bs_budget) / 10.0)
        for k in range(K):
            pl = self._pl_v2v(self.v2v_tx[k], self.v2v_rx[k])
            shadow = self._sh_kk[k].normal(0.0, s_v)
            self.alpha_kk[k] = 10 ** ((-pl - shadow + vv_budget) / 10.0)
        for k in range(K):
            shadow = self._sh_mk[k].normal(0.0, s_v, M)
            for m in range(M):
                pl = self._pl_v2v(self.v2i_vehicles[m], self.v2v_rx[k])
                self.alpha_mk[m, k] = 10 ** ((-pl - shadow[m] + vv_budget) / 10.0)
        for j in range(K):
            for k in range(K):
                pl = self._pl_v2v(self.v2v_tx[j], self.v2v_rx[k])
                shadow = self._sh_jk[j][k].normal(0.0, s_v)
                self.alpha_jk[j, k] = 10 ** ((-pl - shadow + vv_budget) / 10.0)

    def update_small_scale(self) -> None:
        """Redraw Rayleigh power fading, i.i.d. exponential with unit mean."""
        M, K = self.cfg.num_v2i, self.cfg.num_v2v
        self.fade_mB = self._fd_mB.exponential(1.0, M)
        for k in range(K):
            self.fade_kk[k] = self._fd_kk[k].exponential(1.0, M)
            self.fade_kB[k] = self._fd_kB[k].exponential(1.0, M)
            self.fade_mk[:, k] = self._fd_mk[k].exponential(1.0, M)
            for j in range(K):
                self.fade_jk[j, k] = self._fd_jk[j][k].exponential(1.0, M)

    def gains(self) -> ChannelGains:
        return ChannelGains(
            h_mB=self.alpha_mB * self.fade_mB,
            g_kk=self.alpha_kk[:, None] * self.fade_kk,
            g_kB=self.alpha_kB[:, None] * self.fade_kB,
            h_mk=self.alpha_mk * self.fade_mk,
            g_jk=self.alpha_jk[:, :, None] * self.fade_jk,
        )

    # -- interference, SINR, rates --

    def effective_power(self, decision: Decision) -> np.ndarray:
        """Decision powers with idle (already-delivered) pairs muted."""
        return np.asarray(decision.power_w, dtype=float) * self.tracker.active()

    def interference_received(self, decision: Decision,
                              gains: ChannelGains | None = None) -> np.ndarray:
        """(K, M) interference-plus-noise power at each V2V receiver."""
        g = gains or self.gains()
        cfg = self.cfg
        K, M = cfg.num_v2v, cfg.num_v2i
        p = self.effective_power(decision)
        sb = np.asarray(decision.subband, dtype=int)
        rho = np.zeros((K, M))
        rho[np.arange(K), sb] = 1.0
        # V2I transmitter m interferes on band m at every V2V receiver
        interf = (cfg.v2i_power_w * g.h_mk).T.copy()  # (K, M)
        # peer V2V interference: sum over j != k sharing the band
        contrib = (rho * p[:, None])[:, None, :] * g.g_jk  # (j, k, m)
        total = contrib.sum(axis=0)
        own = contrib[np.arange(K), np.arange(K), :]
        interf += total - own
        return interf + cfg.noise_power_w

    def compute_sinr(self, decision: Decision,
                     gains: ChannelGains | None = None) -> LinkRates:
        """Linear SINRs for the joint decision (rates left zero)."""
        g = gains or self.gains()
        cfg = self.cfg
        K, M = cfg.num_v2v, cfg.num_v2i
        decision.validate(M, cfg.max_power_w)
        p = self.effective_power(decision)
        sb = np.asarray(decision.subband, dtype=int)
        rho = np.zeros((K, M))
        rho[np.arange(K), sb] = 1.0
        v2i_interf = (rho * p[:, None] * g.g_kB).sum(axis=0)  # (M,)
        v2i_sinr = cfg.v2i_power_w * g.h_mB / (v2i_interf + cfg.noise_power_w)
        denom = self.interference_received(decision, g)[np.arange(K), sb]
        v2v_sinr = p * g.g_kk[np.arange(K), sb] / denom
        return LinkRates(v2i_sinr=v2i_sinr, v2v_sinr=v2v_sinr,
                         v2i_rate=np.zeros(M), v2v_rate=np.zeros(K))

    def advance_payloads(self, rates: LinkRates) -> list[tuple[int, int]]:
        events = self.tracker.advance(rates.v2v_rate, self.slot,
                                      self.cfg.subband_bandwidth_hz)
        self.slot += 1
        return events

    def reset_payloads(self) -> None:
        self.tracker.reset()

    def advance_segment(self, dt_s: float = 0.1) -> None:
        """Move vehicles and refresh large-scale fading (100-slot cadence)."""
        self.step_mobility(dt_s)
        self.update_large_scale()

    # -- fixtures --

    def to_json(self) -> str:
        def veh(v):
            return {"position": v.position.tolist(), "direction": v.direction,
                    "speed_mps": v.speed_mps, "lane_id": v.lane_id}

        state = {
            "kind": self.cfg.kind.value,
            "seed": self.seed,
            "slot": self.slot,
            "v2i_vehicles": [veh(v) for v in self.v2i_vehicles],
            "v2v_tx": [veh(v) for v in self.v2v_tx],
            "v2v_rx": [veh(v) for v in self.v2v_rx],
            "alpha_mB": self.alpha_mB.tolist(),
            "alpha_kk": self.alpha_kk.tolist(),
            "alpha_kB": self.alpha_kB.tolist(),
            "alpha_mk": self.alpha_mk.tolist(),
            "alpha_jk": self.alpha_jk.tolist(),
            "fade_mB": self.fade_mB.tolist(),
            "remaining_bits": self.tracker.remaining_bits.tolist(),
            "remaining_slots": self.tracker.remaining_slots.tolist(),
        }
        return json.dumps(state, sort_keys=True)


def build_scenario(cfg: ScenarioConfig, seed: int) -> Environment:
    """Place vehicles, form V2V pairs, and initialize all fading fields."""
    return Environment(cfg, seed)


def compute_rates(rates: LinkRates, bandwidth_hz: float) -> LinkRates:
    """Shannon rates from SINRs: R = W*log2(1+sinr), per link."""
    return LinkRates(
        v2i_sinr=rates.v2i_sinr,
        v2v_sinr=rates.v2v_sinr,
        v2i_rate=bandwidth_hz * np.log2(1.0 + rates.v2i_sinr),
        v2v_rate=bandwidth_hz * np.log2(1.0 + rates.v2v_sinr),
    )
