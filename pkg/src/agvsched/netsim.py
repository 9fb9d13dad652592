"""Slotted contention channel with multi-link uplink and reliable broadcast.

Each transmitting AGV sends identical copies of one report on ``S`` of ``C``
channels. A copy survives when nobody else used its channel and an
independent per-copy error (probability ``sigma``) did not hit it. Nothing is
retransmitted or acknowledged.
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

from ._kernels import channel_mc_kernel


class MalformedChannelSet(ValueError):
    pass


class Traffic(str, enum.Enum):
    BERNOULLI = "bernoulli"
    PERIODIC = "periodic"


@dataclass(frozen=True)
class ChannelConfig:
    C: int = 60
    S: int = 2
    D: int = 2
    sigma: float = 0.0
    traffic: Traffic = Traffic.BERNOULLI

    def __post_init__(self):
        if self.C < 1:
            raise ValueError("C must be >= 1")
        if not 1 <= self.S <= self.C:
            raise ValueError("S must satisfy 1 <= S <= C")
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if not 0.0 <= self.sigma < 1.0:
            raise ValueError("sigma must be in [0, 1)")
        object.__setattr__(self, "traffic", Traffic(self.traffic))

    @property
    def p_t(self) -> float:
        return 1.0 / self.D


class PacketKind(str, enum.Enum):
    STATE = "state"
    ROUTE = "route"
    GLOBAL_MAP = "global_map"
    TASK_ROUTE = "task_route"

    @property
    def uplink(self) -> bool:
        return self in (PacketKind.STATE, PacketKind.ROUTE)


# nominal sizes in bytes; carried as metadata only
PACKET_SIZES = {PacketKind.STATE: 32, PacketKind.ROUTE: 256,
                PacketKind.GLOBAL_MAP: 4096, PacketKind.TASK_ROUTE: 128}


@dataclass
class Packet:
    kind: PacketKind
    src: int
    created_at: int
    payload: Any = None
    size: int = 0

    def __post_init__(self):
        self.kind = PacketKind(self.kind)
        if not self.size:
            self.size = PACKET_SIZES[self.kind]


@dataclass
class SlotOutcome:
    attempted: set[int] = field(default_factory=set)
    delivered: set[int] = field(default_factory=set)
    channels: dict[int, tuple[int, ...]] = field(default_factory=dict)


def _comb(n: int, k: int) -> int:
    return math.comb(n, k) if 0 <= k <= n else 0


@functools.lru_cache(maxsize=256)
def _hit_matrix(C: int, S: int, p_t: float) -> np.ndarray:
    """One other AGV's effect on how many of our S channels are taken.

    Row j, column j + h: it stays silent (h = 0) or transmits and its S
    random channels land on h of our S - j still-free ones.
    """
    total = math.comb(C, S)
    T = np.zeros((S + 1, S + 1))
    for j in range(S + 1):
        T[j, j] += 1.0 - p_t
        for h in range(S - j + 1):
            T[j, j + h] += p_t * _comb(S - j, h) * _comb(C - S + j, S - h) / total
    T.flags.writeable = False
    return T


def p_success_analytic(K: int, config: ChannelConfig, p_t: float | None = None) -> float:
    """Probability that a given AGV transmits in a slot and gets through.

    The other K - 1 AGVs act independently, so the number of our channels
    they collide with follows a small Markov chain; every term is a
    probability, which keeps the result accurate for large S where an
    alternating sum would cancel. With ``sigma > 0`` each clean copy is
    still lost with probability sigma.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    C, S = config.C, config.S
    pt = config.p_t if p_t is None else p_t
    if pt == 0.0:
        return 0.0
    dist = np.zeros(S + 1)
    dist[0] = 1.0
    if K > 1:
        dist = dist @ np.linalg.matrix_power(_hit_matrix(C, S, pt), K - 1)
    free = np.arange(S, -1, -1)  # clean copies left when j channels are hit
    ok = 1.0 - config.sigma ** free if config.sigma else (free > 0).astype(float)
    return float(pt * (dist @ ok))


def throughput_analytic(K: int, config: ChannelConfig) -> float:
    return K * p_success_analytic(K, config)


def crossover_k(C: int, D: int, multi_s: int = 2, k_max: int = 1000) -> int | None:
    """Smallest K at which single-link throughput beats ``multi_s`` links."""
    one = ChannelConfig(C=C, S=1, D=D)
    many = ChannelConfig(C=C, S=multi_s, D=D)
    for K in range(1, k_max + 1):
        if throughput_analytic(K, one) > throughput_analytic(K, many):
            return K
    return None


def choose_channels(agv_ids: Iterable[int], config: ChannelConfig,
                    rng: np.random.Generator) -> dict[int, tuple[int, ...]]:
    out = {}
    for k in agv_ids:
        pick = rng.choice(config.C, size=config.S, replace=False)
        out[k] = tuple(sorted(int(c) for c in pick))
    return out


def simulate_slot(choices: Mapping[int, Iterable[int]], config: ChannelConfig,
                  rng: np.random.Generator) -> SlotOutcome:
    """Resolve one slot of uplink contention for the given channel choices."""
    chans = {}
    usage: dict[int, int] = {}
    for k, cs in choices.items():
        cs = tuple(cs)
        if len(cs) != config.S or len(set(cs)) != config.S or \
                any(not 0 <= c < config.C for c in cs):
            raise MalformedChannelSet(f"AGV {k}: need {config.S} distinct channels in [0, {config.C})")
        chans[k] = cs
        for c in cs:
            usage[c] = usage.get(c, 0) + 1
    out = SlotOutcome(attempted=set(chans), channels=chans)
    for k in sorted(chans):
        alive = [c for c in chans[k] if usage[c] == 1]
        if config.sigma > 0.0 and alive:
            draws = rng.random(len(alive))
            alive = [c for c, u in zip(alive, draws) if u >= config.sigma]
        if alive:
            out.delivered.add(k)
    return out


def periodic_phase(agv_id: int, D: int) -> int:
    # spread phases so that AGVs do not all report on the same slot
    return (agv_id * 7919) % D


def schedule_traffic(agv_ids: Iterable[int], slot: int, config: ChannelConfig,
                     rng: np.random.Generator) -> list[int]:
    """AGV ids that attempt an uplink report in ``slot``."""
    ids = sorted(agv_ids)
    if config.traffic is Traffic.PERIODIC:
        return [k for k in ids if (slot - periodic_phase(k, config.D)) % config.D == 0]
    if config.D == 1:
        return ids
    draws = rng.random(len(ids))
    return [k for k, u in zip(ids, draws) if u < config.p_t]


def uplink_slot(agv_ids: Iterable[int], slot: int, config: ChannelConfig,
                rng: np.random.Generator) -> SlotOutcome:
    attempting = schedule_traffic(agv_ids, slot, config, rng)
    return simulate_slot(choose_channels(attempting, config, rng), config, rng)


def broadcast_downlink(packet: Packet, recipients: Iterable[int]) -> set[int]:
    if packet.kind.uplink:
        raise ValueError(f"{packet.kind.value} is an uplink packet")
    return set(recipients)


@dataclass(frozen=True)
class McEstimate:
    rate: float
    stderr: float
    attempts: int
    delivered: int
    n_slots: int


def monte_carlo_success(K: int, config: ChannelConfig, n_slots: int,
                        seed: int) -> McEstimate:
    """Per-AGV per-slot delivery rate estimated over ``n_slots`` slots.

    Uses the compiled kernel, which needs C <= 64.
    """
    if config.C > 64:
        raise ValueError("Monte Carlo kernel supports at most 64 channels")
    att, dlv, s1, s2 = channel_mc_kernel(K, config.C, config.S, config.p_t,
                                         config.sigma, n_slots, seed)
    mean = s1 / n_slots
    var = max(0.0, s2 / n_slots - mean * mean)
    se = math.sqrt(var / max(1, n_slots - 1))
    return McEstimate(rate=float(dlv) / (K * n_slots), stderr=se,
                      attempts=int(att), delivered=int(dlv), n_slots=n_slots)
