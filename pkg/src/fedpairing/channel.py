"""Wireless rate and round-latency model.

Rates follow a distance-based path-loss channel with Shannon capacity;
computation time is layer count times cycles-per-layer over CPU frequency.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

BITS_PER_BYTE = 8


@dataclass(frozen=True)
class ChannelParams:
    bandwidth_B: float = 64e6
    tx_power_P: float = 1.0
    noise_power: float = 1e-9
    ref_gain_h0: float = 1e-3
    ref_dist_zeta0: float = 1.0
    pathloss_theta: float = 3.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value > 0:
                raise ValueError(f"ChannelParams.{name} must be > 0, got {value}")


@dataclass(frozen=True)
class ClientProfile:
    id: int
    cpu_freq_f: float
    dataset_size: int
    position_p: Tuple[float, float]

    def __post_init__(self):
        if not self.cpu_freq_f > 0:
            raise ValueError(f"client {self.id}: cpu_freq_f must be > 0")
        if self.dataset_size < 1:
            raise ValueError(f"client {self.id}: dataset_size must be >= 1")


@dataclass(frozen=True)
class LatencyBreakdown:
    compute_s: float
    comm_s: float

    def __post_init__(self):
        if self.compute_s < 0 or self.comm_s < 0:
            raise ValueError("latencies must be non-negative")

    @property
    def total_s(self) -> float:
        return self.compute_s + self.comm_s


def distance(p_i: Sequence[float], p_j: Sequence[float]) -> float:
    return float(math.hypot(p_i[0] - p_j[0], p_i[1] - p_j[1]))


def channel_gain(p_i, p_j, params: ChannelParams) -> float:
    d = distance(p_i, p_j)
    if d == 0.0:
        raise ValueError("co-located clients have an undefined channel gain")
    return params.ref_gain_h0 * (params.ref_dist_zeta0 / d) ** params.pathloss_theta


def rate_from_gain(gain: float, params: ChannelParams) -> float:
    return params.bandwidth_B * math.log2(1.0 + params.tx_power_P * gain / params.noise_power)


def comm_rate(p_i, p_j, params: ChannelParams) -> float:
    """Link rate in bits/s."""
    return rate_from_gain(channel_gain(p_i, p_j, params), params)


def compute_delay(num_layers_L: int, cycles_per_layer_F: float, cpu_freq_f: float) -> float:
    if num_layers_L < 0 or cycles_per_layer_F <= 0 or cpu_freq_f <= 0:
        raise ValueError("compute_delay needs L >= 0 and positive F, f")
    return num_layers_L * cycles_per_layer_F / cpu_freq_f


def batch_sizes(n_samples: int, batch_size: int) -> List[int]:
    """Row counts of the mini-batches covering ``n_samples`` (last one may be short)."""
    full, rem = divmod(int(n_samples), int(batch_size))
    return [batch_size] * full + ([rem] if rem else [])


def lockstep_rows(n_i: int, n_j: int, batch_size: int) -> Tuple[int, int]:
    """Rows each flow processes per epoch when two flows advance batch-by-batch.

    The flow with fewer batches wraps around its own batch list until the
    longer one finishes.
    """
    bi, bj = batch_sizes(n_i, batch_size), batch_sizes(n_j, batch_size)
    steps = max(len(bi), len(bj))
    if steps == 0:
        return 0, 0
    rows_i = sum(bi[s % len(bi)] for s in range(steps)) if bi else 0
    rows_j = sum(bj[s % len(bj)] for s in range(steps)) if bj else 0
    return rows_i, rows_j


def lockstep_steps(n_i: int, n_j: int, batch_size: int) -> int:
    return max(len(batch_sizes(n_i, batch_size)), len(batch_sizes(n_j, batch_size)))


def pair_comm_volume(
    pair: Tuple[ClientProfile, ClientProfile],
    L_i: int,
    L_j: int,
    layer_dims: Sequence[int],
    batch_size: int,
    bytes_per_scalar: int = 8,
    epochs: int = 1,
    include_scalars: bool = True,
) -> Tuple[int, int]:
    """Bytes sent ``i -> j`` and ``j -> i`` while training a pair.

    Client ``i`` sends its split activations (width ``layer_dims[L_i]``) for
    its own flow and the boundary gradients (width ``layer_dims[L_j]``) for
    its partner's flow; ``j`` mirrors. Each flow's owner also hands over the
    loss value and its aggregation weight once per batch.
    """
    W = len(layer_dims) - 1
    if not (1 <= L_i <= W - 1 and 1 <= L_j <= W - 1 and L_i + L_j == W):
        raise ValueError(f"invalid split L_i={L_i}, L_j={L_j} for W={W}")
    ci, cj = pair
    rows_i, rows_j = lockstep_rows(ci.dataset_size, cj.dataset_size, batch_size)
    steps = lockstep_steps(ci.dataset_size, cj.dataset_size, batch_size)
    act_i, act_j = layer_dims[L_i], layer_dims[L_j]
    i_to_j = rows_i * act_i + rows_j * act_j
    j_to_i = rows_j * act_j + rows_i * act_i
    if include_scalars and steps:
        i_to_j += 2 * steps
        j_to_i += 2 * steps
    return epochs * i_to_j * bytes_per_scalar, epochs * j_to_i * bytes_per_scalar


def pair_compute_times(
    pair: Tuple[ClientProfile, ClientProfile],
    L_i: int,
    L_j: int,
    W: int,
    steps: int,
    F: float,
) -> Tuple[float, float]:
    """Serial compute time of each client over ``steps`` lockstep steps.

    Each client hosts its own lower part and its partner's upper part.
    """
    ci, cj = pair
    hosted_i = L_i + (W - L_j)
    hosted_j = L_j + (W - L_i)
    return (
        steps * compute_delay(hosted_i, F, ci.cpu_freq_f),
        steps * compute_delay(hosted_j, F, cj.cpu_freq_f),
    )


def pair_round_latency(
    pair: Tuple[ClientProfile, ClientProfile],
    splits: Tuple[int, int],
    volumes: Tuple[int, int],
    params: ChannelParams,
    F: float,
    W: int,
    steps: int,
) -> LatencyBreakdown:
    """Round latency of one pair: slower client's compute plus the larger direction's transfer."""
    ci, cj = pair
    t_i, t_j = pair_compute_times(pair, splits[0], splits[1], W, steps, F)
    rate = comm_rate(ci.position_p, cj.position_p, params)
    comm = max(volumes) * BITS_PER_BYTE / rate
    return LatencyBreakdown(max(t_i, t_j), comm)


def solo_round_latency(client: ClientProfile, W: int, steps: int, F: float) -> LatencyBreakdown:
    return LatencyBreakdown(steps * compute_delay(W, F, client.cpu_freq_f), 0.0)


def system_round_latency(
    breakdowns: Iterable[LatencyBreakdown], alpha: float = 1.0, beta: float = 1.0
) -> Tuple[float, float]:
    """Return ``(sum_objective, wall_clock)`` over all groups in a round."""
    items = list(breakdowns)
    if not items:
        return 0.0, 0.0
    total = math.fsum(alpha * b.compute_s + beta * b.comm_s for b in items)
    wall = max(b.total_s for b in items)
    return total, wall


def critical(breakdowns: Sequence[LatencyBreakdown]) -> LatencyBreakdown:
    """The breakdown that sets the wall clock (first one on ties)."""
    return max(breakdowns, key=lambda b: b.total_s)


def pairwise_rates(positions: np.ndarray, params: ChannelParams) -> np.ndarray:
    n = len(positions)
    rates = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            rates[i, j] = rates[j, i] = comm_rate(positions[i], positions[j], params)
    return rates
