"""Paired split federated training and the FL / SL / SplitFed baselines.

Every algorithm draws its mini-batch order from :func:`batch_order`, keyed on
``(seed, round, client, epoch)``, so runs are bit-reproducible and different
algorithms see the same batches.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import channel
from .channel import ChannelParams, ClientProfile, LatencyBreakdown
from .data import Dataset
from .model_core import (
    ContractError,
    GradientSlice,
    ModelParams,
    accuracy_and_loss,
    apply_cached_update,
    backward_range,
    forward_range,
    loss_and_output_grad,
)
from .pairing import Matching, validate_matching

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PairPlan:
    pair: Tuple[int, int]
    L_i: int
    L_j: int
    W: int

    def __post_init__(self):
        if self.L_i + self.L_j != self.W or self.L_i < 1 or self.L_j < 1:
            raise ContractError(f"bad split {self.L_i}+{self.L_j} for W={self.W}")

    @property
    def overlap_on(self) -> Optional[int]:
        if self.L_i == self.L_j:
            return None
        return self.pair[0] if self.L_i > self.L_j else self.pair[1]

    @property
    def overlap_layers(self) -> Tuple[int, ...]:
        lo, hi = sorted((self.L_i, self.L_j))
        return tuple(range(lo + 1, hi + 1))


@dataclass(frozen=True)
class TrainingConfig:
    rounds_T: int = 10
    local_epochs_E: int = 2
    batch_size: int = 32
    lr_eta: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.rounds_T, self.local_epochs_E, self.batch_size) < 1 or not self.lr_eta >= 0:
            raise ValueError("rounds, epochs and batch size must be >= 1 and lr >= 0")


@dataclass(frozen=True)
class LatencyModel:
    """Costing knobs. ``layer_dims`` overrides the widths used to cost traffic."""

    cycles_per_layer_F: float = 1e8
    bytes_per_scalar: int = 8
    alpha: float = 1.0
    beta: float = 1.0
    layer_dims: Optional[Tuple[int, ...]] = None


@dataclass
class TrafficRecord:
    epoch: int
    step: int
    flow_owner: int
    sender: int
    receiver: int
    kind: str  # "activation" | "gradient" | "scalar"
    rows: int
    split_layer: int  # width index into layer_dims; -1 for scalars
    nbytes: int


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    loss: float
    wall_clock_s: float
    sum_objective_s: float
    compute_s: float
    comm_s: float
    group_latency: Dict[Tuple[int, ...], LatencyBreakdown] = field(default_factory=dict)
    pair_bytes: Dict[Tuple[int, int], Tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")


@dataclass
class CostContext:
    """What latency accounting needs: client profiles, radio and costing knobs, model depth."""

    clients: List[ClientProfile]
    layer_dims: Tuple[int, ...]
    channel: ChannelParams = field(default_factory=ChannelParams)
    latency: LatencyModel = field(default_factory=LatencyModel)
    server_position: Tuple[float, float] = (0.0, 0.0)
    f_server: float = 20e9
    client_split: int = 1

    def client(self, cid: int) -> ClientProfile:
        for c in self.clients:
            if c.id == cid:
                return c
        raise KeyError(cid)

    @property
    def W(self) -> int:
        return len(self.layer_dims) - 1

    def cost_dims(self) -> Tuple[int, ...]:
        dims = self.latency.layer_dims or tuple(self.layer_dims)
        if len(dims) != len(self.layer_dims):
            raise ValueError("latency.layer_dims must describe a model with the same depth")
        return tuple(dims)


@dataclass
class Federation:
    """Everything a training run needs besides the training config."""

    clients: List[ClientProfile]
    shards: Dict[int, Dataset]
    test: Dataset
    init_model: ModelParams
    channel: ChannelParams = field(default_factory=ChannelParams)
    latency: LatencyModel = field(default_factory=LatencyModel)
    matching: Optional[Matching] = None
    server_position: Tuple[float, float] = (0.0, 0.0)
    f_server: float = 20e9
    client_split: int = 1

    def client(self, cid: int) -> ClientProfile:
        for c in self.clients:
            if c.id == cid:
                return c
        raise KeyError(cid)

    @property
    def ids(self) -> List[int]:
        return sorted(c.id for c in self.clients)

    @property
    def W(self) -> int:
        return self.init_model.num_layers

    def costs(self) -> CostContext:
        return CostContext(
            self.clients, tuple(self.init_model.layer_dims), self.channel, self.latency,
            self.server_position, self.f_server, self.client_split,
        )

    def cost_dims(self) -> Tuple[int, ...]:
        return self.costs().cost_dims()


# ---------------------------------------------------------------- setup


def compute_propagation_lengths(f_i: float, f_j: float, W: int) -> Tuple[int, int]:
    if f_i <= 0 or f_j <= 0 or W < 2:
        raise ValueError("need positive frequencies and W >= 2")
    L_i = math.floor(f_i / (f_i + f_j) * W)
    L_i = min(max(L_i, 1), W - 1)
    return L_i, W - L_i


def make_pair_plan(ci: ClientProfile, cj: ClientProfile, W: int) -> PairPlan:
    L_i, L_j = compute_propagation_lengths(ci.cpu_freq_f, cj.cpu_freq_f, W)
    return PairPlan((ci.id, cj.id), L_i, L_j, W)


def aggregation_weights(dataset_sizes: Sequence[int]) -> List[float]:
    sizes = [int(s) for s in dataset_sizes]
    if any(s < 1 for s in sizes):
        raise ValueError("dataset sizes must be >= 1")
    total = math.fsum(sizes)
    return [s / total for s in sizes]


def aggregate(models: Sequence[ModelParams], weights: Optional[Sequence[float]] = None) -> ModelParams:
    """Elementwise mean (or weighted sum) of structurally identical models, summed in the given order."""
    if not models:
        raise ValueError("nothing to aggregate")
    first = models[0]
    if any(not first.same_structure(m) for m in models):
        raise ContractError("cannot aggregate models with different layer_dims")
    if weights is None:
        weights = [1.0 / len(models)] * len(models)
    out = first.copy()
    for k, layer in enumerate(out.layers):
        w = np.zeros_like(layer.weight)
        b = np.zeros_like(layer.bias)
        for m, a in zip(models, weights):
            w += a * m.layers[k].weight
            b += a * m.layers[k].bias
        layer.weight[...] = w
        layer.bias[...] = b
    return out


def batch_order(n: int, batch_size: int, seed: int, round_idx: int, client_id: int, epoch: int) -> List[np.ndarray]:
    perm = np.random.default_rng([seed, round_idx, client_id, epoch]).permutation(n)
    return [perm[s : s + batch_size] for s in range(0, n, batch_size)]


def _check_loss(loss: float, where: str) -> None:
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at {where}")


def traffic_volume(
    log: Sequence[TrafficRecord], cost_dims: Sequence[int], bytes_per_scalar: int
) -> Dict[Tuple[int, int], int]:
    """Directed byte totals, costing each tensor at ``cost_dims[split_layer]`` columns."""
    out: Dict[Tuple[int, int], int] = {}
    for r in log:
        cols = 1 if r.kind == "scalar" else cost_dims[r.split_layer]
        key = (r.sender, r.receiver)
        out[key] = out.get(key, 0) + r.rows * cols * bytes_per_scalar
    return out


# ---------------------------------------------------------------- FedPairing


def _split_flow(
    owner: int,
    host: int,
    lower: ModelParams,
    upper: ModelParams,
    L: int,
    x: np.ndarray,
    y: np.ndarray,
    log: List[TrafficRecord],
    epoch: int,
    step: int,
) -> Tuple[float, GradientSlice, GradientSlice]:
    """One flow: ``lower`` runs 1..L on the owner, ``upper`` runs L+1..W on the host."""
    W = lower.num_layers
    feat, c_lo = forward_range(lower, 1, L, x)
    log.append(TrafficRecord(epoch, step, owner, owner, host, "activation", len(x), L, feat.nbytes))
    logits, c_hi = forward_range(upper, L + 1, W, feat)
    loss, g = loss_and_output_grad(logits, y)
    _check_loss(loss, f"flow of client {owner}, epoch {epoch}, step {step}")
    # loss value and aggregation weight
    log.append(TrafficRecord(epoch, step, owner, owner, host, "scalar", 2, -1, 16))
    g_hi, boundary = backward_range(upper, c_hi, g)
    log.append(TrafficRecord(epoch, step, owner, host, owner, "gradient", len(x), L, boundary.nbytes))
    g_lo, _ = backward_range(lower, c_lo, boundary)
    return loss, g_lo, g_hi


def paired_local_training(
    plan: PairPlan,
    model_i: ModelParams,
    model_j: ModelParams,
    shard_i: Dataset,
    shard_j: Dataset,
    a_i: float,
    a_j: float,
    cfg: TrainingConfig,
    round_idx: int = 0,
    lr: Optional[float] = None,
) -> Tuple[ModelParams, ModelParams, List[TrafficRecord]]:
    """Train a pair for ``cfg.local_epochs_E`` epochs with both flows in lockstep.

    Each step both flows run forward and backward against the models as they
    were at the start of the step; then each client applies its cached,
    aggregation-weighted gradients, with the doubled step on overlap layers.
    """
    if not model_i.same_structure(model_j):
        raise ContractError("paired models must share layer_dims")
    if plan.W != model_i.num_layers:
        raise ContractError(f"plan is for W={plan.W}, model has {model_i.num_layers} layers")
    i, j = plan.pair
    L_i, L_j = plan.L_i, plan.L_j
    lr = cfg.lr_eta if lr is None else lr
    overlap_i = plan.overlap_layers if plan.overlap_on == i else ()
    overlap_j = plan.overlap_layers if plan.overlap_on == j else ()
    log: List[TrafficRecord] = []
    for epoch in range(cfg.local_epochs_E):
        bi = batch_order(len(shard_i), cfg.batch_size, cfg.seed, round_idx, i, epoch)
        bj = batch_order(len(shard_j), cfg.batch_size, cfg.seed, round_idx, j, epoch)
        for step in range(max(len(bi), len(bj))):
            idx_i, idx_j = bi[step % len(bi)], bj[step % len(bj)]
            _, lo_i, hi_i = _split_flow(
                i, j, model_i, model_j, L_i,
                shard_i.features[idx_i], shard_i.labels[idx_i], log, epoch, step,
            )
            _, lo_j, hi_j = _split_flow(
                j, i, model_j, model_i, L_j,
                shard_j.features[idx_j], shard_j.labels[idx_j], log, epoch, step,
            )
            model_i, model_j = (
                apply_cached_update(model_i, lo_i.weighted(a_i), hi_j.weighted(a_j), lr, overlap_i),
                apply_cached_update(model_j, lo_j.weighted(a_j), hi_i.weighted(a_i), lr, overlap_j),
            )
    return model_i, model_j, log


def solo_local_training(
    model: ModelParams,
    shard: Dataset,
    client_id: int,
    cfg: TrainingConfig,
    round_idx: int = 0,
    lr: Optional[float] = None,
    scale: float = 1.0,
) -> ModelParams:
    """Plain mini-batch SGD on the full model, gradients multiplied by ``scale``."""
    lr = cfg.lr_eta if lr is None else lr
    W = model.num_layers
    for epoch in range(cfg.local_epochs_E):
        for step, idx in enumerate(batch_order(len(shard), cfg.batch_size, cfg.seed, round_idx, client_id, epoch)):
            logits, cache = forward_range(model, 1, W, shard.features[idx])
            loss, g = loss_and_output_grad(logits, shard.labels[idx])
            _check_loss(loss, f"client {client_id}, round {round_idx}, epoch {epoch}, step {step}")
            grads, _ = backward_range(model, cache, g)
            model = apply_cached_update(model, grads.weighted(scale), None, lr)
    return model


def _steps(n: int, cfg: TrainingConfig) -> int:
    return cfg.local_epochs_E * len(channel.batch_sizes(n, cfg.batch_size))


def fedpairing_latency(
    ctx: CostContext, plans: Sequence[PairPlan], unpaired: Sequence[int], cfg: TrainingConfig,
    pair_bytes: Optional[Dict[Tuple[int, int], Tuple[int, int]]] = None,
) -> Dict[Tuple[int, ...], LatencyBreakdown]:
    """Per-group round latency. Pair volumes come from ``pair_bytes`` when given, else analytically."""
    lm = ctx.latency
    dims = ctx.cost_dims()
    out: Dict[Tuple[int, ...], LatencyBreakdown] = {}
    for plan in plans:
        ci, cj = ctx.client(plan.pair[0]), ctx.client(plan.pair[1])
        if pair_bytes is not None:
            vol = pair_bytes[plan.pair]
        else:
            vol = channel.pair_comm_volume(
                (ci, cj), plan.L_i, plan.L_j, dims, cfg.batch_size, lm.bytes_per_scalar, cfg.local_epochs_E
            )
        steps = cfg.local_epochs_E * channel.lockstep_steps(ci.dataset_size, cj.dataset_size, cfg.batch_size)
        out[plan.pair] = channel.pair_round_latency(
            (ci, cj), (plan.L_i, plan.L_j), vol, ctx.channel, lm.cycles_per_layer_F, plan.W, steps
        )
    for cid in unpaired:
        c = ctx.client(cid)
        out[(cid,)] = channel.solo_round_latency(c, ctx.W, _steps(c.dataset_size, cfg), lm.cycles_per_layer_F)
    return out


@dataclass
class RoundLatency:
    groups: Dict[Tuple[int, ...], LatencyBreakdown]
    wall_clock_s: float
    sum_objective_s: float
    critical: LatencyBreakdown


def round_latency(
    kind: str,
    ctx: CostContext,
    cfg: TrainingConfig,
    matching: Optional[Matching] = None,
    pair_bytes: Optional[Dict[Tuple[int, int], Tuple[int, int]]] = None,
) -> RoundLatency:
    """Latency of one training round of ``kind`` under the channel/compute model.

    fedpairing and fedavg: wall clock is the slowest group. vanilla_sl: one
    client-server session is the SL communication round, so the wall clock is
    the mean session time and the sum objective is the full relay pass.
    splitfed: clients run in parallel while the server processes every
    client's upper part serially.
    """
    lm = ctx.latency
    if kind == "fedpairing":
        if matching is None:
            raise ValueError("fedpairing latency needs a matching")
        plans = [make_pair_plan(ctx.client(i), ctx.client(j), ctx.W) for i, j in matching.pairs]
        groups = fedpairing_latency(ctx, plans, matching.unpaired, cfg, pair_bytes)
    elif kind == "fedavg":
        groups = fedavg_latency(ctx, cfg)
    elif kind == "vanilla_sl":
        groups = vanilla_sl_latency(ctx, cfg)
        items = list(groups.values())
        mean_b = LatencyBreakdown(
            math.fsum(b.compute_s for b in items) / len(items),
            math.fsum(b.comm_s for b in items) / len(items),
        )
        summed, _ = channel.system_round_latency(items, lm.alpha, lm.beta)
        return RoundLatency(groups, mean_b.total_s, summed, mean_b)
    elif kind == "splitfed":
        groups, server_total = splitfed_latency(ctx, cfg)
        summed = lm.alpha * server_total + math.fsum(
            lm.alpha * (b.compute_s - server_total) + lm.beta * b.comm_s for b in groups.values()
        )
        crit = channel.critical(list(groups.values()))
        return RoundLatency(groups, crit.total_s, summed, crit)
    else:
        raise ValueError(f"unknown algorithm {kind!r}")
    summed, wall = channel.system_round_latency(groups.values(), lm.alpha, lm.beta)
    return RoundLatency(groups, wall, summed, channel.critical(list(groups.values())))


def _round_metrics(
    round_idx: int, model: ModelParams, fed: Federation, lat: RoundLatency, pair_bytes=None
) -> RoundMetrics:
    acc, loss = accuracy_and_loss(model, fed.test.features, fed.test.labels)
    return RoundMetrics(
        round=round_idx,
        accuracy=acc,
        loss=loss,
        wall_clock_s=lat.wall_clock_s,
        sum_objective_s=lat.sum_objective_s,
        compute_s=lat.critical.compute_s,
        comm_s=lat.critical.comm_s,
        group_latency=lat.groups,
        pair_bytes=pair_bytes or {},
    )


def _check_shards(fed: Federation) -> None:
    for c in fed.clients:
        if c.id not in fed.shards:
            raise ValueError(f"client {c.id} has no data shard")
        if len(fed.shards[c.id]) != c.dataset_size:
            raise ValueError(f"client {c.id}: profile says {c.dataset_size} samples, shard has {len(fed.shards[c.id])}")


def run_fedpairing(fed: Federation, cfg: TrainingConfig, lr: Optional[float] = None) -> List[RoundMetrics]:
    return train_fedpairing(fed, cfg, lr)[1]


def train_fedpairing(
    fed: Federation, cfg: TrainingConfig, lr: Optional[float] = None
) -> Tuple[ModelParams, List[RoundMetrics]]:
    """Like :func:`run_fedpairing` but also returns the final global model."""
    if fed.matching is None:
        raise ValueError("run_fedpairing needs a matching; build one with the pairing module")
    _check_shards(fed)
    validate_matching(fed.matching, fed.ids)
    weights = dict(zip(fed.ids, aggregation_weights([fed.client(c).dataset_size for c in fed.ids])))
    plans = [make_pair_plan(fed.client(i), fed.client(j), fed.W) for i, j in fed.matching.pairs]
    dims = fed.cost_dims()
    bps = fed.latency.bytes_per_scalar

    global_model = fed.init_model.copy()
    history = []
    for r in range(1, cfg.rounds_T + 1):
        local: Dict[int, ModelParams] = {}
        pair_bytes = {}
        for plan in plans:
            i, j = plan.pair
            mi, mj, log = paired_local_training(
                plan, global_model, global_model, fed.shards[i], fed.shards[j],
                weights[i], weights[j], cfg, round_idx=r, lr=lr,
            )
            local[i], local[j] = mi, mj
            vol = traffic_volume(log, dims, bps)
            pair_bytes[plan.pair] = (vol.get((i, j), 0), vol.get((j, i), 0))
        for cid in fed.matching.unpaired:
            local[cid] = solo_local_training(
                global_model, fed.shards[cid], cid, cfg, r, lr=lr, scale=weights[cid]
            )
        global_model = aggregate([local[c] for c in fed.ids])
        if not global_model.is_finite():
            raise TrainingError(f"non-finite global model after round {r}")
        lat = round_latency("fedpairing", fed.costs(), cfg, fed.matching, pair_bytes)
        history.append(_round_metrics(r, global_model, fed, lat, pair_bytes))
    return global_model, history


# ---------------------------------------------------------------- baselines


def _server_rate(ctx: CostContext, c: ClientProfile) -> float:
    return channel.comm_rate(c.position_p, ctx.server_position, ctx.channel)


def fedavg_latency(ctx: CostContext, cfg: TrainingConfig) -> Dict[Tuple[int, ...], LatencyBreakdown]:
    F = ctx.latency.cycles_per_layer_F
    return {
        (c.id,): channel.solo_round_latency(c, ctx.W, _steps(c.dataset_size, cfg), F)
        for c in sorted(ctx.clients, key=lambda c: c.id)
    }


def _client_server_session(ctx: CostContext, c: ClientProfile, cfg: TrainingConfig) -> Tuple[float, float, float]:
    """(client compute, server compute, comm) for one client's split session over a round."""
    lm = ctx.latency
    L_c, W = ctx.client_split, ctx.W
    steps = _steps(c.dataset_size, cfg)
    client_t = steps * channel.compute_delay(L_c, lm.cycles_per_layer_F, c.cpu_freq_f)
    server_t = steps * channel.compute_delay(W - L_c, lm.cycles_per_layer_F, ctx.f_server)
    if L_c == W:
        return client_t, 0.0, 0.0
    width = ctx.cost_dims()[L_c]
    up = cfg.local_epochs_E * c.dataset_size * width * lm.bytes_per_scalar
    comm = up * channel.BITS_PER_BYTE / _server_rate(ctx, c)
    return client_t, server_t, comm


def vanilla_sl_latency(ctx: CostContext, cfg: TrainingConfig) -> Dict[Tuple[int, ...], LatencyBreakdown]:
    out = {}
    for c in sorted(ctx.clients, key=lambda c: c.id):
        client_t, server_t, comm = _client_server_session(ctx, c, cfg)
        out[(c.id,)] = LatencyBreakdown(client_t + server_t, comm)
    return out


def splitfed_latency(ctx: CostContext, cfg: TrainingConfig) -> Tuple[Dict[Tuple[int, ...], LatencyBreakdown], float]:
    """Per-client breakdowns (client compute + all server work, comm) and the summed server time."""
    sessions = {c.id: _client_server_session(ctx, c, cfg) for c in sorted(ctx.clients, key=lambda c: c.id)}
    server_total = math.fsum(s[1] for s in sessions.values())
    groups = {(cid,): LatencyBreakdown(s[0] + server_total, s[2]) for cid, s in sessions.items()}
    return groups, server_total


def _splice(client_model: ModelParams, server_model: ModelParams, L_c: int) -> ModelParams:
    out = server_model.copy()
    for k in range(1, L_c + 1):
        out.layers[k - 1] = client_model.layer(k).copy()
    return out


def run_baseline(kind: str, fed: Federation, cfg: TrainingConfig) -> List[RoundMetrics]:
    """``fedavg``, ``vanilla_sl`` or ``splitfed`` on the same federation."""
    return train_baseline(kind, fed, cfg)[1]


def train_baseline(kind: str, fed: Federation, cfg: TrainingConfig) -> Tuple[ModelParams, List[RoundMetrics]]:
    _check_shards(fed)
    if not 1 <= fed.client_split <= fed.W:
        raise ValueError(f"client_split must be in [1, {fed.W}]")
    runner = {"fedavg": _run_fedavg, "vanilla_sl": _run_vanilla_sl, "splitfed": _run_splitfed}.get(kind)
    if runner is None:
        raise ValueError(f"unknown baseline {kind!r}")
    return runner(fed, cfg)


def _run_fedavg(fed: Federation, cfg: TrainingConfig) -> Tuple[ModelParams, List[RoundMetrics]]:
    ids = fed.ids
    weights = aggregation_weights([fed.client(c).dataset_size for c in ids])
    global_model = fed.init_model.copy()
    lat = round_latency("fedavg", fed.costs(), cfg)
    history = []
    for r in range(1, cfg.rounds_T + 1):
        local = [solo_local_training(global_model, fed.shards[c], c, cfg, r) for c in ids]
        global_model = aggregate(local, weights)
        history.append(_round_metrics(r, global_model, fed, lat))
    return global_model, history


def _client_server_step(
    client_model: ModelParams, server_model: ModelParams, L_c: int, x, y, where: str
) -> Tuple[GradientSlice, Optional[GradientSlice]]:
    W = client_model.num_layers
    feat, c_lo = forward_range(client_model, 1, L_c, x)
    if L_c == W:
        loss, g = loss_and_output_grad(feat, y)
        _check_loss(loss, where)
        return backward_range(client_model, c_lo, g)[0], None
    logits, c_hi = forward_range(server_model, L_c + 1, W, feat)
    loss, g = loss_and_output_grad(logits, y)
    _check_loss(loss, where)
    g_hi, boundary = backward_range(server_model, c_hi, g)
    g_lo, _ = backward_range(client_model, c_lo, boundary)
    return g_lo, g_hi


def _run_vanilla_sl(fed: Federation, cfg: TrainingConfig) -> Tuple[ModelParams, List[RoundMetrics]]:
    """Clients take turns against a stateful server; the client part is relayed between them."""
    L_c, lr = fed.client_split, cfg.lr_eta
    client_model = fed.init_model.copy()
    server_model = fed.init_model.copy()
    lat = round_latency("vanilla_sl", fed.costs(), cfg)
    history = []
    for r in range(1, cfg.rounds_T + 1):
        for cid in fed.ids:
            shard = fed.shards[cid]
            for epoch in range(cfg.local_epochs_E):
                for step, idx in enumerate(batch_order(len(shard), cfg.batch_size, cfg.seed, r, cid, epoch)):
                    g_lo, g_hi = _client_server_step(
                        client_model, server_model, L_c, shard.features[idx], shard.labels[idx],
                        f"vanilla SL client {cid}, round {r}, epoch {epoch}, step {step}",
                    )
                    client_model = apply_cached_update(client_model, g_lo, None, lr)
                    if g_hi is not None:
                        server_model = apply_cached_update(server_model, g_hi, None, lr)
        model = _splice(client_model, server_model, L_c)
        history.append(_round_metrics(r, model, fed, lat))
    return model, history


def _run_splitfed(fed: Federation, cfg: TrainingConfig) -> Tuple[ModelParams, List[RoundMetrics]]:
    """All clients split against the server in parallel.

    The server keeps one copy of its part per client; at the end of a round
    the client parts and the server copies are both averaged with FedAvg
    weights.
    """
    L_c, lr = fed.client_split, cfg.lr_eta
    ids = fed.ids
    weights = aggregation_weights([fed.client(c).dataset_size for c in ids])
    client_global = fed.init_model.copy()
    server_global = fed.init_model.copy()
    lat = round_latency("splitfed", fed.costs(), cfg)
    history = []
    for r in range(1, cfg.rounds_T + 1):
        clients = {c: client_global.copy() for c in ids}
        servers = {c: server_global.copy() for c in ids}
        for c in ids:
            shard = fed.shards[c]
            for epoch in range(cfg.local_epochs_E):
                for step, idx in enumerate(batch_order(len(shard), cfg.batch_size, cfg.seed, r, c, epoch)):
                    g_lo, g_hi = _client_server_step(
                        clients[c], servers[c], L_c, shard.features[idx], shard.labels[idx],
                        f"splitfed client {c}, round {r}, epoch {epoch}, step {step}",
                    )
                    clients[c] = apply_cached_update(clients[c], g_lo, None, lr)
                    if g_hi is not None:
                        servers[c] = apply_cached_update(servers[c], g_hi, None, lr)
        client_global = aggregate([clients[c] for c in ids], weights)
        server_global = aggregate([servers[c] for c in ids], weights)
        model = _splice(client_global, server_global, L_c)
        history.append(_round_metrics(r, model, fed, lat))
    return model, history


def initial_metrics(fed: Federation) -> Tuple[float, float]:
    return accuracy_and_loss(fed.init_model, fed.test.features, fed.test.labels)
