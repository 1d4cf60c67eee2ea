import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpairing import protocol
from fedpairing.channel import ChannelParams, ClientProfile, pair_comm_volume
from fedpairing.data import Dataset, generate_synthetic, partition_iid, train_test_split
from fedpairing.model_core import ContractError, forward, forward_range, init_mlp
from fedpairing.pairing import Matching, WeightParams, build_graph, greedy_pairing
from fedpairing.protocol import (
    CostContext,
    Federation,
    PairPlan,
    TrainingConfig,
    aggregate,
    aggregation_weights,
    compute_propagation_lengths,
    make_pair_plan,
    paired_local_training,
    traffic_volume,
)
from oracles import params_of, per_sample_grads


def _shard(n, d, k, seed):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, d)), rng.integers(0, k, n), k)


def _oracle_sgd(params, shard, cfg, client_id, round_idx, lr):
    """Plain SGD following the documented batch order, with oracle gradients."""
    params = [(w.copy(), b.copy()) for w, b in params]
    for epoch in range(cfg.local_epochs_E):
        perm = np.random.default_rng([cfg.seed, round_idx, client_id, epoch]).permutation(len(shard))
        for s in range(0, len(shard), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            gw, gb = per_sample_grads(params, shard.features[idx], shard.labels[idx])
            params = [(w - lr * a, b - lr * c) for (w, b), a, c in zip(params, gw, gb)]
    return params


def _federation(n_clients=4, seed=0, dims=(8, 16, 16, 4), freqs=None, partition=partition_iid):
    data = generate_synthetic(dims[-1], dims[0], 60, seed, class_sep=3.0)
    train, test = train_test_split(data, 0.2, seed)
    spec = partition(train, n_clients, seed)
    rng = np.random.default_rng(seed)
    freqs = freqs or [float(f) for f in rng.uniform(1e8, 2e9, n_clients)]
    clients = [
        ClientProfile(k, freqs[k], len(spec.shards[k]), (float(10 + 7 * k), float(3 * k)))
        for k in range(n_clients)
    ]
    matching = greedy_pairing(build_graph(clients, ChannelParams(), WeightParams())) if n_clients > 1 else None
    return Federation(
        clients=clients,
        shards={k: train.subset(spec.shards[k]) for k in range(n_clients)},
        test=test,
        init_model=init_mlp(list(dims), seed),
        matching=matching,
        f_server=20e9,
    )


# ---------------------------------------------------------------- setup helpers


def test_propagation_lengths_examples():
    assert compute_propagation_lengths(1e9, 1e9, 4) == (2, 2)
    assert compute_propagation_lengths(1e9, 2e9, 3) == (1, 2)
    assert compute_propagation_lengths(2e9, 0.1e9, 18) == (17, 1)
    # extreme ratios are clamped so both clients keep at least one layer
    assert compute_propagation_lengths(1e12, 1.0, 5) == (4, 1)
    assert compute_propagation_lengths(1.0, 1e12, 5) == (1, 4)


@settings(max_examples=100, deadline=None)
@given(f_i=st.floats(1e6, 1e10), f_j=st.floats(1e6, 1e10), W=st.integers(2, 30))
def test_pair_plan_invariants(f_i, f_j, W):
    L_i, L_j = compute_propagation_lengths(f_i, f_j, W)
    plan = PairPlan((0, 1), L_i, L_j, W)
    assert L_i + L_j == W and 1 <= L_i <= W - 1
    assert len(plan.overlap_layers) == abs(L_i - L_j)
    if plan.overlap_on is not None:
        bigger = 0 if L_i > L_j else 1
        assert plan.overlap_on == bigger


def test_pair_plan_rejects_bad_split():
    with pytest.raises(ContractError):
        PairPlan((0, 1), 0, 3, 3)
    with pytest.raises(ContractError):
        PairPlan((0, 1), 2, 2, 3)


def test_aggregation_weight_examples():
    assert aggregation_weights([2500] * 20) == pytest.approx([0.05] * 20)
    assert aggregation_weights([7]) == [1.0]
    assert aggregation_weights([1, 3]) == [0.25, 0.75]
    assert math.fsum(aggregation_weights([3, 9, 11, 5])) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        aggregation_weights([0, 4])


def test_aggregate_examples():
    m = init_mlp([4, 6, 3], 0)
    same = aggregate([m, m, m])
    assert np.allclose(same.flat(), m.flat(), atol=1e-15)
    neg = m.copy()
    for layer in neg.layers:
        layer.weight *= -1
        layer.bias *= -1
    assert np.allclose(aggregate([m, neg]).flat(), 0.0, atol=0)
    consts = []
    for c in (1.0, 2.0, 6.0):
        k = m.copy()
        for layer in k.layers:
            layer.weight[...] = c
            layer.bias[...] = c
        consts.append(k)
    assert np.allclose(aggregate(consts).flat(), 3.0)


def test_aggregate_rejects_mixed_structures():
    with pytest.raises(ContractError):
        aggregate([init_mlp([4, 6, 3], 0), init_mlp([4, 5, 3], 0)])


# ---------------------------------------------------------------- paired training


def test_flow_forward_equals_monolithic():
    m = init_mlp([5, 7, 6, 3], 1)
    x = np.random.default_rng(1).standard_normal((4, 5))
    lower, _ = forward_range(m, 1, 2, x)
    upper, _ = forward_range(m.copy(), 3, 3, lower)
    assert np.allclose(upper, forward(m, x), atol=1e-6)


def _expected_update(omega, g_i, g_j, a_i, a_j, L_i, L_j, lr):
    """Hand-assembled cached-gradient update for both clients of a pair."""
    W = len(omega)
    lo, hi = sorted((L_i, L_j))
    overlap = set(range(lo + 1, hi + 1))

    def client(L_own, L_partner, g_own, a_own, g_par, a_par, hosts_overlap):
        out = []
        for k in range(1, W + 1):
            w, b = omega[k - 1]
            step_w, step_b, touched = 0.0, 0.0, 0
            if k <= L_own:
                step_w, step_b, touched = a_own * g_own[0][k - 1], a_own * g_own[1][k - 1], 1
            if k >= L_partner + 1:
                step_w = step_w + a_par * g_par[0][k - 1]
                step_b = step_b + a_par * g_par[1][k - 1]
                touched += 1
            factor = 2 * lr if (hosts_overlap and k in overlap) else lr
            assert touched in (0, 1) or (hosts_overlap and k in overlap)
            out.append((w - factor * step_w, b - factor * step_b))
        return out

    return (
        client(L_i, L_j, g_i, a_i, g_j, a_j, L_i > L_j),
        client(L_j, L_i, g_j, a_j, g_i, a_i, L_j > L_i),
    )


@pytest.mark.parametrize(
    "dims,L_i,L_j",
    [([4, 6, 5, 3], 1, 2), ([4, 6, 5, 3], 2, 1), ([4, 6, 5, 5, 3], 1, 3), ([4, 6, 5, 5, 3], 2, 2), ([4, 7, 3], 1, 1)],
)
def test_single_step_update_matches_backprop_oracle(dims, L_i, L_j):
    W = len(dims) - 1
    omega = init_mlp(dims, 21)
    shard_i, shard_j = _shard(5, dims[0], dims[-1], 1), _shard(3, dims[0], dims[-1], 2)
    cfg = TrainingConfig(rounds_T=1, local_epochs_E=1, batch_size=8, lr_eta=0.3, seed=4)
    a_i, a_j = 5 / 8, 3 / 8
    plan = PairPlan((0, 1), L_i, L_j, W)
    mi, mj, log = paired_local_training(plan, omega, omega, shard_i, shard_j, a_i, a_j, cfg)
    p = params_of(omega)
    g_i = per_sample_grads(p, shard_i.features, shard_i.labels)
    g_j = per_sample_grads(p, shard_j.features, shard_j.labels)
    want_i, want_j = _expected_update(p, g_i, g_j, a_i, a_j, L_i, L_j, 0.3)
    for k in range(W):
        assert np.allclose(mi.layers[k].weight, want_i[k][0], atol=1e-8, rtol=0)
        assert np.allclose(mi.layers[k].bias, want_i[k][1], atol=1e-8, rtol=0)
        assert np.allclose(mj.layers[k].weight, want_j[k][0], atol=1e-8, rtol=0)
        assert np.allclose(mj.layers[k].bias, want_j[k][1], atol=1e-8, rtol=0)


def test_overlap_on_larger_client_in_three_layer_case():
    dims = [4, 6, 5, 3]
    omega = init_mlp(dims, 3)
    si, sj = _shard(4, 4, 3, 5), _shard(4, 4, 3, 6)
    cfg = TrainingConfig(1, 1, 8, 0.2, 0)
    mi, mj, _ = paired_local_training(PairPlan((0, 1), 1, 2, 3), omega, omega, si, sj, 0.5, 0.5, cfg)
    p = params_of(omega)
    g_i = per_sample_grads(p, si.features, si.labels)
    g_j = per_sample_grads(p, sj.features, sj.labels)
    delta2 = omega.layer(2).weight - mj.layer(2).weight
    assert np.allclose(delta2, 2 * 0.2 * (0.5 * g_i[0][1] + 0.5 * g_j[0][1]), atol=1e-12)
    # c_i does not own layer 2 in either flow, so it is untouched there
    assert np.array_equal(mi.layer(2).weight, omega.layer(2).weight)


def test_solo_sgd_oracle_when_partner_weight_zero():
    dims = [4, 9, 3]
    omega = init_mlp(dims, 8)
    si, sj = _shard(6, 4, 3, 9), _shard(6, 4, 3, 10)
    cfg = TrainingConfig(1, 1, 16, 0.25, 2)
    mi, _, _ = paired_local_training(PairPlan((0, 1), 1, 1, 2), omega, omega, si, sj, 1.0, 0.0, cfg)
    want = _oracle_sgd(params_of(omega), si, cfg, 0, 0, 0.25)
    assert np.allclose(mi.layer(1).weight, want[0][0], atol=1e-8)
    assert np.allclose(mi.layer(1).bias, want[0][1], atol=1e-8)
    # the partner slice carries zero weight, so layer 2 stays put
    assert np.array_equal(mi.layer(2).weight, omega.layer(2).weight)


def test_structure_mismatch_rejected():
    cfg = TrainingConfig(1, 1, 4, 0.1, 0)
    s = _shard(4, 4, 3, 0)
    with pytest.raises(ContractError):
        paired_local_training(PairPlan((0, 1), 1, 1, 2), init_mlp([4, 5, 3], 0), init_mlp([4, 6, 3], 0), s, s, 0.5, 0.5, cfg)
    with pytest.raises(ContractError):
        paired_local_training(PairPlan((0, 1), 1, 2, 3), init_mlp([4, 5, 3], 0), init_mlp([4, 5, 3], 0), s, s, 0.5, 0.5, cfg)


def test_traffic_log_matches_analytic_volume():
    dims = [6, 10, 7, 5, 3]
    omega = init_mlp(dims, 0)
    si, sj = _shard(23, 6, 3, 1), _shard(9, 6, 3, 2)  # unequal: the shorter flow wraps
    cfg = TrainingConfig(1, 2, 4, 0.05, 0)
    ci, cj = ClientProfile(0, 1e9, 23, (0, 0)), ClientProfile(1, 3e9, 9, (4, 3))
    plan = make_pair_plan(ci, cj, 4)
    _, _, log = paired_local_training(plan, omega, omega, si, sj, 0.5, 0.5, cfg)
    vol = traffic_volume(log, dims, 8)
    want = pair_comm_volume((ci, cj), plan.L_i, plan.L_j, dims, 4, 8, epochs=2)
    assert (vol[(0, 1)], vol[(1, 0)]) == want
    # each logged tensor's bytes match its declared shape
    for r in log:
        if r.kind != "scalar":
            assert r.nbytes == r.rows * dims[r.split_layer] * 8


# ---------------------------------------------------------------- full runs


def test_lr_zero_keeps_global_model():
    fed = _federation(4)
    cfg = TrainingConfig(3, 1, 16, 0.0, 0)
    model, _ = protocol.train_fedpairing(fed, cfg)
    assert np.array_equal(model.flat(), fed.init_model.flat())


def test_fedpairing_is_deterministic():
    cfg = TrainingConfig(2, 1, 16, 0.1, 5)
    h1 = protocol.run_fedpairing(_federation(5, seed=2), cfg)
    h2 = protocol.run_fedpairing(_federation(5, seed=2), cfg)
    assert [(m.accuracy, m.loss, m.wall_clock_s, m.comm_s) for m in h1] == [
        (m.accuracy, m.loss, m.wall_clock_s, m.comm_s) for m in h2
    ]
    assert len(h1) == 2


def test_one_round_improves_over_init_in_most_seeds():
    wins = 0
    for seed in range(5):
        fed = _federation(2, seed=seed, freqs=[1e9, 1e9])
        init_acc, _ = protocol.initial_metrics(fed)
        hist = protocol.run_fedpairing(fed, TrainingConfig(1, 2, 16, 0.1, seed), lr=0.2)
        wins += hist[-1].accuracy >= init_acc
    assert wins >= 3


def test_odd_population_trains_unpaired_client():
    fed = _federation(5, seed=1)
    assert len(fed.matching.unpaired) == 1
    hist = protocol.run_fedpairing(fed, TrainingConfig(1, 1, 16, 0.1, 0))
    assert fed.matching.unpaired[0:1] and (fed.matching.unpaired[0],) in hist[0].group_latency


def test_fedpairing_needs_matching_and_matching_shards():
    fed = _federation(4)
    fed.matching = None
    with pytest.raises(ValueError):
        protocol.run_fedpairing(fed, TrainingConfig(1, 1, 16, 0.1, 0))
    fed = _federation(4)
    fed.clients[0] = ClientProfile(0, 1e9, 3, fed.clients[0].position_p)
    with pytest.raises(ValueError):
        protocol.run_fedpairing(fed, TrainingConfig(1, 1, 16, 0.1, 0))


def test_round_comm_matches_recomputation_from_log():
    fed = _federation(4, seed=3)
    cfg = TrainingConfig(1, 2, 16, 0.1, 0)
    hist = protocol.run_fedpairing(fed, cfg)
    analytic = protocol.round_latency("fedpairing", fed.costs(), cfg, fed.matching)
    for key, b in hist[0].group_latency.items():
        assert b.comm_s == pytest.approx(analytic.groups[key].comm_s, rel=1e-12)
    assert hist[0].wall_clock_s == pytest.approx(analytic.wall_clock_s, rel=1e-12)


def test_fedavg_single_client_equals_sgd():
    fed = _federation(1, seed=4)
    cfg = TrainingConfig(2, 2, 16, 0.1, 3)
    model, _ = protocol.train_baseline("fedavg", fed, cfg)
    params = params_of(fed.init_model)
    for r in (1, 2):
        params = _oracle_sgd(params, fed.shards[0], cfg, 0, r, 0.1)
    for k, (w, b) in enumerate(params):
        assert np.allclose(model.layers[k].weight, w, atol=1e-8)
        assert np.allclose(model.layers[k].bias, b, atol=1e-8)


def test_splitfed_equals_fedavg_without_a_server_part():
    fed = _federation(4, seed=6)
    fed.client_split = fed.W
    cfg = TrainingConfig(2, 1, 16, 0.1, 1)
    m_sf, _ = protocol.train_baseline("splitfed", fed, cfg)
    m_fa, _ = protocol.train_baseline("fedavg", fed, cfg)
    assert np.allclose(m_sf.flat(), m_fa.flat(), atol=1e-8)


def test_vanilla_sl_runs_and_relays():
    fed = _federation(3, seed=7)
    hist = protocol.run_baseline("vanilla_sl", fed, TrainingConfig(2, 1, 16, 0.1, 0))
    assert len(hist) == 2 and all(0 <= m.accuracy <= 1 for m in hist)


def test_vanilla_sl_client_share_of_compute():
    fed = _federation(3, seed=8)
    cfg = TrainingConfig(1, 2, 16, 0.1, 0)
    ctx = fed.costs()
    groups = protocol.vanilla_sl_latency(ctx, cfg)
    F, W, L_c = ctx.latency.cycles_per_layer_F, ctx.W, ctx.client_split
    for c in fed.clients:
        steps = 2 * math.ceil(c.dataset_size / 16)
        client_part = steps * L_c * F / c.cpu_freq_f
        server_part = steps * (W - L_c) * F / ctx.f_server
        assert groups[(c.id,)].compute_s == pytest.approx(client_part + server_part)
        assert client_part > server_part


def test_unknown_baseline():
    with pytest.raises(ValueError):
        protocol.run_baseline("fedprox", _federation(2), TrainingConfig(1, 1, 16, 0.1, 0))


def test_analytic_latency_without_model():
    clients = [ClientProfile(k, 1e9 * (k + 1), 100, (float(k + 1), 0.0)) for k in range(4)]
    ctx = CostContext(clients, (3072, 65536, 65536, 10))
    cfg = TrainingConfig(1, 2, 64, 0.1, 0)
    match = Matching([(0, 3), (1, 2)])
    lat = protocol.round_latency("fedpairing", ctx, cfg, match)
    assert lat.wall_clock_s == max(b.total_s for b in lat.groups.values())
    fl = protocol.round_latency("fedavg", ctx, cfg)
    # the slowest client runs the whole model alone
    assert fl.wall_clock_s == pytest.approx(2 * 2 * 3 * 1e8 / 1e9)
