"""Experiment orchestration: config ingestion, scenario geometry, comparisons, CSV/JSON output."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import protocol
from .channel import ChannelParams, ClientProfile
from .data import generate_synthetic, partition_iid, partition_noniid, train_test_split
from .model_core import init_mlp
from .pairing import Matching, WeightParams, baseline_pairing, build_graph, greedy_pairing
from .protocol import CostContext, Federation, LatencyModel, RoundMetrics, TrainingConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ALGORITHMS = ("fedpairing", "fedavg", "vanilla_sl", "splitfed")
PAIRING_STRATEGIES = ("greedy", "random", "location", "compute")
CSV_COLUMNS = (
    "round", "algorithm", "accuracy", "loss", "wall_clock_s", "sum_objective_s", "comm_s", "compute_s",
)

# Feature-map widths of an 18-layer CIFAR ResNet (input, 17 conv stages, logits).
RESNET18_PROFILE = tuple(
    [3 * 32 * 32] + [64 * 32 * 32] * 5 + [128 * 16 * 16] * 4 + [256 * 8 * 8] * 4 + [512 * 4 * 4] * 4 + [10]
)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class ScenarioConfig:
    num_clients: int = 20
    radius_m: float = 50.0
    f_min_hz: float = 0.1e9
    f_max_hz: float = 2e9
    server_position: List[float] = field(default_factory=lambda: [0.0, 0.0])
    f_server_hz: Optional[float] = None
    f_server_factor: float = 10.0
    samples_per_client: int = 2500


@dataclass
class ChannelConfig:
    bandwidth_B: float = 64e6
    tx_power_P: float = 1.0
    noise_power: float = 1e-9
    ref_gain_h0: float = 1e-3
    ref_dist_zeta0: float = 1.0
    pathloss_theta: float = 3.0


@dataclass
class WeightConfig:
    alpha: float = 1.0
    beta: float = 1.0
    normalize: bool = True


@dataclass
class LatencyConfig:
    cycles_per_layer_F: float = 1e8
    bytes_per_scalar: int = 8
    alpha: float = 1.0
    beta: float = 1.0
    # widths used by the analytic timing tables: "resnet18", "model" or an explicit list
    profile: Union[str, List[int]] = "resnet18"


@dataclass
class ModelConfig:
    hidden: List[int] = field(default_factory=lambda: [64, 64, 64])


@dataclass
class DataConfig:
    num_classes: int = 10
    dim: int = 16
    per_class: int = 625
    class_sep: float = 3.0
    test_fraction: float = 0.2
    partition: str = "iid"
    classes_per_client: int = 2


@dataclass
class TrainingSection:
    rounds_T: int = 30
    local_epochs_E: int = 2
    batch_size: int = 64
    lr_eta: float = 0.1
    # "clients" multiplies FedPairing's step by N, undoing the a_i ~ 1/N gradient weighting
    fedpairing_lr_scale: str = "clients"


@dataclass
class ExperimentConfig:
    seed: int = 0
    algorithm: str = "fedpairing"
    pairing: str = "greedy"
    client_split: int = 1
    num_seeds: int = 20
    algorithms: List[str] = field(default_factory=lambda: list(ALGORITHMS))
    partitions: List[str] = field(default_factory=lambda: ["iid", "noniid"])
    convergence_seeds: int = 1
    output_dir: str = "results"
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    weights: WeightConfig = field(default_factory=WeightConfig)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainingSection = field(default_factory=TrainingSection)

    def validate(self) -> "ExperimentConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if self.pairing not in PAIRING_STRATEGIES:
            raise ConfigError(f"pairing must be one of {PAIRING_STRATEGIES}")
        for a in self.algorithms:
            if a not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {a!r} in algorithms")
        for p in self.partitions:
            if p not in ("iid", "noniid"):
                raise ConfigError(f"unknown partition {p!r}")
        if self.data.partition not in ("iid", "noniid"):
            raise ConfigError("data.partition must be 'iid' or 'noniid'")
        if self.training.fedpairing_lr_scale not in ("clients", "none"):
            raise ConfigError("training.fedpairing_lr_scale must be 'clients' or 'none'")
        if self.scenario.num_clients < 2:
            raise ConfigError("scenario.num_clients must be >= 2")
        if not 0 < self.scenario.f_min_hz <= self.scenario.f_max_hz:
            raise ConfigError("need 0 < f_min_hz <= f_max_hz")
        if self.num_seeds < 1 or self.convergence_seeds < 1:
            raise ConfigError("seed counts must be >= 1")
        if not 1 <= self.client_split <= len(self.model.hidden) + 1:
            raise ConfigError("client_split must lie in [1, W]")
        if isinstance(self.latency.profile, str) and self.latency.profile not in ("resnet18", "model"):
            raise ConfigError("latency.profile must be 'resnet18', 'model' or a list of widths")
        try:
            self.channel_params()
            self.weight_params()
            self.training_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def layer_dims(self) -> List[int]:
        return [self.data.dim, *self.model.hidden, self.data.num_classes]

    def profile_dims(self) -> Tuple[int, ...]:
        prof = self.latency.profile
        if prof == "resnet18":
            return RESNET18_PROFILE
        if prof == "model":
            return tuple(self.layer_dims())
        return tuple(int(x) for x in prof)

    def channel_params(self) -> ChannelParams:
        return ChannelParams(**asdict(self.channel))

    def weight_params(self) -> WeightParams:
        return WeightParams(**asdict(self.weights))

    def latency_model(self, layer_dims: Optional[Sequence[int]] = None) -> LatencyModel:
        lc = self.latency
        return LatencyModel(
            lc.cycles_per_layer_F, lc.bytes_per_scalar, lc.alpha, lc.beta,
            tuple(layer_dims) if layer_dims is not None else None,
        )

    def training_config(self, seed: Optional[int] = None) -> TrainingConfig:
        t = self.training
        return TrainingConfig(t.rounds_T, t.local_epochs_E, t.batch_size, t.lr_eta, self.seed if seed is None else seed)


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{where}.{key}")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config").validate()


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


# ---------------------------------------------------------------- scenario


@dataclass
class Scenario:
    clients: List[ClientProfile]
    channel: ChannelParams
    weightparams: WeightParams
    server_position: Tuple[float, float]
    radius_m: float
    seed: int
    f_server: float


def build_scenario(cfg: ExperimentConfig, seed: int, dataset_sizes: Optional[Sequence[int]] = None) -> Scenario:
    """Clients uniform in a disc around the server, CPU frequencies uniform in the configured band."""
    sc = cfg.scenario
    n = sc.num_clients
    sizes = list(dataset_sizes) if dataset_sizes is not None else [sc.samples_per_client] * n
    if len(sizes) != n:
        raise ConfigError(f"{len(sizes)} dataset sizes for {n} clients")
    rng = np.random.default_rng([seed, 0x5CE])
    cx, cy = (float(v) for v in sc.server_position)
    clients, seen = [], set()
    for cid in range(n):
        while True:
            r = sc.radius_m * math.sqrt(rng.random())
            theta = 2.0 * math.pi * rng.random()
            pos = (cx + r * math.cos(theta), cy + r * math.sin(theta))
            if pos not in seen and pos != (cx, cy):
                break
        seen.add(pos)
        f = float(rng.uniform(sc.f_min_hz, sc.f_max_hz))
        clients.append(ClientProfile(cid, f, int(sizes[cid]), pos))
    f_server = sc.f_server_hz or sc.f_server_factor * max(c.cpu_freq_f for c in clients)
    return Scenario(clients, cfg.channel_params(), cfg.weight_params(), (cx, cy), sc.radius_m, seed, f_server)


def make_matching(strategy: str, scenario: Scenario) -> Matching:
    if strategy == "greedy":
        return greedy_pairing(build_graph(scenario.clients, scenario.channel, scenario.weightparams))
    return baseline_pairing(strategy, scenario.clients, scenario.channel, scenario.seed)


def cost_context(cfg: ExperimentConfig, scenario: Scenario, layer_dims: Sequence[int]) -> CostContext:
    return CostContext(
        scenario.clients, tuple(layer_dims), scenario.channel, cfg.latency_model(),
        scenario.server_position, scenario.f_server, cfg.client_split,
    )


def build_federation(cfg: ExperimentConfig, seed: int, partition: Optional[str] = None) -> Tuple[Federation, Scenario]:
    """Synthetic data, shards, scenario and initial model for one seed."""
    d = cfg.data
    full = generate_synthetic(d.num_classes, d.dim, d.per_class, seed, d.class_sep)
    train, test = train_test_split(full, d.test_fraction, seed)
    n = cfg.scenario.num_clients
    mode = partition or d.partition
    if mode == "iid":
        spec = partition_iid(train, n, seed)
    else:
        spec = partition_noniid(train, n, d.classes_per_client, seed)
    scenario = build_scenario(cfg, seed, spec.sizes())
    fed = Federation(
        clients=scenario.clients,
        shards={c.id: train.subset(spec.shards[c.id]) for c in scenario.clients},
        test=test,
        init_model=init_mlp(cfg.layer_dims(), seed),
        channel=scenario.channel,
        latency=cfg.latency_model(),
        matching=make_matching(cfg.pairing, scenario),
        server_position=scenario.server_position,
        f_server=scenario.f_server,
        client_split=cfg.client_split,
    )
    return fed, scenario


def run_algorithm(algorithm: str, fed: Federation, cfg: ExperimentConfig, seed: int) -> List[RoundMetrics]:
    tcfg = cfg.training_config(seed)
    if algorithm == "fedpairing":
        scale = len(fed.clients) if cfg.training.fedpairing_lr_scale == "clients" else 1
        return protocol.run_fedpairing(fed, tcfg, lr=tcfg.lr_eta * scale)
    return protocol.run_baseline(algorithm, fed, tcfg)


# ---------------------------------------------------------------- output


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def metrics_rows(algorithm: str, history: Sequence[RoundMetrics]) -> List[List[Any]]:
    return [
        [m.round, algorithm, m.accuracy, m.loss, m.wall_clock_s, m.sum_objective_s, m.comm_s, m.compute_s]
        for m in history
    ]


# ---------------------------------------------------------------- experiments


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> Dict[str, Path]:
    """Train one algorithm on one seed; write ``rounds_seed<k>.csv`` and ``summary_seed<k>.json``."""
    out = Path(out_dir or cfg.output_dir)
    seed = cfg.seed
    fed, _ = build_federation(cfg, seed)
    init_acc, init_loss = protocol.initial_metrics(fed)
    history = run_algorithm(cfg.algorithm, fed, cfg, seed)
    csv_path = out / f"rounds_seed{seed}.csv"
    json_path = out / f"summary_seed{seed}.json"
    write_csv(csv_path, CSV_COLUMNS, metrics_rows(cfg.algorithm, history))
    write_json(json_path, {
        "schema": SCHEMA_VERSION,
        "algorithm": cfg.algorithm,
        "seed": seed,
        "initial_accuracy": init_acc,
        "final_accuracy": history[-1].accuracy,
        "final_loss": history[-1].loss,
        "mean_round_wall_clock_s": float(np.mean([m.wall_clock_s for m in history])),
        "matching": {"pairs": [list(p) for p in fed.matching.pairs], "unpaired": list(fed.matching.unpaired)},
        "config": asdict(cfg),
    })
    return {"csv": csv_path, "summary": json_path}


def pairing_round_times(cfg: ExperimentConfig, seed: int) -> Dict[str, Tuple[float, float]]:
    """(wall clock, sum objective) of one FedPairing round per strategy, analytically."""
    scenario = build_scenario(cfg, seed)
    ctx = cost_context(cfg, scenario, cfg.profile_dims())
    tcfg = cfg.training_config(seed)
    out = {}
    for strategy in PAIRING_STRATEGIES:
        lat = protocol.round_latency("fedpairing", ctx, tcfg, make_matching(strategy, scenario))
        out[strategy] = (lat.wall_clock_s, lat.sum_objective_s)
    return out


def algorithm_round_times(cfg: ExperimentConfig, seed: int) -> Dict[str, Tuple[float, float]]:
    """(wall clock, sum objective) of one round per algorithm on the analytic cost profile."""
    scenario = build_scenario(cfg, seed)
    ctx = cost_context(cfg, scenario, cfg.profile_dims())
    tcfg = cfg.training_config(seed)
    matching = make_matching(cfg.pairing, scenario)
    out = {}
    for alg in cfg.algorithms:
        lat = protocol.round_latency(alg, ctx, tcfg, matching if alg == "fedpairing" else None)
        out[alg] = (lat.wall_clock_s, lat.sum_objective_s)
    return out


def _seed_list(cfg: ExperimentConfig, count: int) -> List[int]:
    return [cfg.seed + k for k in range(count)]


def compare_pairing_mechanisms(cfg: ExperimentConfig, out_dir=None) -> Dict[str, float]:
    """Mean wall-clock round time per pairing strategy over ``cfg.num_seeds`` scenarios."""
    seeds = _seed_list(cfg, cfg.num_seeds)
    per_seed = {s: pairing_round_times(cfg, s) for s in seeds}
    means = {k: float(np.mean([per_seed[s][k][0] for s in seeds])) for k in PAIRING_STRATEGIES}
    if out_dir is not None or cfg.output_dir:
        out = Path(out_dir or cfg.output_dir)
        write_csv(
            out / "pairing_by_seed.csv",
            ("seed", "strategy", "wall_clock_s", "sum_objective_s"),
            [[s, k, *per_seed[s][k]] for s in sorted(seeds) for k in PAIRING_STRATEGIES],
        )
        write_csv(
            out / "pairing_comparison.csv",
            ("strategy", "mean_wall_clock_s", "std_wall_clock_s", "mean_sum_objective_s", "num_seeds"),
            [
                [k, means[k], float(np.std([per_seed[s][k][0] for s in seeds])),
                 float(np.mean([per_seed[s][k][1] for s in seeds])), len(seeds)]
                for k in PAIRING_STRATEGIES
            ],
        )
    return means


def compare_algorithm_times(cfg: ExperimentConfig) -> Dict[str, float]:
    seeds = _seed_list(cfg, cfg.num_seeds)
    per_seed = [algorithm_round_times(cfg, s) for s in seeds]
    return {a: float(np.mean([p[a][0] for p in per_seed])) for a in cfg.algorithms}


@dataclass
class ConvergenceResult:
    histories: Dict[Tuple[str, int, str], List[RoundMetrics]]  # (partition, seed, algorithm)
    initial_accuracy: Dict[Tuple[str, int, str], float]

    def final_accuracy(self, partition: str, algorithm: str) -> float:
        vals = [h[-1].accuracy for (p, _, a), h in sorted(self.histories.items()) if p == partition and a == algorithm]
        return float(np.mean(vals))


def run_convergence(cfg: ExperimentConfig, seeds: Optional[Sequence[int]] = None) -> ConvergenceResult:
    seeds = list(seeds) if seeds is not None else _seed_list(cfg, cfg.convergence_seeds)
    histories, initial = {}, {}
    for partition in cfg.partitions:
        for seed in seeds:
            fed, _ = build_federation(cfg, seed, partition)
            for alg in cfg.algorithms:
                # every algorithm starts from the same initial global model
                initial[(partition, seed, alg)] = protocol.initial_metrics(fed)[0]
                histories[(partition, seed, alg)] = run_algorithm(alg, fed, cfg, seed)
    return ConvergenceResult(histories, initial)


def compare_algorithms(cfg: ExperimentConfig, out_dir=None) -> Dict[str, Any]:
    """Round-time table (analytic profile) plus accuracy curves for each partition mode."""
    out = Path(out_dir or cfg.output_dir)
    times = compare_algorithm_times(cfg)
    write_csv(
        out / "algorithm_times.csv",
        ("algorithm", "mean_wall_clock_s", "num_seeds"),
        [[a, times[a], cfg.num_seeds] for a in cfg.algorithms],
    )
    conv = run_convergence(cfg)
    for partition in cfg.partitions:
        for seed in sorted({s for (p, s, _) in conv.histories if p == partition}):
            rows = []
            for alg in cfg.algorithms:
                rows += metrics_rows(alg, conv.histories[(partition, seed, alg)])
            write_csv(out / f"curves_{partition}_seed{seed}.csv", CSV_COLUMNS, rows)
    finals = {p: {a: conv.final_accuracy(p, a) for a in cfg.algorithms} for p in cfg.partitions}
    write_csv(
        out / "final_accuracy.csv",
        ("partition", "algorithm", "mean_final_accuracy", "num_seeds"),
        [[p, a, finals[p][a], cfg.convergence_seeds] for p in cfg.partitions for a in cfg.algorithms],
    )
    summary = {
        "schema": SCHEMA_VERSION,
        "seed": cfg.seed,
        "round_time_s": times,
        "final_accuracy": finals,
        "initial_accuracy": {f"{p}/{s}/{a}": v for (p, s, a), v in sorted(conv.initial_accuracy.items())},
        "config": asdict(cfg),
    }
    write_json(out / "algorithms_summary.json", summary)
    return summary
