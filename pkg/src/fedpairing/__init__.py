"""Deterministic simulator of client-pairing split federated learning."""
from .channel import ChannelParams, ClientProfile, LatencyBreakdown, comm_rate
from .data import Dataset, ShardSpec, generate_synthetic, partition_iid, partition_noniid, train_test_split
from .harness import ExperimentConfig, build_scenario, compare_algorithms, compare_pairing_mechanisms, run_experiment
from .model_core import GradientSlice, ModelParams, apply_cached_update, forward_range, backward_range, init_mlp
from .pairing import ClientGraph, Matching, WeightParams, build_graph, greedy_pairing, optimal_pairing_bruteforce
from .protocol import PairPlan, TrainingConfig, paired_local_training, run_baseline, run_fedpairing

__version__ = "0.1.0"
