"""Scenario builders and the Monte-Carlo experiment harness."""
from .engine import EpisodeStats, ReplicationResult, child_seed, policy_map, replicate, run_episode, simulate
from .policies import IncompatiblePolicyError, ObservationBatch, PolicyHandle
from .scenarios import (
    SCENARIOS,
    ScenarioConfig,
    build_scenario,
    scenario_large_factory,
    scenario_motivating,
    scenario_small_factory,
    scenario_toy,
)

__all__ = [
    "EpisodeStats",
    "IncompatiblePolicyError",
    "ObservationBatch",
    "PolicyHandle",
    "ReplicationResult",
    "SCENARIOS",
    "ScenarioConfig",
    "build_scenario",
    "child_seed",
    "policy_map",
    "replicate",
    "run_episode",
    "scenario_large_factory",
    "scenario_motivating",
    "scenario_small_factory",
    "scenario_toy",
    "simulate",
]
