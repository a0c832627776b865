"""Built-in problem instances: the toy scenarios, the two factories and the motivating example."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import SourceSpec, SystemSpec, SystemState


def _check_prob(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def _single_state(obs: list[float]) -> SourceSpec:
    return SourceSpec(np.ones((1, 1)), np.array(obs, float)[:, None])


def scenario_toy(variant: str, p: float, alpha: float = 0.5) -> SystemSpec:
    """Toy scenarios a, b and c with perfect channels.

    In b and c, state 0 of each source is its observable state (``x1``).
    Source 1 is observable a fraction 1 - alpha of the time, source 2 a
    fraction alpha.
    """
    p = _check_prob("p", p)
    alpha = _check_prob("alpha", alpha)
    if variant == "a":
        return SystemSpec(np.ones(3), (_single_state([p, 0.0, 1 - p]), _single_state([0.0, p, 1 - p])))
    R1 = np.array([[1 - alpha, alpha], [1 - alpha, alpha]])
    R2 = np.array([[alpha, 1 - alpha], [alpha, 1 - alpha]])
    if variant == "b":
        obs1 = np.array([[p, 0.0], [0.0, 0.0]])
        obs2 = np.array([[0.0, 0.0], [1 - p, 0.0]])
        return SystemSpec(np.ones(2), (SourceSpec(R1, obs1), SourceSpec(R2, obs2)))
    if variant == "c":
        obs1 = np.array([[p, 0.0], [0.0, 0.0], [1 - p, 0.0]])
        obs2 = np.array([[0.0, 0.0], [p, 0.0], [1 - p, 0.0]])
        return SystemSpec(np.ones(3), (SourceSpec(R1, obs1), SourceSpec(R2, obs2)))
    raise ValueError(f"unknown toy variant {variant!r}")


def ring_transition(num_zones: int, alpha: float) -> np.ndarray:
    R = np.zeros((num_zones, num_zones))
    for i in range(num_zones):
        R[i, i] += 1 - 2 * alpha
        R[i, (i + 1) % num_zones] += alpha
        R[i, (i - 1) % num_zones] += alpha
    return R


def scenario_small_factory(alpha: float, p: float, num_agvs: int = 3) -> SystemSpec:
    """Four zones on a ring, cameras on zones 1, 2 and 4 (states 0, 1, 3); zone 3 is hidden."""
    alpha = _check_prob("alpha", alpha)
    p = _check_prob("p", p)
    if alpha > 0.5:
        raise ValueError("alpha must be at most 1/2 for a four-zone ring")
    R = ring_transition(4, alpha)
    obs = np.zeros((3, 4))
    for camera, zone in enumerate((0, 1, 3)):
        obs[camera, zone] = p
    return SystemSpec(np.ones(3), tuple(SourceSpec(R, obs) for _ in range(num_agvs)))


def grid_transition(side: int, alpha: float) -> np.ndarray:
    """Nearest-neighbour walk on a side x side grid; missing neighbours add to the stay probability."""
    n = side * side
    R = np.zeros((n, n))
    for r in range(side):
        for c in range(side):
            i = r * side + c
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < side and 0 <= cc < side:
                    R[i, rr * side + cc] = alpha
            R[i, i] = 1.0 - R[i].sum()
    return R


def hierarchical_sensors(side: int, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Observation matrix ``(num_sensors, side**2)`` and the level of each sensor.

    Level l sensors cover 2^(l-1) x 2^(l-1) blocks and observe with
    probability gamma^(l-1).  Sensors are ordered by level, then row-major
    by block.
    """
    rows, levels = [], []
    level, block = 1, 1
    while block <= side:
        for br in range(0, side, block):
            for bc in range(0, side, block):
                row = np.zeros((side, side))
                row[br:br + block, bc:bc + block] = gamma ** (level - 1)
                rows.append(row.ravel())
                levels.append(level)
        level += 1
        block *= 2
    return np.array(rows), np.array(levels)


def scenario_large_factory(gamma: float, alpha: float, side: int = 8, num_agvs: int = 10) -> SystemSpec:
    """8 x 8 grid with 85 hierarchical cameras (64 + 16 + 4 + 1) and 10 AGVs."""
    gamma = float(gamma)
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    alpha = _check_prob("alpha", alpha)
    if alpha > 0.25:
        raise ValueError("alpha must be at most 1/4 on a grid")
    R = grid_transition(side, alpha)
    obs, _ = hierarchical_sensors(side, gamma)
    return SystemSpec(np.ones(obs.shape[0]), tuple(SourceSpec(R, obs) for _ in range(num_agvs)))


# Motivating example states: zone 1 takes two slots, so it is split in two.
MOTIVATING_ZONES = ("Z1a", "Z1b", "Z2", "Z3", "Z4")
MOTIVATING_CAMERAS = ("C4", "C1", "C2")


def scenario_motivating() -> tuple[SystemSpec, SystemState]:
    """Deterministic four-zone round with three AGVs and three cameras.

    Cameras are ordered C4, C1, C2.  With lowest-index tie-breaking this
    order reproduces the tie resolutions of the reference myopic schedule
    (C1 over C2, C4 over C1).  The chain is periodic by construction, so
    the returned spec fails :func:`~aoisched.model.validate`.
    """
    R = np.zeros((5, 5))
    for s in range(5):
        R[s, (s + 1) % 5] = 1.0
    obs = np.zeros((3, 5))
    obs[0, 4] = 1.0  # C4 sees Z4
    obs[1, 0] = obs[1, 1] = 1.0  # C1 sees both halves of Z1
    obs[2, 2] = 1.0  # C2 sees Z2
    spec = SystemSpec(np.ones(3), tuple(SourceSpec(R, obs) for _ in range(3)))
    return spec, SystemState((1, 2, 3), (1, 1, 4))


@dataclass(frozen=True)
class ScenarioConfig:
    """A named built-in scenario plus its parameters."""

    name: str
    params: dict = field(default_factory=dict)

    def build(self) -> SystemSpec:
        return build_scenario(self.name, **self.params)


SCENARIOS = ("toy-a", "toy-b", "toy-c", "small-factory", "large-factory", "motivating")


def build_scenario(name: str, p: float | None = None, alpha: float | None = None, gamma: float | None = None) -> SystemSpec:
    def need(label, value):
        if value is None:
            raise ValueError(f"scenario {name!r} requires --{label}")
        return value

    if name == "toy-a":
        return scenario_toy("a", need("p", p))
    if name in ("toy-b", "toy-c"):
        return scenario_toy(name[-1], need("p", p), need("alpha", alpha))
    if name == "small-factory":
        return scenario_small_factory(need("alpha", alpha), need("p", p))
    if name == "large-factory":
        return scenario_large_factory(need("gamma", gamma), need("alpha", alpha))
    if name == "motivating":
        return scenario_motivating()[0]
    raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
