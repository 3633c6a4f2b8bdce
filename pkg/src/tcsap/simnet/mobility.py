"""Static and random-waypoint mobility."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MobilityModel:
    kind: str = "static"
    max_speed: float = 0.0
    min_speed: float | None = None
    pause: float = 0.0
    step: float = 0.1

    @property
    def moving(self) -> bool:
        return self.kind == "random-waypoint" and self.max_speed > 0


class RandomWaypoint:
    """Per-node waypoint state; positions never leave the area."""

    def __init__(self, model: MobilityModel, positions: np.ndarray, area, rng: np.random.Generator):
        self.model = model
        self.area = np.asarray(area, dtype=float)
        self.rng = rng
        n = len(positions)
        self.targets = self._draw_targets(n)
        self.speeds = self._draw_speeds(n)
        self.pause_left = np.zeros(n)

    def _draw_targets(self, n: int) -> np.ndarray:
        return self.rng.uniform(0.0, 1.0, size=(n, 2)) * self.area

    def _draw_speeds(self, n: int) -> np.ndarray:
        lo = self.model.max_speed if self.model.min_speed is None else self.model.min_speed
        return self.rng.uniform(lo, self.model.max_speed, size=n) if n else np.zeros(0)

    def step(self, positions: np.ndarray, dt: float) -> np.ndarray:
        if dt <= 0:
            raise ValueError("dt must be positive")
        pos = positions.copy()
        if not self.model.moving:
            return pos
        moving = self.pause_left <= 0
        self.pause_left = np.maximum(self.pause_left - dt, 0.0)
        delta = self.targets - pos
        dist = np.hypot(delta[:, 0], delta[:, 1])
        travel = self.speeds * dt
        arrive = moving & (dist <= travel)
        go = moving & ~arrive
        scale = np.divide(travel, dist, out=np.zeros_like(dist), where=dist > 0)
        pos[go] += delta[go] * scale[go, None]
        pos[arrive] = self.targets[arrive]
        k = int(arrive.sum())
        if k:
            self.targets[arrive] = self._draw_targets(k)
            self.speeds[arrive] = self._draw_speeds(k)
            self.pause_left[arrive] = self.model.pause
        return np.clip(pos, 0.0, self.area)


def step_mobility(model: MobilityModel, positions, dt: float, rng, state: RandomWaypoint | None = None, area=(1000.0, 1000.0)):
    """One mobility tick.  Pass the returned waypoint state back in next time."""
    positions = np.asarray(positions, dtype=float)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not model.moving:
        return positions.copy(), state
    if state is None:
        state = RandomWaypoint(model, positions, area, rng)
    return state.step(positions, dt), state
