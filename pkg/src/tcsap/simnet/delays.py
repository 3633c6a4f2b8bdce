"""Link latency, loss and per-primitive CPU cost."""

from __future__ import annotations

from dataclasses import dataclass, fields

# Placeholder costs in seconds.  They shape trends; they are not measurements.
DEFAULT_CRYPTO = {
    "sign": 0.005,
    "verify": 0.0002,
    "partial_sign": 0.006,
    "verify_partial": 0.0004,
    "combine": 0.002,
    "jvrss": 0.010,
}


@dataclass(frozen=True)
class DelayModel:
    link_min: float = 0.002
    link_max: float = 0.010
    loss: float = 0.0
    sign: float = DEFAULT_CRYPTO["sign"]
    verify: float = DEFAULT_CRYPTO["verify"]
    partial_sign: float = DEFAULT_CRYPTO["partial_sign"]
    verify_partial: float = DEFAULT_CRYPTO["verify_partial"]
    combine: float = DEFAULT_CRYPTO["combine"]
    jvrss: float = DEFAULT_CRYPTO["jvrss"]

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")
        if self.link_max < self.link_min:
            raise ValueError("link_max < link_min")
        if self.loss >= 1:
            raise ValueError("loss must be < 1")

    def link(self, rng) -> float:
        return rng.uniform(self.link_min, self.link_max)

    def lost(self, rng) -> bool:
        return self.loss > 0 and rng.random() < self.loss

    def cost(self, op: str, count: int = 1) -> float:
        return getattr(self, op) * count
