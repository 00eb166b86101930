"""Exponential decay schedules for learning and exploration rates."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class DecaySchedule:
    """``value(t) = max(floor, v0 * rate ** (t / horizon))``.

    One multiplication by ``rate`` per ``horizon`` steps, interpolated
    continuously in between. ``rate = 1`` gives a constant.
    """

    v0: float
    rate: float = 1.0
    horizon: int = 1
    floor: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise ValueError(f"decay rate must lie in (0, 1], got {self.rate}")
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.floor < 0:
            raise ValueError(f"floor must be non-negative, got {self.floor}")

    @classmethod
    def constant(cls, v: float) -> "DecaySchedule":
        return cls(float(v), 1.0, 1, 0.0)

    def value(self, t: int) -> float:
        # Same expression as the compiled kernels; keep in sync.
        return max(self.floor, self.v0 * self.rate ** (t / self.horizon))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (float(self.v0), float(self.rate), float(self.horizon), float(self.floor))

    def to_dict(self) -> dict:
        return {"v0": self.v0, "rate": self.rate, "horizon": self.horizon, "floor": self.floor}

    @classmethod
    def from_dict(cls, d) -> "DecaySchedule":
        if isinstance(d, (int, float)):
            return cls.constant(d)
        return cls(float(d["v0"]), float(d.get("rate", 1.0)), int(d.get("horizon", 1)), float(d.get("floor", 0.0)))


def schedule_value(sched: DecaySchedule, t: int) -> float:
    if t < 0:
        raise ValueError(f"step count must be non-negative, got {t}")
    return sched.value(t)
