"""Mixing-weight schedules: alpha as a pure function of the training step."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from memgate.errors import ContractViolation

KINDS = ("constant", "gradual", "cyclic")


@dataclass(frozen=True)
class ScheduleSpec:
    """``gradual`` ramps linearly from ``start_value`` to ``target_value`` over
    ``ramp_steps`` steps then holds; ``cyclic`` dwells ``cycle_period`` steps
    on each entry of ``cycle_values`` in turn."""

    kind: str = "constant"
    constant_value: float = 0.5
    start_value: float = 0.01
    target_value: float = 0.5
    ramp_steps: int = 100
    cycle_values: tuple[float, ...] = field(default=(0.0, 0.5, 1.0))
    cycle_period: int = 100

    def __post_init__(self):
        object.__setattr__(self, "cycle_values", tuple(float(v) for v in self.cycle_values))
        if self.kind not in KINDS:
            raise ContractViolation(f"schedule kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "constant":
            _check_unit(self.constant_value, "constant_value")
        elif self.kind == "gradual":
            _check_unit(self.start_value, "start_value")
            _check_unit(self.target_value, "target_value")
            if self.ramp_steps < 1:
                raise ContractViolation(f"ramp_steps must be >= 1, got {self.ramp_steps}")
        else:
            if not self.cycle_values:
                raise ContractViolation("cycle_values must not be empty")
            for v in self.cycle_values:
                _check_unit(v, "cycle value")
            if self.cycle_period < 1:
                raise ContractViolation(f"cycle_period must be >= 1, got {self.cycle_period}")

    @property
    def period(self) -> int | None:
        """Steps after which the schedule repeats (cyclic only)."""
        if self.kind != "cyclic":
            return None
        return self.cycle_period * len(self.cycle_values)


def _check_unit(value: float, what: str) -> None:
    if not 0.0 <= value <= 1.0:
        raise ContractViolation(f"{what} must lie in [0, 1], got {value}")


def alpha_at(spec: ScheduleSpec, step: int) -> float:
    if step < 0:
        raise ContractViolation(f"step must be >= 0, got {step}")
    if spec.kind == "constant":
        return spec.constant_value
    if spec.kind == "gradual":
        frac = min(step / spec.ramp_steps, 1.0)
        return spec.start_value + (spec.target_value - spec.start_value) * frac
    idx = (step // spec.cycle_period) % len(spec.cycle_values)
    return spec.cycle_values[idx]


def schedule_rows(spec: ScheduleSpec, steps: range) -> list[tuple[int, float]]:
    return [(s, alpha_at(spec, s)) for s in steps]


def write_schedule_csv(spec: ScheduleSpec, steps: range, path) -> Path:
    """Dump ``step,alpha`` rows for ``steps`` to ``path``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "alpha"])
        for step, alpha in schedule_rows(spec, steps):
            writer.writerow([step, repr(alpha)])
    return path
