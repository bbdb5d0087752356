"""Per-iteration traces and the result record returned by every solver."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import RigidTransform

METHODS = ("icp", "fast-icp", "robust-icp", "icp-pl", "robust-icp-pl")

# accepted-iterate kinds
AA = "AA"
PLAIN = "plain"
LINESEARCH = "linesearch"
FALLBACK = "fallback"


@dataclass
class TraceRecord:
    stage: int
    iter: int
    nu: float
    energy: float
    accepted: str
    delta_T_fro: float
    wall_ms: float


@dataclass
class EnergyTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    @property
    def energies(self) -> np.ndarray:
        return np.array([r.energy for r in self.records])

    def stages(self) -> list[list[TraceRecord]]:
        out: dict[int, list[TraceRecord]] = {}
        for r in self.records:
            out.setdefault(r.stage, []).append(r)
        return [out[k] for k in sorted(out)]

    def monotonicity_violations(self, rtol: float = 1e-12) -> list[tuple[TraceRecord, TraceRecord]]:
        """Consecutive within-stage pairs whose energy went up.

        Iterates flagged as a line-search fallback are exempt; they are the
        documented best-effort outcome when no trial step decreased the energy.
        ``rtol`` absorbs summation round-off only.
        """
        bad = []
        for stage in self.stages():
            for prev, cur in zip(stage, stage[1:]):
                if cur.accepted == FALLBACK:
                    continue
                if cur.energy > prev.energy + rtol * max(abs(prev.energy), 1.0):
                    bad.append((prev, cur))
        return bad


@dataclass
class RegistrationReport:
    method: str
    final_transform: RigidTransform
    trace: EnergyTrace
    iterations: int
    wall_time_seconds: float
    rmse: float | None = None
    nu_max: float | None = None
    nu_min: float | None = None
    convergence: str = ""
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "final_transform": self.final_transform.matrix().tolist(),
            "rmse": self.rmse,
            "iterations": self.iterations,
            "wall_time_seconds": self.wall_time_seconds,
            "nu_max": self.nu_max,
            "nu_min": self.nu_min,
            "convergence": self.convergence,
            "notes": list(self.notes),
            "final_energy": float(self.trace.records[-1].energy) if self.trace.records else None,
        }
