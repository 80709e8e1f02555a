"""Per-stage latency accounting shared by the camera and client pipelines."""

import statistics
from dataclasses import dataclass


@dataclass(frozen=True, slots=True)
class StageStats:
    stage: str
    count: int
    mean_ms: float
    std_ms: float


class StageTimings:
    """Accumulates per-stage samples in milliseconds."""

    def __init__(self):
        self.samples: dict[str, list[float]] = {}

    def add(self, stage: str, ms: float) -> None:
        self.samples.setdefault(stage, []).append(ms)

    def count(self, stage: str) -> int:
        return len(self.samples.get(stage, []))

    def stats(self) -> dict[str, StageStats]:
        out = {}
        for stage, values in self.samples.items():
            out[stage] = StageStats(
                stage=stage, count=len(values),
                mean_ms=statistics.fmean(values) if values else 0.0,
                std_ms=statistics.pstdev(values) if len(values) > 1 else 0.0)
        return out

    def to_csv(self) -> str:
        lines = ["stage,count,mean_ms,stddev_ms"]
        for stage, s in sorted(self.stats().items()):
            lines.append(f"{stage},{s.count},{s.mean_ms:.6f},{s.std_ms:.6f}")
        return "\n".join(lines) + "\n"
