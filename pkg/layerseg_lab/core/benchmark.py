import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .inference import STAGES, check_compatible, infer_volume
from .nets import Network
from .preprocessing import PipelineConfig

logger = logging.getLogger(__name__)

# network inference time on one 496x1024x49 volume, for context in reports
REFERENCE_INFERENCE_S = 5.85
REFERENCE_TOTAL_S = 10.0


@dataclass
class RunTiming:
    run: int
    stages: Dict[str, float] = field(default_factory=dict)
    total: float = 0.0
    wall: float = 0.0
    error: Optional[str] = None


@dataclass
class TimingReport:
    scans: int
    height: int
    width: int
    threads: int
    runs: List[RunTiming] = field(default_factory=list)

    def _ok(self) -> List[RunTiming]:
        return [r for r in self.runs if r.error is None]

    def median(self, stage: str) -> float:
        values = [r.total if stage == "total" else r.stages[stage] for r in self._ok()]
        return float(np.median(values)) if values else float("nan")

    def spread(self, stage: str) -> float:
        values = [r.total if stage == "total" else r.stages[stage] for r in self._ok()]
        return float(np.max(values) - np.min(values)) if values else float("nan")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["median"] = {s: self.median(s) for s in (*STAGES, "total")}
        data["spread"] = {s: self.spread(s) for s in (*STAGES, "total")}
        return data

    def format_text(self) -> str:
        lines = [
            f"# volume {self.scans}x{self.height}x{self.width}, {len(self._ok())}/{len(self.runs)} runs, "
            f"{self.threads} thread(s)",
            f"{'stage':<16}{'median s':>12}{'spread s':>12}",
        ]
        for stage in (*STAGES, "total"):
            lines.append(f"{stage:<16}{self.median(stage):12.3f}{self.spread(stage):12.3f}")
        for r in self.runs:
            if r.error:
                lines.append(f"run {r.run}: ERROR - {r.error}")
        lines.append(
            f"# reference: {REFERENCE_INFERENCE_S} s network inference, {REFERENCE_TOTAL_S} s total per "
            f"496x1024x49 volume (report only)"
        )
        return "\n".join(lines) + "\n"


def benchmark(
    volume: np.ndarray,
    snet: Network,
    rnet: Network,
    cfg: PipelineConfig = PipelineConfig(),
    runs: int = 3,
    threads: int = 1,
) -> TimingReport:
    """Stage timings summed over the B-scans of a volume, repeated ``runs`` times."""
    volume = np.asarray(volume)
    if volume.ndim == 2:
        volume = volume[None]
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    check_compatible(snet, rnet, cfg)
    report = TimingReport(scans=volume.shape[0], height=volume.shape[1], width=volume.shape[2], threads=threads)
    for run in range(runs):
        started = time.perf_counter()
        try:
            results = infer_volume(volume, snet, rnet, cfg, threads=threads)
        except Exception as e:
            logger.warning("benchmark run %d failed: %s", run, e)
            report.runs.append(RunTiming(run=run, error=str(e)))
            continue
        stages = {s: float(sum(r.timings[s] for r in results)) for s in STAGES}
        report.runs.append(
            RunTiming(
                run=run,
                stages=stages,
                total=float(sum(r.timings["total"] for r in results)),
                wall=time.perf_counter() - started,
            )
        )
        logger.info("benchmark run %d: %.3fs", run, report.runs[-1].total)
    return report
