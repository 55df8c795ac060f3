import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import norm, rankdata

from ..errors import ShapeError

logger = logging.getLogger(__name__)

BOUNDARY_NAMES = [
    "Vitre-RNFL", "RNFL-GCL", "IPL-INL", "INL-OPL", "OPL-ONL", "ELM", "IS-OS", "OS-RPE", "RPE",
]
PAIRING_NOTE = "Wilcoxon signed test pairs per-scan mean errors (n = number of scans)"


class MetricsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    resolution_um: float = Field(3.9, gt=0)
    exact_max_n: int = Field(12, ge=0)
    lower_percentile: float = Field(2.5, ge=0, le=100)
    upper_percentile: float = Field(97.5, ge=0, le=100)


def boundary_name(index: int, count: int) -> str:
    if count == len(BOUNDARY_NAMES):
        return BOUNDARY_NAMES[index]
    return f"B{index + 1}"


@dataclass
class ErrorSamples:
    """Signed (predicted - true) errors in micrometers, one per (scan, boundary, column)."""

    values: np.ndarray
    boundary: np.ndarray
    column: np.ndarray
    scan: np.ndarray

    def __len__(self) -> int:
        return int(self.values.size)

    def select(self, boundary: Optional[int] = None) -> "ErrorSamples":
        if boundary is None:
            return self
        keep = self.boundary == boundary
        return ErrorSamples(self.values[keep], self.boundary[keep], self.column[keep], self.scan[keep])

    def per_scan(self, statistic: str = "mad") -> Dict[int, float]:
        out = {}
        for scan in np.unique(self.scan):
            d = self.values[self.scan == scan]
            out[int(scan)] = float(np.mean(np.abs(d))) if statistic == "mad" else float(np.sqrt(np.mean(d * d)))
        return out


def signed_errors(
    pred: np.ndarray, truth: np.ndarray, resolution_um: float = 3.9, scan: int = 0
) -> ErrorSamples:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match truth {truth.shape}")
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
        scans = np.array([scan])
    elif pred.ndim == 3:
        scans = scan + np.arange(pred.shape[0])
    else:
        raise ShapeError(f"boundary sets must be [B, W] or [N, B, W], got shape {pred.shape}")
    d = (pred - truth) * resolution_um
    if not np.isfinite(d).all():
        raise ShapeError("boundary errors contain non-finite values")
    n, b, w = d.shape
    grid_scan, grid_boundary, grid_column = np.meshgrid(scans, np.arange(b), np.arange(w), indexing="ij")
    return ErrorSamples(
        values=d.reshape(-1),
        boundary=grid_boundary.reshape(-1),
        column=grid_column.reshape(-1),
        scan=grid_scan.reshape(-1),
    )


@dataclass
class AggregateRow:
    label: str
    mad: float
    rmse: float
    msd: float
    lower: float
    upper: float
    count: int


def aggregate(samples, label: str = "Overall", cfg: MetricsConfig = MetricsConfig()) -> AggregateRow:
    d = np.asarray(samples.values if isinstance(samples, ErrorSamples) else samples, dtype=np.float64)
    if d.size == 0:
        raise ShapeError("cannot aggregate an empty sample set")
    d = np.sort(d)
    msd = float(np.mean(d))
    mad = float(np.mean(np.abs(d)))
    rmse = float(np.sqrt(np.mean(d * d)))
    lower, upper = np.percentile(d, [cfg.lower_percentile, cfg.upper_percentile], method="linear")
    return AggregateRow(label, mad, rmse, msd, float(lower), float(upper), int(d.size))


def _signed_ranks(x, y):
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    return d, ranks


def _exact_counts(doubled: np.ndarray) -> np.ndarray:
    """Number of sign assignments reaching each positive-rank sum (doubled ranks)."""
    counts = np.zeros(int(doubled.sum()) + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed(x, y, exact_max_n: int = 12) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"paired samples need equal 1-d shapes, got {x.shape} and {y.shape}")
    d, ranks = _signed_ranks(x, y)
    n = d.size
    if n == 0:
        return 1.0
    w_plus = float(ranks[d > 0].sum())
    logger.debug("signed-rank test: n=%d, %s", n, "exact" if n <= exact_max_n else "normal approximation")

    if n <= exact_max_n:
        # average ranks are multiples of 1/2
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _exact_counts(doubled)
        observed = int(round(2 * w_plus))
        total = 2 ** n
        lower = int(counts[:observed + 1].sum())
        upper = int(counts[observed:].sum())
        return min(1.0, 2 * min(lower, upper) / total)

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts ** 3 - tie_counts).sum()) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(z)))


@dataclass
class BoundaryReport:
    methods: List[str]
    rows: Dict[str, List[AggregateRow]] = field(default_factory=dict)
    p_mad: List[Optional[float]] = field(default_factory=list)
    p_rmse: List[Optional[float]] = field(default_factory=list)
    resolution_um: float = 3.9
    scans: int = 0
    note: str = PAIRING_NOTE
    unstacked: Optional[Tuple[int, int]] = None

    @property
    def labels(self) -> List[str]:
        return [row.label for row in self.rows[self.methods[0]]]

    def format_table(self) -> str:
        compare = len(self.methods) > 1
        header = [f"# boundary errors in micrometers ({self.resolution_um} um/px), {self.scans} scan(s)"]
        if compare:
            header.append(f"# {self.note}")
        if self.unstacked is not None:
            header.append(f"# S-Net label columns not stacked: {self.unstacked[0]}/{self.unstacked[1]}")
        name_width = max(10, *(len(label) for label in self.labels))

        cols = ["Boundary".ljust(name_width)]
        for m in self.methods:
            cols.append(f"MAD {m}".rjust(14))
        if compare:
            cols.append("p".rjust(6))
        for m in self.methods:
            cols.append(f"RMSE {m}".rjust(14))
        if compare:
            cols.append("p".rjust(6))
        for m in self.methods:
            cols.append(f"MSD (95% quantile) {m}".rjust(36))
        lines = header + ["  ".join(cols)]
        lines.append("-" * len(lines[-1]))

        for i, label in enumerate(self.labels):
            if label == "Overall":
                lines.append("-" * len(lines[len(header)]))
            row = [label.ljust(name_width)]
            per_method = [self.rows[m][i] for m in self.methods]
            row += [f"{r.mad:14.2f}" for r in per_method]
            if compare:
                row.append(_format_p(self.p_mad[i]))
            row += [f"{r.rmse:14.2f}" for r in per_method]
            if compare:
                row.append(_format_p(self.p_rmse[i]))
            row += [f"{r.msd:6.2f} ({r.lower:7.2f}, {r.upper:7.2f})".rjust(36) for r in per_method]
            lines.append("  ".join(row))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["boundary", "method", "mad_um", "rmse_um", "msd_um", "q025_um", "q975_um", "n", "p_mad", "p_rmse"])
        for i, label in enumerate(self.labels):
            for m in self.methods:
                r = self.rows[m][i]
                p_mad = self.p_mad[i] if self.p_mad else None
                p_rmse = self.p_rmse[i] if self.p_rmse else None
                writer.writerow([
                    label, m, f"{r.mad:.6f}", f"{r.rmse:.6f}", f"{r.msd:.6f}", f"{r.lower:.6f}", f"{r.upper:.6f}",
                    r.count, "" if p_mad is None else f"{p_mad:.6f}", "" if p_rmse is None else f"{p_rmse:.6f}",
                ])
        return buf.getvalue()


def _format_p(p: Optional[float]) -> str:
    return "   n/a" if p is None else f"{p:6.2f}"


def boundary_rows(samples: ErrorSamples, num_boundaries: int, cfg: MetricsConfig = MetricsConfig()) -> List[AggregateRow]:
    rows = [
        aggregate(samples.select(k), boundary_name(k, num_boundaries), cfg) for k in range(num_boundaries)
    ]
    rows.append(aggregate(samples, "Overall", cfg))
    return rows
