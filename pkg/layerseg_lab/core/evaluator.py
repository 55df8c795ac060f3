import logging
from typing import Dict, Optional

import numpy as np

from ..errors import ShapeError
from .metrics import BoundaryReport, ErrorSamples, MetricsConfig, boundary_rows, signed_errors, wilcoxon_signed

logger = logging.getLogger(__name__)

DEFAULT_METHOD = "S+R-Net"


class Evaluator:
    def __init__(self, config: MetricsConfig = MetricsConfig()):
        self.config = config

    def _samples(self, pred: np.ndarray, truth: np.ndarray) -> ErrorSamples:
        pred = np.asarray(pred, dtype=np.float64)
        truth = np.asarray(truth, dtype=np.float64)
        if pred.ndim == 2:
            pred, truth = pred[None], truth[None]
        return signed_errors(pred, truth, self.config.resolution_um)

    def evaluate(
        self,
        predictions: np.ndarray,
        truth: np.ndarray,
        method: str = DEFAULT_METHOD,
        compare: Optional[Dict[str, np.ndarray]] = None,
    ) -> BoundaryReport:
        """Per-boundary and overall MAD/RMSE/MSD; optionally against other methods."""
        truth = np.asarray(truth, dtype=np.float64)
        if truth.ndim == 2:
            truth = truth[None]
        if truth.ndim != 3:
            raise ShapeError(f"truth must be [N, B, W], got shape {truth.shape}")
        num_scans, num_boundaries, _ = truth.shape

        methods = {method: predictions}
        methods.update(compare or {})
        samples = {name: self._samples(pred, truth) for name, pred in methods.items()}
        report = BoundaryReport(
            methods=list(methods),
            rows={name: boundary_rows(s, num_boundaries, self.config) for name, s in samples.items()},
            resolution_um=self.config.resolution_um,
            scans=num_scans,
        )
        if len(methods) > 1:
            first, second = report.methods[0], report.methods[1]
            for k in list(range(num_boundaries)) + [None]:
                a, b = samples[first].select(k), samples[second].select(k)
                report.p_mad.append(self._paired_p(a, b, "mad"))
                report.p_rmse.append(self._paired_p(a, b, "rmse"))
        logger.debug("evaluated %d method(s) on %d scan(s)", len(methods), num_scans)
        return report

    def _paired_p(self, a: ErrorSamples, b: ErrorSamples, statistic: str) -> Optional[float]:
        per_a, per_b = a.per_scan(statistic), b.per_scan(statistic)
        scans = sorted(set(per_a) & set(per_b))
        if not scans:
            return None
        return wilcoxon_signed(
            [per_a[s] for s in scans], [per_b[s] for s in scans], self.config.exact_max_n
        )
