"""Flow evaluation metrics: end-point error, strict/relaxed accuracy, outliers,
and the rank correlation between predicted uncertainty and per-point error."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import stats

from .errors import InvalidArgumentError

REL_EPS = 1e-8

# strict inequalities throughout so golden values are exact
ACC_STRICT = (0.05, 0.05)
ACC_RELAX = (0.1, 0.10)
OUTLIER = (0.3, 0.10)


@dataclass
class MetricReport:
    epe3d: float
    acc3ds: float
    acc3dr: float
    outliers: float
    n_points_evaluated: int

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> MetricReport:
    """Per-point epe = ||pred − gt||; averages over mask=1 points only."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise InvalidArgumentError("pred and gt must both be (N,3)")
    if mask is None:
        valid = np.ones(pred.shape[0], dtype=bool)
    else:
        valid = np.asarray(mask).reshape(-1).astype(bool)
        if valid.shape[0] != pred.shape[0]:
            raise InvalidArgumentError("mask length must match point count")
    if not valid.any():
        raise InvalidArgumentError("no valid points")
    epe = np.linalg.norm(pred[valid] - gt[valid], axis=1)
    rel = epe / np.maximum(np.linalg.norm(gt[valid], axis=1), REL_EPS)
    acc3ds = np.mean((epe < ACC_STRICT[0]) | (rel < ACC_STRICT[1]))
    acc3dr = np.mean((epe < ACC_RELAX[0]) | (rel < ACC_RELAX[1]))
    outliers = np.mean((epe > OUTLIER[0]) | (rel > OUTLIER[1]))
    return MetricReport(epe3d=float(epe.mean()), acc3ds=float(acc3ds), acc3dr=float(acc3dr),
                        outliers=float(outliers), n_points_evaluated=int(valid.sum()))


def epe_per_point(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64), axis=1)


def uncertainty_auc(pred_u: np.ndarray, epe: np.ndarray) -> Tuple[float, bool]:
    """Spearman rank correlation between predicted uncertainty and per-point error.

    Returns (value, degenerate). Constant input yields (0.0, True).
    """
    pred_u = np.asarray(pred_u, dtype=np.float64).reshape(-1)
    epe = np.asarray(epe, dtype=np.float64).reshape(-1)
    if pred_u.shape != epe.shape or pred_u.size < 2:
        raise InvalidArgumentError("need two aligned vectors of length >= 2")
    if np.ptp(pred_u) == 0 or np.ptp(epe) == 0:
        return 0.0, True
    rho = stats.spearmanr(pred_u, epe).statistic
    return float(rho), False


def pool_reports(reports: list[MetricReport]) -> MetricReport:
    """Point-weighted pooling of per-sample reports (reduce order is the list order)."""
    if not reports:
        raise InvalidArgumentError("no reports to pool")
    total = sum(r.n_points_evaluated for r in reports)
    pooled = {
        key: sum(getattr(r, key) * r.n_points_evaluated for r in reports) / total
        for key in ("epe3d", "acc3ds", "acc3dr", "outliers")
    }
    return MetricReport(n_points_evaluated=total, **pooled)
