"""Confusion matrices, OA / AA / kappa, and multi-trial aggregation."""

from dataclasses import dataclass, field
import logging
import time
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from src.models.types import MetricsSummary, TrialRow
from src.utils.errors import DataError

logger = logging.getLogger('esmlr.evaluation')


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray      # M x M, rows = true class, columns = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]


@dataclass
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    per_class: List[float]
    train_seconds: float = 0.0
    test_seconds: float = 0.0
    trial_seed: int = 0
    confusion: List[List[int]] = field(default_factory=list)

    @property
    def total_seconds(self) -> float:
        return self.train_seconds + self.test_seconds

    def to_dict(self) -> Dict:
        return {
            'oa': self.oa, 'aa': self.aa, 'kappa': self.kappa,
            'per_class': self.per_class,
            'train_seconds': self.train_seconds, 'test_seconds': self.test_seconds,
            'total_seconds': self.total_seconds,
            'trial_seed': self.trial_seed,
            'confusion': self.confusion,
        }


class Stopwatch:
    """Wall-clock timer for `with Stopwatch() as sw: ...; sw.seconds`."""

    def __enter__(self) -> 'Stopwatch':
        self.seconds = 0.0
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.seconds = time.perf_counter() - self._start


def confusion(y_true: Sequence[int], y_pred: Sequence[int], M: int) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError(f"Label sequences differ in length: {y_true.size} vs {y_pred.size}")
    if y_true.size == 0:
        return ConfusionMatrix(np.zeros((M, M), dtype=np.int64))
    for name, values in (('true', y_true), ('predicted', y_pred)):
        if values.min() < 1 or values.max() > M:
            raise DataError(f"{name} labels must lie in 1..{M}")

    counts = confusion_matrix(y_true, y_pred, labels=np.arange(1, M + 1))
    return ConfusionMatrix(counts.astype(np.int64))


def _require_scored(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise DataError("Confusion matrix is empty")


def oa(cm: ConfusionMatrix) -> float:
    _require_scored(cm)
    return float(np.trace(cm.counts) / cm.total)


def per_class_accuracy(cm: ConfusionMatrix) -> np.ndarray:
    _require_scored(cm)
    row_sums = cm.counts.sum(axis=1)
    if np.any(row_sums == 0):
        empty = (np.flatnonzero(row_sums == 0) + 1).tolist()
        raise DataError(f"Classes {empty} have no scored samples")
    return np.diag(cm.counts) / row_sums


def aa(cm: ConfusionMatrix) -> float:
    return float(per_class_accuracy(cm).mean())


def kappa(cm: ConfusionMatrix) -> float:
    """Cohen's kappa; with chance agreement 1 it is 1 for perfect agreement, else 0."""
    _require_scored(cm)
    # integer form of (p_o - p_e) / (1 - p_e), scaled by total^2
    total = cm.total
    agree = int(np.trace(cm.counts))
    chance = int((cm.counts.sum(axis=1) * cm.counts.sum(axis=0)).sum())
    if chance == total * total:
        return 1.0 if agree == total else 0.0
    return (total * agree - chance) / (total * total - chance)


def score(y_true: Sequence[int], y_pred: Sequence[int], M: int, train_seconds: float = 0.0,
          test_seconds: float = 0.0, trial_seed: int = 0) -> MetricsReport:
    cm = confusion(y_true, y_pred, M)
    return MetricsReport(
        oa=oa(cm), aa=aa(cm), kappa=kappa(cm),
        per_class=per_class_accuracy(cm).tolist(),
        train_seconds=train_seconds, test_seconds=test_seconds,
        trial_seed=trial_seed, confusion=cm.counts.tolist(),
    )


def aggregate(reports: Sequence[MetricsReport]) -> MetricsSummary:
    """Means and sample standard deviations (0 for a single report)."""
    if not reports:
        raise DataError("Nothing to aggregate")
    widths = {len(r.per_class) for r in reports}
    if len(widths) != 1:
        raise DataError(f"Reports disagree on the class count: {sorted(widths)}")

    def stats(values) -> tuple:
        values = np.asarray(values, dtype=np.float64)
        std = values.std(axis=0, ddof=1) if values.shape[0] > 1 else np.zeros(values.shape[1:])
        return values.mean(axis=0), std

    oa_mean, oa_std = stats([r.oa for r in reports])
    aa_mean, aa_std = stats([r.aa for r in reports])
    kappa_mean, kappa_std = stats([r.kappa for r in reports])
    pc_mean, pc_std = stats([r.per_class for r in reports])

    return MetricsSummary(
        trials=len(reports),
        oa_mean=float(oa_mean), oa_std=float(oa_std),
        aa_mean=float(aa_mean), aa_std=float(aa_std),
        kappa_mean=float(kappa_mean), kappa_std=float(kappa_std),
        per_class_mean=np.atleast_1d(pc_mean).tolist(), per_class_std=np.atleast_1d(pc_std).tolist(),
        train_seconds_mean=float(np.mean([r.train_seconds for r in reports])),
        test_seconds_mean=float(np.mean([r.test_seconds for r in reports])),
        total_seconds_mean=float(np.mean([r.total_seconds for r in reports])),
    )


def trial_row(variant: str, mode: str, trial: int, report: MetricsReport) -> TrialRow:
    return TrialRow(variant=variant, mode=mode, trial=trial, seed=report.trial_seed,
                    oa=report.oa, aa=report.aa, kappa=report.kappa, per_class=report.per_class,
                    train_s=report.train_seconds, test_s=report.test_seconds)


def trials_frame(rows: Sequence[TrialRow], with_timings: bool = False) -> pd.DataFrame:
    """One row per trial with per-class columns class_1..class_M, sorted by trial."""
    records = []
    for row in sorted(rows, key=lambda r: r['trial']):
        record = {k: row[k] for k in ('variant', 'mode', 'trial', 'seed', 'oa', 'aa', 'kappa')}
        for m, value in enumerate(row['per_class'], start=1):
            record[f'class_{m}'] = value
        if with_timings:
            record['train_s'] = row['train_s']
            record['test_s'] = row['test_s']
            record['total_s'] = row['train_s'] + row['test_s']
        records.append(record)
    return pd.DataFrame.from_records(records)


def timings_frame(rows: Sequence[TrialRow]) -> pd.DataFrame:
    frame = trials_frame(rows, with_timings=True)
    return frame[['variant', 'mode', 'trial', 'seed', 'train_s', 'test_s', 'total_s']]


def write_csv(frame: pd.DataFrame, path: str) -> None:
    """Fixed float formatting and line endings so identical results give identical bytes."""
    frame.to_csv(path, index=False, float_format='%.10f', lineterminator='\n')
    logger.debug(f"Wrote {len(frame)} rows to {path}")
