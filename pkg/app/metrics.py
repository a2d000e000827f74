"""
Learning curves: metrics CSV persistence, Simpson's-rule AUC and multi-seed summaries.
"""
import csv
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError
from scipy.integrate import simpson

from app.core.errors import InputError
from app.schemas import CSV_COLUMNS, MetricsRow, RunSummary, SeedSummary

logger = logging.getLogger(__name__)

AUC_DELTA = 5
FINAL_WINDOW = 0.05


@dataclass(frozen=True)
class LearningCurve:
    """(step, value) pairs with strictly increasing steps."""

    steps: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        steps = np.asarray(self.steps, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if steps.shape != values.shape or steps.ndim != 1:
            raise InputError(f"Curve needs matching 1-D steps and values, got {steps.shape} and {values.shape}")
        if len(steps) > 1 and not (np.diff(steps) > 0).all():
            raise InputError("Curve steps must be strictly increasing")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def spacing(self) -> Optional[float]:
        """Common step spacing, or None when spacing is not uniform."""
        if len(self) < 2:
            return None
        gaps = np.diff(self.steps)
        return float(gaps[0]) if np.allclose(gaps, gaps[0], rtol=1e-9, atol=0) else None

    def clipped(self, threshold: float) -> "LearningCurve":
        return LearningCurve(self.steps, np.maximum(self.values - threshold, 0.0))


def resample(curve: LearningCurve, delta: float = AUC_DELTA) -> LearningCurve:
    """Linear interpolation onto steps first, first+delta, ... up to the last logged step."""
    if curve.spacing == delta:
        return curve
    grid = np.arange(curve.steps[0], curve.steps[-1] + delta / 2, delta)
    grid = grid[grid <= curve.steps[-1]]
    return LearningCurve(grid, np.interp(grid, curve.steps, curve.values))


def compute_auc(curve: LearningCurve) -> float:
    """
    Composite Simpson integral over a uniformly spaced curve.

    An even number of points leaves an odd interval count; the trailing point
    is dropped with a warning.

    Raises:
        InputError: With fewer than 3 points or non-uniform spacing
    """
    if len(curve) < 3:
        raise InputError(f"AUC needs at least 3 points, got {len(curve)}")
    spacing = curve.spacing
    if spacing is None:
        raise InputError("AUC needs uniformly spaced steps")

    values = curve.values
    if len(values) % 2 == 0:
        logger.warning(f"Even number of curve points ({len(values)}); dropping the last one for Simpson's rule")
        values = values[:-1]
    return float(simpson(values, dx=spacing))


def auc_above_threshold(curve: LearningCurve, threshold: float) -> float:
    """Simpson integral of max(value - threshold, 0)."""
    return compute_auc(curve.clipped(threshold))


def write_metrics_csv(path: str | Path, rows: Iterable[MetricsRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_csv())
    return path


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    """
    Parse a metrics CSV.

    Raises:
        InputError: If the file is missing, lacks the step column, or a row is
            malformed (the message carries the file line number)
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"Metrics file not found: {path}")

    rows = []
    with path.open(newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or "step" not in reader.fieldnames:
            raise InputError(f"{path}: missing header with a 'step' column")
        for record in reader:
            line = reader.line_num
            if None in record or any(value is None for value in record.values()):
                raise InputError(f"{path}:{line}: wrong number of fields")
            data = {key: (value if value != "" else None) for key, value in record.items() if key in CSV_COLUMNS}
            try:
                rows.append(MetricsRow.model_validate(data))
            except ValidationError as e:
                raise InputError(f"{path}:{line}: malformed row ({e.error_count()} error(s))") from e
    return rows


def eval_curve(rows: Sequence[MetricsRow]) -> LearningCurve:
    points = sorted((r.step, r.eval_return) for r in rows if r.eval_return is not None)
    return LearningCurve(np.array([p[0] for p in points]), np.array([p[1] for p in points]))


def _summarize_seed(
    seed: str, rows: list[MetricsRow], budget: Optional[int], threshold: Optional[float]
) -> SeedSummary:
    curve = eval_curve(rows)
    if len(curve) == 0:
        raise InputError(f"Seed {seed}: no evaluation rows")
    horizon = budget if budget is not None else int(max(r.step for r in rows))
    cutoff = (1 - FINAL_WINDOW) * horizon
    final = curve.values[curve.steps >= cutoff]
    if len(final) == 0:
        raise InputError(f"Seed {seed}: no evaluation rows at or after step {cutoff:g}")

    auc = above = None
    uniform = resample(curve)
    if len(uniform) >= 3:
        auc = compute_auc(uniform)
        if threshold is not None:
            above = auc_above_threshold(uniform, threshold)
    else:
        logger.warning(f"Seed {seed}: {len(uniform)} point(s) on the {AUC_DELTA}-step grid, too few for an AUC")
    return SeedSummary(
        seed=seed,
        final_mean=float(final.mean()),
        n_reports=len(final),
        auc=auc,
        auc_above_threshold=above,
    )


def summarize_run(
    csv_paths: str | Path | Sequence[str | Path],
    budget: Optional[int] = None,
    threshold: Optional[float] = None,
) -> RunSummary:
    """
    Final-window mean ± standard error of eval_return across seeds, plus AUC.

    Rows are grouped by their `seed` column (the file stem when blank). The
    final window holds reports at or after 95% of `budget` (default: the
    largest logged step of each seed).
    """
    if isinstance(csv_paths, (str, Path)):
        csv_paths = [csv_paths]

    grouped: dict[str, list[MetricsRow]] = {}
    for path in csv_paths:
        for row in read_metrics_csv(path):
            key = Path(path).stem if row.seed is None else str(row.seed)
            grouped.setdefault(key, []).append(row)
    if not grouped:
        raise InputError("No metrics rows to summarize")

    seeds = [_summarize_seed(key, rows, budget, threshold) for key, rows in sorted(grouped.items())]
    finals = np.array([s.final_mean for s in seeds])
    stderr = float(finals.std(ddof=1) / np.sqrt(len(finals))) if len(finals) > 1 else 0.0
    aucs = [s.auc for s in seeds if s.auc is not None]
    above = [s.auc_above_threshold for s in seeds if s.auc_above_threshold is not None]

    return RunSummary(
        final_mean=float(finals.mean()),
        final_stderr=stderr,
        auc_mean=float(np.mean(aucs)) if aucs else None,
        threshold=threshold,
        auc_above_threshold_mean=float(np.mean(above)) if above else None,
        seeds=seeds,
    )


def paired_wins(baseline: dict[str, float], other: dict[str, float]) -> tuple[int, int]:
    """(seeds where baseline >= other, seeds compared), over the seeds both runs share."""
    shared = sorted(set(baseline) & set(other))
    wins = sum(1 for seed in shared if baseline[seed] >= other[seed])
    return wins, len(shared)
