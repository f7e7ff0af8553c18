"""
Scoring
=======
Agreement metrics for continuous affect predictions and accuracy for the
pre-training classifier.

All moments are population (1/N) moments.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike

from .errors import ParameterError, ShapeError

logger = logging.getLogger(__name__)

DIMENSIONS = ("valence", "arousal")
SCORE_COLUMNS = ["dimension", "partition", "stage", "ccc", "pearson", "rmse", "n"]


def _pair(x: ArrayLike, y: ArrayLike):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise ShapeError(f"series lengths differ: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise ShapeError("need at least 2 samples")
    return x, y


def pearson_cc(x: ArrayLike, y: ArrayLike) -> float:
    """Pearson correlation; undefined (error) when either series is constant."""
    x, y = _pair(x, y)
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        raise ParameterError("correlation undefined for a constant series")
    cov = np.mean((x - x.mean()) * (y - y.mean()))
    return float(np.clip(cov / (sx * sy), -1.0, 1.0))


def ccc(gold: ArrayLike, pred: ArrayLike) -> float:
    """
    Concordance correlation coefficient
    ``2 cov / (var_gold + var_pred + (mean_gold - mean_pred)^2)``.

    A constant prediction scores 0.

    Raises:
        ShapeError: length mismatch or fewer than 2 samples
        ParameterError: constant gold series
    """
    x, y = _pair(gold, pred)
    vx, vy = x.var(), y.var()
    if vx == 0.0:
        raise ParameterError("CCC undefined for a constant gold series")
    if vy == 0.0:
        return 0.0
    mx, my = x.mean(), y.mean()
    cov = np.mean((x - mx) * (y - my))
    return float(2.0 * cov / (vx + vy + (mx - my) ** 2))


def rmse(gold: ArrayLike, pred: ArrayLike) -> float:
    x, y = _pair(gold, pred)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def accuracy(predicted: ArrayLike, gold: ArrayLike) -> float:
    """Fraction of exact label matches."""
    p = np.asarray(predicted).ravel()
    g = np.asarray(gold).ravel()
    if len(p) != len(g):
        raise ShapeError(f"label lengths differ: {len(p)} vs {len(g)}")
    if len(p) == 0:
        raise ShapeError("no labels to score")
    return float(np.mean(p == g))


@dataclass(frozen=True)
class ScoreReport:
    dimension: str
    partition: str
    stage: str
    ccc: float
    pearson: float
    rmse: float
    n: int


def score(gold: ArrayLike, pred: ArrayLike, dimension: str, partition: str = "dev", stage: str = "raw") -> ScoreReport:
    """Score one prediction series; Pearson falls back to 0 for a constant prediction."""
    x, y = _pair(gold, pred)
    try:
        pearson = pearson_cc(x, y)
    except ParameterError:
        pearson = 0.0
    return ScoreReport(
        dimension=dimension,
        partition=partition,
        stage=stage,
        ccc=ccc(x, y),
        pearson=pearson,
        rmse=rmse(x, y),
        n=len(x),
    )


def write_scores(reports: Iterable[ScoreReport], path: Union[str, Path]):
    """One CSV row per (dimension, partition, stage)."""
    frame = pd.DataFrame([asdict(r) for r in reports], columns=SCORE_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")


def read_scores(path: Union[str, Path]) -> Sequence[ScoreReport]:
    frame = pd.read_csv(path)
    return [ScoreReport(**row) for row in frame.to_dict(orient="records")]
