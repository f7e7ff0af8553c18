"""
Prediction Post-processing
==========================
Clean-up chain applied to regressor output before scoring:

1. Median filtering (odd window, nearest-edge padding)
2. Centering (bias correction fitted on training predictions)
3. Scaling (gold/prediction spread ratio fitted on training predictions)
4. Time shifting (delay predictions forward, front padded)

``optimize_chain`` walks the steps in that order and keeps a step only when
it strictly raises dev CCC without lowering training CCC. Also provides
label delay compensation for frame/annotation alignment.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike
from scipy import ndimage

from .errors import ParameterError, ShapeError
from .metrics import ccc
from .tensor import Tensor

logger = logging.getLogger(__name__)

FRAME_PERIOD = 0.04
MAX_WINDOW = 501  # 20 s
MAX_SHIFT = 250  # 10 s
CENTER_MODES = ("bias", "literal")
SCALE_MODES = ("std", "literal-ratio")
STEP_ORDER = ("median", "center", "scale", "shift")
GATE_TOLERANCE = 1e-12


# ── Individual steps ───────────────────────────────────────────


def median_filter(pred: ArrayLike, window: int) -> Tensor:
    """Centered sliding median with nearest-value edge replication."""
    series = np.asarray(pred, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"median window must be an odd positive integer, got {window}")
    if window > len(series):
        raise ParameterError(f"median window {window} longer than series ({len(series)})")
    if window == 1:
        return series.copy()
    return ndimage.median_filter(series, size=window, mode="nearest")


@dataclass(frozen=True)
class CenterParams:
    gold_mean: float
    pred_mean: float


def fit_center(gold_train: ArrayLike, pred_train: ArrayLike) -> CenterParams:
    gold = np.asarray(gold_train, dtype=np.float64)
    pred = np.asarray(pred_train, dtype=np.float64)
    if len(gold) == 0 or len(pred) == 0:
        raise ShapeError("centering needs non-empty training series")
    return CenterParams(gold_mean=float(gold.mean()), pred_mean=float(pred.mean()))


def apply_center(pred: ArrayLike, params: CenterParams, mode: str = "bias") -> Tensor:
    """
    ``bias``: add the training bias (gold mean - prediction mean).
    ``literal``: subtract the training gold mean.
    """
    series = np.asarray(pred, dtype=np.float64)
    if mode == "bias":
        return series + (params.gold_mean - params.pred_mean)
    if mode == "literal":
        return series - params.gold_mean
    raise ParameterError(f"unknown centering mode '{mode}' (expected one of {CENTER_MODES})")


def fit_scale(gold_train: ArrayLike, pred_train: ArrayLike, mode: str = "std") -> Optional[float]:
    """
    Scaling factor fitted on training series.

    ``std``: gold std / prediction std. ``literal-ratio``: gold mean / prediction mean.
    Returns None (step skipped) when the denominator vanishes.
    """
    gold = np.asarray(gold_train, dtype=np.float64)
    pred = np.asarray(pred_train, dtype=np.float64)
    if mode == "std":
        denominator, numerator = pred.std(), gold.std()
    elif mode == "literal-ratio":
        denominator, numerator = pred.mean(), gold.mean()
    else:
        raise ParameterError(f"unknown scaling mode '{mode}' (expected one of {SCALE_MODES})")
    if abs(denominator) < 1e-12:
        logger.warning(f"Skipping scaling: training prediction {'std' if mode == 'std' else 'mean'} is zero")
        return None
    return float(numerator / denominator)


def apply_scale(pred: ArrayLike, beta: float, mode: str = "std") -> Tensor:
    """Multiply by the training-fitted factor; ``mode`` only affects fitting."""
    if mode not in SCALE_MODES:
        raise ParameterError(f"unknown scaling mode '{mode}' (expected one of {SCALE_MODES})")
    return beta * np.asarray(pred, dtype=np.float64)


def time_shift(pred: ArrayLike, frames: int) -> Tensor:
    """output[t] = pred[t - k]; the first k samples repeat pred[0]."""
    series = np.asarray(pred, dtype=np.float64)
    if not 0 <= frames <= MAX_SHIFT:
        raise ParameterError(f"shift must be in 0..{MAX_SHIFT} frames, got {frames}")
    if frames == 0:
        return series.copy()
    if frames >= len(series):
        return np.full_like(series, series[0])
    return np.concatenate([np.full(frames, series[0]), series[:-frames]])


def delay_compensate(frames: Any, labels: Any, n_frames: int) -> Tuple[Any, Any]:
    """
    Pair frame t with label t + n; both sides are truncated to the overlap.

    Works on arrays and on any object with a ``window(start, stop)`` method.
    """
    length = len(frames)
    if len(labels) != length:
        raise ShapeError(f"{length} frames but {len(labels)} labels")
    if n_frames < 0:
        raise ParameterError(f"delay must be >= 0, got {n_frames}")
    if n_frames >= length:
        raise ParameterError(f"delay {n_frames} leaves nothing of a {length}-frame series")
    return _window(frames, 0, length - n_frames), _window(labels, n_frames, length)


def _window(obj: Any, start: int, stop: int) -> Any:
    if hasattr(obj, "window"):
        return obj.window(start, stop)
    return obj[start:stop]


def _per_segment(series: Tensor, segments: Optional[Sequence[int]], fn: Callable[[Tensor], Tensor]) -> Tensor:
    if not segments:
        return fn(series)
    if sum(segments) != len(series):
        raise ShapeError(f"segment lengths {list(segments)} do not cover {len(series)} samples")
    bounds = np.cumsum([0, *segments])
    return np.concatenate([fn(series[a:b]) for a, b in zip(bounds[:-1], bounds[1:])])


# ── Chain ──────────────────────────────────────────────────────


def default_windows(max_window: int = MAX_WINDOW, count: int = 30) -> Tuple[int, ...]:
    """Odd windows 1..max_window, log-spaced."""
    raw = np.geomspace(1, max_window, count)
    odd = 2 * np.floor(raw / 2).astype(int) + 1
    return tuple(int(w) for w in np.unique(np.clip(odd, 1, max_window)))


def default_shifts(max_shift: int = MAX_SHIFT) -> Tuple[int, ...]:
    """Every frame 0..25, then steps of 10 up to max_shift."""
    fine = list(range(0, min(25, max_shift) + 1))
    coarse = list(range(30, max_shift + 1, 10))
    return tuple(fine + coarse)


@dataclass(frozen=True)
class ChainGrid:
    windows: Tuple[int, ...] = field(default_factory=default_windows)
    shifts: Tuple[int, ...] = field(default_factory=default_shifts)

    def __post_init__(self):
        for w in self.windows:
            if w < 1 or w % 2 == 0 or w > MAX_WINDOW:
                raise ParameterError(f"median window {w} must be odd in 1..{MAX_WINDOW}")
        for k in self.shifts:
            if not 0 <= k <= MAX_SHIFT:
                raise ParameterError(f"shift {k} outside 0..{MAX_SHIFT}")


@dataclass(frozen=True)
class ChainStep:
    """One accepted step with its fitted parameters and the dev CCC after applying it."""

    name: str
    params: Dict[str, Union[int, float, str]]
    dev_ccc: float

    def apply(self, pred: Tensor, segments: Optional[Sequence[int]] = None) -> Tensor:
        p = self.params
        if self.name == "median":
            window = int(p["window"])
            return _per_segment(pred, segments, lambda s: median_filter(s, min(window, _odd_floor(len(s)))))
        if self.name == "center":
            center = CenterParams(gold_mean=float(p["gold_mean"]), pred_mean=float(p["pred_mean"]))
            return apply_center(pred, center, str(p["mode"]))
        if self.name == "scale":
            return apply_scale(pred, float(p["beta"]), str(p["mode"]))
        if self.name == "shift":
            return _per_segment(pred, segments, lambda s: time_shift(s, int(p["frames"])))
        raise ParameterError(f"unknown post-processing step '{self.name}'")

    def to_text(self) -> str:
        fields = [self.name]
        for key, value in self.params.items():
            fields.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
        fields.append(f"dev_ccc={self.dev_ccc!r}")
        return " ".join(fields)

    @classmethod
    def from_text(cls, line: str) -> "ChainStep":
        name, *pairs = line.split()
        values: Dict[str, Union[int, float, str]] = {}
        dev = float("nan")
        for pair in pairs:
            key, _, raw = pair.partition("=")
            if key == "dev_ccc":
                dev = float(raw)
            elif key in ("window", "frames"):
                values[key] = int(raw)
            elif key == "mode":
                values[key] = raw
            else:
                values[key] = float(raw)
        return cls(name=name, params=values, dev_ccc=dev)


def _odd_floor(n: int) -> int:
    return n if n % 2 else n - 1


@dataclass(frozen=True)
class StepDecision:
    step: str
    params: str
    dev_before: float
    dev_after: float
    train_before: float
    train_after: float
    accepted: bool


@dataclass
class PostprocessChain:
    """Accepted steps in application order plus the decision log of every candidate step."""

    steps: List[ChainStep] = field(default_factory=list)
    decisions: List[StepDecision] = field(default_factory=list)
    raw_dev_ccc: float = float("nan")

    @property
    def dev_ccc(self) -> float:
        return self.steps[-1].dev_ccc if self.steps else self.raw_dev_ccc

    def apply(self, pred: ArrayLike, segments: Optional[Sequence[int]] = None) -> Tensor:
        series = np.asarray(pred, dtype=np.float64)
        for step in self.steps:
            series = step.apply(series, segments)
        return series

    def to_text(self) -> str:
        lines = [f"# raw_dev_ccc={self.raw_dev_ccc!r}"]
        for d in self.decisions:
            verdict = "accepted" if d.accepted else "rejected"
            lines.append(f"# {d.step} {d.params}: dev {d.dev_before:.6f} -> {d.dev_after:.6f} {verdict}")
        lines += [step.to_text() for step in self.steps]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PostprocessChain":
        chain = cls()
        for line in text.splitlines():
            line = line.strip()
            if line.startswith("# raw_dev_ccc="):
                chain.raw_dev_ccc = float(line.split("=", 1)[1])
            elif line and not line.startswith("#"):
                chain.steps.append(ChainStep.from_text(line))
        return chain

    def save(self, path: Union[str, Path]):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PostprocessChain":
        return cls.from_text(Path(path).read_text())


def optimize_chain(
    gold_train: ArrayLike,
    pred_train: ArrayLike,
    gold_dev: ArrayLike,
    pred_dev: ArrayLike,
    grid: Optional[ChainGrid] = None,
    center_mode: str = "bias",
    scale_mode: str = "std",
    train_segments: Optional[Sequence[int]] = None,
    dev_segments: Optional[Sequence[int]] = None,
) -> PostprocessChain:
    """
    Greedy chain search in the fixed order median, center, scale, shift.

    Median window and shift are chosen as the dev-CCC argmax over ``grid``
    (smallest value wins ties); centering and scaling are fitted on the
    training series. The selected candidate is accepted iff dev CCC strictly
    improves and training CCC does not drop; otherwise the step is skipped.
    Median filtering and shifting run per segment so they never cross a
    subject boundary.
    """
    grid = grid or ChainGrid()
    g_tr = np.asarray(gold_train, dtype=np.float64)
    p_tr = np.asarray(pred_train, dtype=np.float64)
    g_dev = np.asarray(gold_dev, dtype=np.float64)
    p_dev = np.asarray(pred_dev, dtype=np.float64)
    if len(g_tr) != len(p_tr) or len(g_dev) != len(p_dev):
        raise ShapeError("gold and prediction series must be aligned")
    if len(g_tr) == 0 or len(g_dev) == 0:
        raise ShapeError("optimize_chain needs non-empty series")

    chain = PostprocessChain(raw_dev_ccc=ccc(g_dev, p_dev))
    dev_score = chain.raw_dev_ccc
    train_score = ccc(g_tr, p_tr)
    shortest = min(
        min(train_segments) if train_segments else len(p_tr), min(dev_segments) if dev_segments else len(p_dev)
    )

    def consider(candidates: List[ChainStep]):
        nonlocal p_tr, p_dev, dev_score, train_score
        best: Optional[Tuple[ChainStep, Tensor, Tensor, float, float]] = None
        for step in candidates:
            cand_dev = step.apply(p_dev, dev_segments)
            cand_tr = step.apply(p_tr, train_segments)
            d, t = ccc(g_dev, cand_dev), ccc(g_tr, cand_tr)
            if best is None or d > best[3]:
                best = (step, cand_dev, cand_tr, d, t)
        if best is None:
            return
        step, cand_dev, cand_tr, d, t = best
        keeps_train = t >= train_score - GATE_TOLERANCE
        accepted = d > dev_score and keeps_train
        params = " ".join(f"{k}={v}" for k, v in step.params.items())
        chain.decisions.append(StepDecision(step.name, params, dev_score, d, train_score, t, accepted))
        if accepted:
            logger.info(f"Post-processing: accepted {step.name} ({params}), dev CCC {dev_score:.4f} -> {d:.4f}")
            chain.steps.append(ChainStep(step.name, step.params, d))
            p_dev, p_tr, dev_score, train_score = cand_dev, cand_tr, d, t
        elif not keeps_train:
            logger.debug(f"Post-processing: rejected {step.name} ({params}), train CCC {t:.4f} < {train_score:.4f}")
        else:
            logger.debug(f"Post-processing: rejected {step.name} ({params}), dev CCC {d:.4f} <= {dev_score:.4f}")

    windows = sorted(w for w in grid.windows if w <= shortest)
    consider([ChainStep("median", {"window": w}, float("nan")) for w in windows])

    center = fit_center(g_tr, p_tr)
    consider(
        [
            ChainStep(
                "center",
                {"mode": center_mode, "gold_mean": center.gold_mean, "pred_mean": center.pred_mean},
                float("nan"),
            )
        ]
    )

    beta = fit_scale(g_tr, p_tr, scale_mode)
    if beta is not None:
        consider([ChainStep("scale", {"mode": scale_mode, "beta": beta}, float("nan"))])

    consider([ChainStep("shift", {"frames": k}, float("nan")) for k in sorted(grid.shifts)])
    return chain
