"""
Epsilon Support Vector Regression
=================================
SMO solver for the epsilon-SVR dual, prediction, (C, epsilon) grid search
scored by development-set CCC, and model persistence.

The dual is solved in the 2n-variable form
    min 1/2 a'Qa + p'a   s.t.  z'a = 0,  0 <= a <= C
with z = [+1 ... +1, -1 ... -1], p = [eps - y, eps + y] and
Q_ij = z_i z_j K(x_i mod n, x_j mod n), using second-order working set
selection. The regression coefficient of sample i is a_i - a_{i+n}.

Features are z-scored with training statistics stored in the model;
zero-variance columns are dropped.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike

from .errors import CheckpointError, ParameterError, ShapeError
from .metrics import ccc
from .nn import read_container, write_container
from .tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

KERNELS = ("linear", "rbf")
TAU = 1e-12
SVR_TAG = b"SVRM"

DEFAULT_C_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
DEFAULT_EPSILON_GRID = (0.001, 0.005, 0.01, 0.05, 0.1)


# ── Kernels ────────────────────────────────────────────────────


def kernel_matrix(a: Tensor, b: Tensor, kernel: str = "linear", gamma: float = 1.0) -> Tensor:
    """K(a_i, b_j) for every pair of rows."""
    if kernel == "linear":
        return a @ b.T
    if kernel == "rbf":
        sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
        return np.exp(-gamma * np.maximum(sq, 0.0))
    raise ParameterError(f"unknown kernel '{kernel}' (expected one of {KERNELS})")


class KernelColumns:
    """Training kernel columns computed on demand and cached."""

    def __init__(self, x: Tensor, kernel: str, gamma: float, cache_size: int = 1024):
        self.x = x
        self.kernel = kernel
        self.gamma = gamma
        self.cache_size = cache_size
        self._cache: Dict[int, Tensor] = {}
        if kernel == "linear":
            self.diagonal = (x * x).sum(axis=1)
        else:
            self.diagonal = np.ones(len(x))

    def column(self, i: int) -> Tensor:
        col = self._cache.get(i)
        if col is None:
            col = kernel_matrix(self.x, self.x[i : i + 1], self.kernel, self.gamma)[:, 0]
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[i] = col
        return col


# ── Dual solver ────────────────────────────────────────────────


@dataclass
class DualSolution:
    alpha: Tensor  # length 2n
    coefficients: Tensor  # alpha[:n] - alpha[n:]
    bias: float
    iterations: int
    converged: bool
    objective: float


def solve_dual(
    columns: KernelColumns, targets: Tensor, C: float, epsilon: float, tol: float = 1e-3, max_iter: int = 100_000
) -> DualSolution:
    """
    SMO with second-order working set selection.

    Stops when the maximal violating pair gap drops below ``tol``; reaching
    ``max_iter`` first returns the current iterate with ``converged=False``.
    """
    n = len(targets)
    z = np.concatenate([np.ones(n), -np.ones(n)])
    p = np.concatenate([epsilon - targets, epsilon + targets])
    alpha = np.zeros(2 * n)
    grad = p.copy()
    diag2 = np.concatenate([columns.diagonal, columns.diagonal])

    converged = False
    iteration = 0
    while iteration < max_iter:
        at_upper = alpha >= C
        at_lower = alpha <= 0.0

        # i: maximal violator in the "up" direction
        can_up = np.where(z > 0, ~at_upper, ~at_lower)
        up_score = np.where(can_up, -z * grad, -np.inf)
        i = int(np.argmax(up_score))
        g_max = up_score[i]

        can_down = np.where(z > 0, ~at_lower, ~at_upper)
        down_score = np.where(can_down, z * grad, -np.inf)
        g_max2 = down_score.max()
        if not np.isfinite(g_max) or g_max + g_max2 < tol:
            converged = True
            break

        k_i = np.tile(columns.column(i % n), 2)
        grad_diff = g_max + down_score
        quad = columns.diagonal[i % n] + diag2 - 2.0 * k_i
        quad = np.where(quad > 0.0, quad, TAU)
        gain = np.where(can_down & (grad_diff > 0.0), -(grad_diff**2) / quad, np.inf)
        j = int(np.argmin(gain))
        if not np.isfinite(gain[j]):
            converged = True
            break

        k_j = np.tile(columns.column(j % n), 2)
        old_i, old_j = alpha[i], alpha[j]
        q_ij = z[i] * z[j] * k_i[j]
        if z[i] != z[j]:
            coef = columns.diagonal[i % n] + columns.diagonal[j % n] + 2.0 * q_ij
            delta = (-grad[i] - grad[j]) / (coef if coef > 0.0 else TAU)
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0.0:
                if alpha[j] < 0.0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0.0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > 0.0:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, C - diff
            elif alpha[j] > C:
                alpha[j], alpha[i] = C, C + diff
        else:
            coef = columns.diagonal[i % n] + columns.diagonal[j % n] - 2.0 * q_ij
            delta = (grad[i] - grad[j]) / (coef if coef > 0.0 else TAU)
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, total - C
            elif alpha[j] < 0.0:
                alpha[j], alpha[i] = 0.0, total
            if total > C:
                if alpha[j] > C:
                    alpha[j], alpha[i] = C, total - C
            elif alpha[i] < 0.0:
                alpha[i], alpha[j] = 0.0, total

        d_i, d_j = alpha[i] - old_i, alpha[j] - old_j
        grad += z * (z[i] * k_i * d_i + z[j] * k_j * d_j)
        iteration += 1

    if not converged:
        logger.warning(f"SMO did not converge within {max_iter} iterations (C={C}, epsilon={epsilon})")
    logger.debug(f"SMO finished after {iteration} iterations")

    rho = _compute_rho(alpha, grad, z, C)
    coefficients = alpha[:n] - alpha[n:]
    objective = 0.5 * float(np.dot(alpha, grad - p)) + float(np.dot(alpha, p))
    return DualSolution(
        alpha=alpha,
        coefficients=coefficients,
        bias=-rho,
        iterations=iteration,
        converged=converged,
        objective=objective,
    )


def _compute_rho(alpha: Tensor, grad: Tensor, z: Tensor, C: float) -> float:
    """Average over free variables, or the midpoint of the feasible interval when none are free."""
    zg = z * grad
    at_upper = alpha >= C
    at_lower = alpha <= 0.0
    free = ~at_upper & ~at_lower
    if free.any():
        return float(zg[free].mean())
    ub_mask = (at_upper & (z < 0)) | (at_lower & (z > 0))
    lb_mask = (at_upper & (z > 0)) | (at_lower & (z < 0))
    ub = zg[ub_mask].min() if ub_mask.any() else np.inf
    lb = zg[lb_mask].max() if lb_mask.any() else -np.inf
    return float((ub + lb) / 2.0)


# ── Model ──────────────────────────────────────────────────────


@dataclass
class SvrModel:
    """Trained epsilon-SVR: support vectors in standardized space, coefficients, bias, scaling stats."""

    support_vectors: Tensor
    dual_coef: Tensor
    bias: float
    kernel: str
    gamma: float
    mean: Tensor
    std: Tensor
    kept: np.ndarray  # bool mask over original feature columns
    C: float
    epsilon: float
    converged: bool = True
    iterations: int = 0

    @property
    def n_features(self) -> int:
        return int(len(self.kept))

    def standardize(self, features: Tensor) -> Tensor:
        return (features[:, self.kept] - self.mean) / self.std


def fit_svr(
    features: ArrayLike,
    targets: ArrayLike,
    C: float = 1.0,
    epsilon: float = 0.1,
    kernel: str = "linear",
    gamma: Optional[float] = None,
    tol: float = 1e-3,
    max_iter: int = 100_000,
) -> SvrModel:
    """
    Train an epsilon-SVR.

    Args:
        gamma: RBF width; defaults to 1 / number of kept features

    Raises:
        ShapeError: fewer than 2 rows or row/target count mismatch
        ParameterError: C <= 0, epsilon < 0 or unknown kernel
    """
    x = as_tensor(features)
    y = as_tensor(targets).ravel()
    if x.ndim != 2:
        raise ShapeError(f"features must be a matrix, got shape {x.shape}")
    if len(x) != len(y) or len(y) < 2:
        raise ShapeError(f"need >= 2 rows with one target each, got {len(x)} rows / {len(y)} targets")
    if C <= 0.0:
        raise ParameterError(f"C must be > 0, got {C}")
    if epsilon < 0.0:
        raise ParameterError(f"epsilon must be >= 0, got {epsilon}")
    if kernel not in KERNELS:
        raise ParameterError(f"unknown kernel '{kernel}' (expected one of {KERNELS})")

    std = x.std(axis=0)
    kept = std > 0.0
    if not kept.all():
        logger.warning(f"Dropping {int((~kept).sum())} zero-variance feature column(s)")
    mean = x[:, kept].mean(axis=0)
    std = std[kept]
    xs = (x[:, kept] - mean) / std
    if gamma is None:
        gamma = 1.0 / max(1, xs.shape[1])

    solution = solve_dual(KernelColumns(xs, kernel, gamma), y, C, epsilon, tol, max_iter)
    support = np.abs(solution.coefficients) > 0.0
    return SvrModel(
        support_vectors=xs[support],
        dual_coef=solution.coefficients[support],
        bias=solution.bias,
        kernel=kernel,
        gamma=float(gamma),
        mean=mean,
        std=std,
        kept=kept,
        C=float(C),
        epsilon=float(epsilon),
        converged=solution.converged,
        iterations=solution.iterations,
    )


def predict_svr(model: SvrModel, features: ArrayLike) -> Tensor:
    """f(x) = sum_i coef_i K(sv_i, x) + b on standardized features."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != model.n_features:
        raise ShapeError(f"model expects {model.n_features} features, got {x.shape[1]}")
    if len(model.dual_coef) == 0:
        return np.full(len(x), model.bias)
    k = kernel_matrix(model.standardize(x), model.support_vectors, model.kernel, model.gamma)
    return k @ model.dual_coef + model.bias


# ── Grid search ────────────────────────────────────────────────


@dataclass(frozen=True)
class GridCell:
    C: float
    epsilon: float
    dev_ccc: float
    seconds: float


@dataclass
class GridSearchReport:
    """Every (C, epsilon) cell with its dev CCC; ``chosen`` maximizes CCC (ties: smaller C, then smaller epsilon)."""

    cells: List[GridCell]
    chosen: GridCell
    model: SvrModel = field(repr=False)

    def to_csv(self, path: Union[str, Path]):
        frame = pd.DataFrame([asdict(c) for c in self.cells], columns=["C", "epsilon", "dev_ccc", "seconds"])
        frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")


def grid_search(
    features_train: ArrayLike,
    targets_train: ArrayLike,
    features_dev: ArrayLike,
    targets_dev: ArrayLike,
    c_grid: Sequence[float] = DEFAULT_C_GRID,
    epsilon_grid: Sequence[float] = DEFAULT_EPSILON_GRID,
    kernel: str = "linear",
    gamma: Optional[float] = None,
    tol: float = 1e-3,
    max_iter: int = 100_000,
    jobs: int = 1,
) -> GridSearchReport:
    """
    Fit one model per (C, epsilon) cell and keep the one with the best dev CCC.

    Cells run on up to ``jobs`` threads; the report lists them in grid order.
    """
    if not c_grid or not epsilon_grid:
        raise ParameterError("C and epsilon grids must be non-empty")
    grid = [(float(c), float(e)) for c in c_grid for e in epsilon_grid]

    def run_cell(cell: Tuple[float, float]) -> Tuple[GridCell, SvrModel]:
        c, e = cell
        started = time.perf_counter()
        model = fit_svr(features_train, targets_train, c, e, kernel, gamma, tol, max_iter)
        score = ccc(targets_dev, predict_svr(model, features_dev))
        seconds = time.perf_counter() - started
        logger.debug(f"SVR cell C={c:g} epsilon={e:g}: dev CCC {score:.4f} ({seconds:.2f}s)")
        return GridCell(C=c, epsilon=e, dev_ccc=score, seconds=seconds), model

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_cell, grid))
    else:
        results = [run_cell(cell) for cell in grid]

    best_index = min(range(len(results)), key=lambda k: (-results[k][0].dev_ccc, results[k][0].C, results[k][0].epsilon))
    chosen, model = results[best_index]
    logger.info(f"SVR grid: chose C={chosen.C:g} epsilon={chosen.epsilon:g} (dev CCC {chosen.dev_ccc:.4f})")
    return GridSearchReport(cells=[cell for cell, _ in results], chosen=chosen, model=model)


# ── Persistence ────────────────────────────────────────────────


def save_svr(path: Union[str, Path], model: SvrModel):
    header = "\n".join(
        [
            f"kernel {model.kernel}",
            f"gamma {model.gamma!r}",
            f"C {model.C!r}",
            f"epsilon {model.epsilon!r}",
            f"bias {model.bias!r}",
            f"converged {int(model.converged)}",
            f"iterations {model.iterations}",
        ]
    )
    blobs = [
        ("support_vectors", model.support_vectors),
        ("dual_coef", model.dual_coef),
        ("mean", model.mean),
        ("std", model.std),
        ("kept", model.kept.astype(np.float64)),
    ]
    write_container(path, SVR_TAG, header + "\n", blobs)


def load_svr(path: Union[str, Path]) -> SvrModel:
    header, blobs = read_container(path, SVR_TAG)
    fields = dict(line.split(" ", 1) for line in header.splitlines() if line)
    try:
        kept = blobs["kept"] > 0.5
        model = SvrModel(
            support_vectors=blobs["support_vectors"],
            dual_coef=blobs["dual_coef"],
            bias=float(fields["bias"]),
            kernel=fields["kernel"],
            gamma=float(fields["gamma"]),
            mean=blobs["mean"],
            std=blobs["std"],
            kept=kept,
            C=float(fields["C"]),
            epsilon=float(fields["epsilon"]),
            converged=fields["converged"] == "1",
            iterations=int(fields["iterations"]),
        )
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: incomplete SVR model: {e}")
    if model.support_vectors.shape[1:] != (int(kept.sum()),) and len(model.dual_coef):
        raise CheckpointError(f"{path}: support vector width does not match kept features")
    return model
