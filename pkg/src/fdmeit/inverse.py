"""Zeroth-order Tikhonov difference imaging with cross-validated lambda."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .sensitivity import Jacobian

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ReconstructionOperator:
    """Precomputed (J^T J + lambda I)^-1 J^T, built from the SVD of J."""

    matrix: np.ndarray
    lam: float
    singular_values: np.ndarray
    condition_number: float
    jacobian: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def apply(self, dv: np.ndarray) -> np.ndarray:
        return self.matrix @ dv


@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    delta_sigma: np.ndarray
    residual: float
    solution_norm: float
    lam: float

    def objective(self) -> float:
        return self.residual**2 + self.lam * self.solution_norm**2


def _as_matrix(J) -> np.ndarray:
    return J.matrix if isinstance(J, Jacobian) else np.asarray(J, dtype=np.float64)


def build_operator(J, lam: float) -> ReconstructionOperator:
    """Regularised inverse of J.

    With J = U S V^T the operator is V diag(s / (s^2 + lam)) U^T, which
    equals (J^T J + lam I)^-1 J^T without forming the normal equations.
    """
    A = _as_matrix(J)
    if not lam > 0 or not np.isfinite(lam):
        raise ValueError(f"lambda must be positive and finite, got {lam}")
    if not np.all(np.isfinite(A)):
        raise ValueError("Jacobian has non-finite entries")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    filt = s / (s * s + lam)
    op = (Vt.T * filt) @ U.T
    cond = float(s[0] / s[-1]) if s.size and s[-1] > 0 else float("inf")
    return ReconstructionOperator(op, float(lam), s, cond, A)


def reconstruct(op: ReconstructionOperator, dv: np.ndarray) -> ReconstructionResult:
    dv = np.asarray(dv, dtype=np.float64)
    if dv.shape != (op.shape[1],):
        raise ValueError(f"voltage change has length {dv.size}, operator expects {op.shape[1]}")
    ds = op.apply(dv)
    residual = float(np.linalg.norm(dv - op.jacobian @ ds))
    return ReconstructionResult(ds, residual, float(np.linalg.norm(ds)), op.lam)


def tikhonov_objective(J, dv, ds, lam) -> float:
    A = _as_matrix(J)
    r = dv - A @ ds
    return float(r @ r + lam * ds @ ds)


def lambda_grid(J, n: int = 40, decades: tuple[float, float] = (-8.0, 2.0)) -> np.ndarray:
    """Log-spaced lambda values relative to the largest squared singular value of J."""
    s_max = np.linalg.norm(_as_matrix(J), 2)
    return s_max**2 * np.logspace(decades[0], decades[1], n)


# -- cross-validation ------------------------------------------------------------


@dataclass(frozen=True)
class GaussianNoise:
    """Additive white noise on the voltage vector (V), one std per channel."""

    std: float | np.ndarray = 0.0
    seed: int = 0

    @property
    def degenerate(self) -> bool:
        return not np.any(np.asarray(self.std) > 0)

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        """Noise of ``shape`` (channels first); a per-channel std broadcasts over columns."""
        std = np.asarray(self.std, dtype=np.float64)
        if not np.any(std > 0):
            return np.zeros(shape)
        if std.ndim == 1 and len(shape) == 2:
            std = std[:, None]
        return rng.standard_normal(shape) * std


@dataclass(frozen=True, eq=False)
class CrossValidationReport:
    lam: float
    grid: np.ndarray
    errors: np.ndarray
    fold_choices: np.ndarray
    noise_free: bool


def random_perturbations(
    n_columns: int,
    count: int,
    rng: np.random.Generator,
    groups: np.ndarray | None = None,
    amplitude: float = 1.0,
) -> np.ndarray:
    """Synthetic training perturbations, one per column of the result.

    With ``groups`` (a label per column) each perturbation is a random-
    amplitude change confined to one randomly chosen group, otherwise a
    sparse random set of columns.
    """
    out = np.zeros((n_columns, count))
    labels = np.unique(groups) if groups is not None else None
    for k in range(count):
        if labels is not None:
            g = labels[rng.integers(len(labels))]
            sel = np.flatnonzero(groups == g)
        else:
            sel = rng.choice(n_columns, size=max(1, n_columns // 20), replace=False)
        out[sel, k] = amplitude * rng.uniform(-1.0, 1.0) * rng.uniform(0.5, 1.0, size=sel.size)
    return out


def select_lambda_cv(
    J,
    noise_model: GaussianNoise,
    lambda_grid_values: Sequence[float] | None = None,
    training_perturbations: np.ndarray | None = None,
    n_folds: int = 5,
    rtol_tie: float = 1e-12,
) -> CrossValidationReport:
    """Pick lambda minimising held-out reconstruction error on synthetic data.

    For every perturbation dsigma_true (columns of ``training_perturbations``)
    the data dv = J dsigma_true + noise are reconstructed at each grid value
    and scored by ||dsigma_hat - dsigma_true||.  Perturbations are split into
    folds; each fold's choice is made on the other folds and reported, and the
    returned lambda minimises the mean error over all held-out folds.  Ties
    go to the larger lambda.
    """
    A = _as_matrix(J)
    grid = np.sort(np.asarray(lambda_grid_values if lambda_grid_values is not None else lambda_grid(A), dtype=float))
    if grid.size == 0:
        raise ValueError("lambda grid is empty")
    if (grid <= 0).any():
        raise ValueError("lambda grid values must be positive")
    if grid.size > 1 and np.log10(grid[-1] / grid[0]) < 4 - 1e-9:
        logger.warning("lambda grid spans fewer than four decades")
    rng = np.random.default_rng(noise_model.seed)
    if training_perturbations is None:
        training_perturbations = random_perturbations(A.shape[1], 40, rng)
    X = np.asarray(training_perturbations, dtype=float)
    if X.ndim != 2 or X.shape[0] != A.shape[1]:
        raise ValueError("training perturbations must be (n_columns, n_samples)")
    if X.shape[1] < 20:
        raise ValueError(f"need at least 20 training perturbations, got {X.shape[1]}")
    if noise_model.degenerate:
        logger.info("cross-validation with a zero-variance noise model")
    dv = A @ X + noise_model.sample(rng, (A.shape[0], X.shape[1]))

    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    coeff = U.T @ dv
    errors = np.empty((grid.size, X.shape[1]))
    for i, lam in enumerate(grid):
        est = Vt.T @ ((s / (s * s + lam))[:, None] * coeff)
        errors[i] = np.linalg.norm(est - X, axis=0)

    def pick(cols) -> int:
        score = errors[:, cols].mean(axis=1)
        best = score.min()
        tied = np.flatnonzero(score <= best * (1 + rtol_tie))
        return int(tied.max())

    folds = np.array_split(np.arange(X.shape[1]), max(2, min(n_folds, X.shape[1])))
    choices = []
    for f in folds:
        train = np.setdiff1d(np.arange(X.shape[1]), f)
        choices.append(grid[pick(train)])
    best = pick(np.arange(X.shape[1]))
    return CrossValidationReport(float(grid[best]), grid, errors.mean(axis=1), np.array(choices), noise_model.degenerate)


# -- export ----------------------------------------------------------------------


def save_reconstruction_csv(result: ReconstructionResult, path) -> None:
    rows = ["element_id,delta_sigma"]
    rows += [f"{i},{v!r}" for i, v in enumerate(result.delta_sigma.tolist())]
    Path(path).write_text("\n".join(rows) + "\n")


def load_reconstruction_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1]


def save_vtk(mesh, values: dict[str, np.ndarray], path) -> None:
    """Legacy ASCII VTK unstructured grid with per-element scalars."""
    nodes = mesh.nodes if mesh.dimension == 3 else np.column_stack([mesh.nodes, np.zeros(mesh.n_nodes)])
    cell_type = 10 if mesh.dimension == 3 else 5
    k = mesh.elements.shape[1]
    lines = ["# vtk DataFile Version 3.0", "fdmeit reconstruction", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_nodes} double"]
    lines += [" ".join(repr(float(c)) for c in p) for p in nodes.tolist()]
    lines.append(f"CELLS {mesh.n_elements} {mesh.n_elements * (k + 1)}")
    lines += [f"{k} " + " ".join(map(str, e)) for e in mesh.elements.tolist()]
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    lines += [str(cell_type)] * mesh.n_elements
    lines.append(f"CELL_DATA {mesh.n_elements}")
    for name, v in values.items():
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [repr(float(x)) for x in np.asarray(v).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")
