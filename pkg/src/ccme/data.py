"""Dataset container, CSV round-trip, and the stage-0/stage-1 split.

A dataset is rows of (covariates X, binary treatment A, outcome Y).  The CSV
schema is x1..xd,a,y with multi-dimensional outcomes written as y1..yk; the
header row is mandatory.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import DegenerateDataError, InvalidArgumentError
from .propensity import PropensityModel, predict_propensity

__all__ = ["Dataset", "SplitDataset", "split_data", "compute_omega",
           "load_dataset", "dataset_to_csv", "default_v_cols"]


@dataclass
class Dataset:
    X: NDArray[np.float64]   # (n, d_x)
    A: NDArray[np.float64]   # (n,) values in {0, 1}
    Y: NDArray[np.float64]   # (n, d_y)

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64).ravel()
        Y = np.asarray(self.Y, dtype=np.float64)
        self.Y = Y.reshape(-1, 1) if Y.ndim == 1 else Y
        n = self.X.shape[0]
        if self.A.shape[0] != n or self.Y.shape[0] != n:
            raise InvalidArgumentError("X, A, Y row counts disagree")
        if not np.isin(self.A, (0.0, 1.0)).all():
            raise InvalidArgumentError("treatment column must be 0/1")

    def __len__(self) -> int:
        return self.X.shape[0]

    def take(self, idx: NDArray[np.int64]) -> "Dataset":
        return Dataset(self.X[idx], self.A[idx], self.Y[idx])


def default_v_cols(d_x: int) -> list[int]:
    """Conditioning columns when none are configured: the first five (or fewer)."""
    return list(range(min(5, d_x)))


@dataclass
class SplitDataset:
    """The random halves D0 (nuisance fitting) and D1 (second-stage rows).

    ``treated0`` indexes the rows of d0 with A = 1; ``v_cols`` selects the
    conditioning variables V out of X.
    """

    d0: Dataset
    d1: Dataset
    treated0: NDArray[np.int64]
    v_cols: list[int]

    @property
    def m(self) -> int:
        return int(self.treated0.shape[0])

    @property
    def n(self) -> int:
        return len(self.d1)

    @property
    def v1(self) -> NDArray[np.float64]:
        return self.d1.X[:, self.v_cols]

    def x0_treated(self, x_cols: list[int] | None = None) -> NDArray[np.float64]:
        X = self.d0.X[self.treated0]
        return X if x_cols is None else X[:, x_cols]

    def y0_treated(self) -> NDArray[np.float64]:
        return self.d0.Y[self.treated0]

    def x1(self, x_cols: list[int] | None = None) -> NDArray[np.float64]:
        return self.d1.X if x_cols is None else self.d1.X[:, x_cols]


def split_data(dataset: Dataset, seed: int,
               v_cols: list[int] | None = None) -> SplitDataset:
    """Uniform random partition into two halves, deterministic given seed.

    Odd sizes give the extra row to D0.  A D0 half with no treated row cannot
    support a first stage and is rejected.
    """
    N = len(dataset)
    if N < 4:
        raise InvalidArgumentError(f"need at least 4 rows to split, got {N}")
    if v_cols is None:
        v_cols = default_v_cols(dataset.X.shape[1])
    if any(c < 0 or c >= dataset.X.shape[1] for c in v_cols):
        raise InvalidArgumentError(f"v_cols out of range: {v_cols}")
    perm = np.random.default_rng(seed).permutation(N)
    half = (N + 1) // 2
    d0 = dataset.take(perm[:half])
    d1 = dataset.take(perm[half:])
    treated0 = np.nonzero(d0.A > 0)[0]
    if treated0.shape[0] == 0:
        raise DegenerateDataError("no treated rows landed in D0; cannot fit a first stage")
    return SplitDataset(d0, d1, treated0, list(v_cols))


def compute_omega(d1: Dataset, propensity: PropensityModel) -> NDArray[np.float64]:
    """Inverse-propensity weights on D1: A_i / pi_hat(X_i), exactly 0 where A_i = 0."""
    p = predict_propensity(propensity, d1.X)
    return np.where(d1.A > 0, d1.A / p, 0.0)


def dataset_to_csv(dataset: Dataset) -> str:
    """Render a dataset in the x1..xd,a,y schema with full float precision."""
    d_x, d_y = dataset.X.shape[1], dataset.Y.shape[1]
    cols = [f"x{i + 1}" for i in range(d_x)]
    cols.append("a")
    cols.extend(["y"] if d_y == 1 else [f"y{i + 1}" for i in range(d_y)])
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    body = np.column_stack([dataset.X, dataset.A, dataset.Y])
    for row in body:
        buf.write(",".join(f"{v:.17g}" for v in row) + "\n")
    return buf.getvalue()


def load_dataset(text: str) -> Dataset:
    """Parse the CSV schema produced by dataset_to_csv."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidArgumentError("empty dataset file")
    header = [h.strip() for h in lines[0].split(",")]
    x_cols = [h for h in header if h.startswith("x")]
    y_cols = [h for h in header if h.startswith("y")]
    if "a" not in header or not x_cols or not y_cols:
        raise InvalidArgumentError(
            f"dataset header must be x1..xd,a,y[,y2..], got {lines[0]!r}")
    if header != x_cols + ["a"] + y_cols:
        raise InvalidArgumentError("dataset columns out of order; expected x*, a, y*")
    try:
        body = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
    except ValueError as exc:
        raise InvalidArgumentError(f"malformed dataset row: {exc}") from exc
    if body.shape[1] != len(header):
        raise InvalidArgumentError(
            f"rows have {body.shape[1]} fields, header has {len(header)}")
    d_x = len(x_cols)
    return Dataset(body[:, :d_x], body[:, d_x], body[:, d_x + 1:])
