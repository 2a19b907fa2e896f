"""Conditional density curves read off a fitted embedding model.

With a normalized outcome kernel, the fitted embedding at a point v is a
weighted sum of kernel bumps, so evaluating it on an outcome grid yields a
(possibly signed) density estimate.  All entry points are batched over query
points: the second-stage system is solved once per batch and reused for every
grid value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import InvalidArgumentError
from .estimators import CcmeModel, DfSecond, NkSecond, RrSecond
from .kernels import gram
from .nets import mlp_forward

__all__ = ["DensityCurve", "density_matrix", "density_mass", "density_curves",
           "default_grid", "curves_to_csv", "quadrature_mass"]


@dataclass
class DensityCurve:
    """One conditional density estimate on a fixed outcome grid.

    ``mass`` is the analytic integral (the sum of fitted kernel weights);
    ``min_value`` flags how negative the curve gets.  Values are reported
    as-is, never clipped.
    """

    grid: NDArray[np.float64]       # (G,) or (G, d_y)
    values: NDArray[np.float64]     # (G,)
    mass: float
    min_value: float


def _as_queries(model: CcmeModel, v: NDArray[np.float64]) -> NDArray[np.float64]:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = v.reshape(1, -1)
    if isinstance(model.second, RrSecond):
        d_v = model.second.v1.shape[1]
    else:
        d_v = model.second.v_dim
    if v.shape[1] != d_v:
        raise InvalidArgumentError(
            f"query points have {v.shape[1]} coordinates, model expects {d_v}")
    return v


def _as_grid(y_grid: NDArray[np.float64], d_y: int) -> NDArray[np.float64]:
    y = np.asarray(y_grid, dtype=np.float64)
    y = y.reshape(-1, 1) if y.ndim == 1 else y
    if y.shape[1] != d_y:
        raise InvalidArgumentError(
            f"outcome grid has {y.shape[1]} coordinates, model outcomes have {d_y}")
    return y


def _second_beta(model: CcmeModel, vq: NDArray[np.float64]) -> NDArray[np.float64]:
    """Second-stage combination coefficients over training rows, shape (n, T)."""
    second = model.second
    if isinstance(second, RrSecond):
        return second.factor.solve(gram(second.kernel_v, second.v1, vq))
    feats, _ = mlp_forward(second.net, vq)
    return second.psi1 @ second.factor.solve(feats.T)


def _bump_weights(model: CcmeModel, vq: NDArray[np.float64]
                  ) -> tuple[NDArray[np.float64], NDArray[np.float64],
                             NDArray[np.float64] | None,
                             NDArray[np.float64] | None]:
    """Kernel-bump weights of the fitted embedding at each query point.

    Returns (centers1, w1, centers0, w0): weights over the second-stage
    outcome rows and, when a first stage contributes, over its outcome basis.
    Each weight array has one column per query.
    """
    second = model.second
    if isinstance(second, NkSecond):
        feats, _ = mlp_forward(second.net, vq)
        return second.grid, feats.T, None, None
    beta = _second_beta(model, vq)                       # (n, T)
    w1 = model.a[:, None] * beta
    if not model.c.any() or model.first is None:
        return model.y1, w1, None, None
    cb = model.c[:, None] * beta
    first = model.first
    if model.method == "rr":
        w0 = first.cme.factor.solve(model.cross_cache @ cb)
    else:                                                # df
        dcme = first.cme
        w0 = dcme.psi0 @ dcme.factor.solve(model.cross_cache.T @ cb)
    return model.y1, w1, first.basis_y(), w0


def density_matrix(model: CcmeModel, v: NDArray[np.float64],
                   y_grid: NDArray[np.float64]) -> NDArray[np.float64]:
    """Density estimates for every (query, grid value) pair, shape (T, G)."""
    vq = _as_queries(model, v)
    centers1, w1, centers0, w0 = _bump_weights(model, vq)
    grid = _as_grid(y_grid, centers1.shape[1])
    out = w1.T @ gram(model.kernel_y, centers1, grid)
    if w0 is not None:
        out = out + w0.T @ gram(model.kernel_y, centers0, grid)
    return out


def density_mass(model: CcmeModel, v: NDArray[np.float64]) -> NDArray[np.float64]:
    """Analytic integral of each query's density estimate: the weight total.

    Only meaningful when the outcome kernel is normalized so each bump
    integrates to one.
    """
    if not model.kernel_y.normalized:
        raise InvalidArgumentError(
            "density mass needs a normalized outcome kernel")
    vq = _as_queries(model, v)
    _, w1, _, w0 = _bump_weights(model, vq)
    mass = w1.sum(axis=0)
    if w0 is not None:
        mass = mass + w0.sum(axis=0)
    return mass


def default_grid(model: CcmeModel, n_points: int = 200,
                 pad: float = 2.0) -> NDArray[np.float64]:
    """Uniform outcome grid over the training outcome range with padding."""
    if n_points < 2:
        raise InvalidArgumentError("need at least two grid points")
    return np.linspace(model.y_lo - pad, model.y_hi + pad, n_points)


def density_curves(model: CcmeModel, v: NDArray[np.float64],
                   y_grid: NDArray[np.float64] | None = None,
                   n_points: int = 200) -> list[DensityCurve]:
    """One DensityCurve per query row, on a shared outcome grid."""
    if y_grid is None:
        y_grid = default_grid(model, n_points)
    vq = _as_queries(model, v)
    mat = density_matrix(model, vq, y_grid)
    if model.kernel_y.normalized:
        masses = density_mass(model, vq)
    else:
        masses = np.full(vq.shape[0], np.nan)
    return [DensityCurve(np.asarray(y_grid, dtype=np.float64), mat[t],
                         float(masses[t]), float(mat[t].min()))
            for t in range(vq.shape[0])]


def quadrature_mass(curve: DensityCurve) -> float:
    """Trapezoid integral of the curve over its grid, for cross-checking mass."""
    g = np.asarray(curve.grid, dtype=np.float64).ravel()
    return float(np.trapezoid(curve.values, g))


def curves_to_csv(curves: list[DensityCurve],
                  v_ids: list[int] | None = None) -> str:
    """Long-format CSV with the mandatory v_id,y,density header."""
    if v_ids is None:
        v_ids = list(range(len(curves)))
    if len(v_ids) != len(curves):
        raise InvalidArgumentError("one v_id per curve required")
    lines = ["v_id,y,density"]
    for vid, curve in zip(v_ids, curves):
        g = np.asarray(curve.grid, dtype=np.float64).reshape(len(curve.values), -1)
        for y_row, dens in zip(g, curve.values):
            y_txt = ";".join(f"{y:.17g}" for y in y_row)
            lines.append(f"{vid},{y_txt},{dens:.17g}")
    return "\n".join(lines) + "\n"
