"""Versioned on-disk container for fitted models.

Models are stored as a single .npz archive whose ``__meta__`` entry is a JSON
document carrying a ``schema_version`` plus all scalar configuration; every
numeric array (network weights, cached Gram matrices, pseudo-weights) is
stored as float64 and round-trips bit-exactly.  Writes go through a temp file
and an atomic rename.
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Any

import numpy as np

from .errors import InvalidArgumentError
from .estimators import (CcmeModel, DfCme, DfSecond, FirstStage, NkCme,
                         NkSecond, RrCme, RrSecond)
from .kernels import KernelSpec, SpdFactor
from .nets import MlpParams

__all__ = ["SCHEMA_VERSION", "save_model", "load_model"]

SCHEMA_VERSION = 1


def _kernel_meta(spec: KernelSpec) -> dict[str, Any]:
    return {"family": spec.family, "bandwidth": spec.bandwidth,
            "normalized": spec.normalized}


def _kernel_from(meta: dict[str, Any]) -> KernelSpec:
    return KernelSpec(meta["family"], meta["bandwidth"], meta["normalized"])


def _pack_net(prefix: str, net: MlpParams, arrays: dict[str, np.ndarray]) -> list[int]:
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"{prefix}.w{i}"] = w
        arrays[f"{prefix}.b{i}"] = b
    return [int(s) for s in net.sizes]


def _unpack_net(prefix: str, sizes: list[int], arrays: Any) -> MlpParams:
    n_layers = len(sizes) - 1
    weights = [np.asarray(arrays[f"{prefix}.w{i}"]) for i in range(n_layers)]
    biases = [np.asarray(arrays[f"{prefix}.b{i}"]) for i in range(n_layers)]
    return MlpParams(list(sizes), weights, biases)


def _pack_first(first: FirstStage, arrays: dict[str, np.ndarray]) -> dict[str, Any]:
    meta: dict[str, Any] = {
        "method": first.method,
        "kernel_y": _kernel_meta(first.kernel_y),
        "x_cols": first.x_cols,
        "ridge0": first.ridge0,
    }
    arrays["first.y0t"] = first.y0t
    cme = first.cme
    if isinstance(cme, RrCme):
        meta["kernel_x"] = _kernel_meta(cme.kernel_x)
        arrays["first.x0t"] = cme.x0t
        arrays["first.factor"] = cme.factor.matrix
    elif isinstance(cme, DfCme):
        meta["net_sizes"] = _pack_net("first.net", cme.net, arrays)
        meta["final_loss"] = cme.final_loss
        arrays["first.psi0"] = cme.psi0
        arrays["first.factor"] = cme.factor.matrix
    else:
        meta["net_sizes"] = _pack_net("first.net", cme.net, arrays)
        meta["final_loss"] = cme.final_loss
        arrays["first.grid"] = cme.grid
        arrays["first.k_m"] = cme.k_m
    return meta


def _unpack_first(meta: dict[str, Any], arrays: Any) -> FirstStage:
    method = meta["method"]
    ridge0 = float(meta["ridge0"])
    y0t = np.asarray(arrays["first.y0t"])
    if method == "rr":
        cme: RrCme | DfCme | NkCme = RrCme(
            _kernel_from(meta["kernel_x"]),
            np.asarray(arrays["first.x0t"]),
            SpdFactor.from_regularized(np.asarray(arrays["first.factor"]), ridge0))
    elif method == "df":
        cme = DfCme(
            _unpack_net("first.net", meta["net_sizes"], arrays),
            np.asarray(arrays["first.psi0"]),
            SpdFactor.from_regularized(np.asarray(arrays["first.factor"]), ridge0),
            float(meta.get("final_loss", float("nan"))))
    else:
        cme = NkCme(
            _unpack_net("first.net", meta["net_sizes"], arrays),
            np.asarray(arrays["first.grid"]),
            np.asarray(arrays["first.k_m"]),
            float(meta.get("final_loss", float("nan"))))
    x_cols = meta["x_cols"]
    return FirstStage(method, _kernel_from(meta["kernel_y"]),
                      None if x_cols is None else [int(i) for i in x_cols],
                      ridge0, y0t, cme)


def save_model(model: CcmeModel, path: str) -> None:
    """Write the model to ``path`` as an .npz archive (atomic replace)."""
    arrays: dict[str, np.ndarray] = {
        "a": model.a, "c": model.c, "y1": model.y1,
    }
    meta: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "method": model.method,
        "variant": model.variant,
        "kernel_y": _kernel_meta(model.kernel_y),
        "ridge1": model.ridge1,
        "y_lo": model.y_lo,
        "y_hi": model.y_hi,
        "v_cols": [int(i) for i in model.v_cols],
        "has_omega": model.omega is not None,
        "has_first": model.first is not None,
        "has_cross": model.cross_cache is not None,
    }
    if model.omega is not None:
        arrays["omega"] = model.omega
    if model.cross_cache is not None:
        arrays["cross_cache"] = model.cross_cache
    if model.first is not None:
        meta["first"] = _pack_first(model.first, arrays)

    second = model.second
    if isinstance(second, RrSecond):
        meta["second_kind"] = "rr"
        meta["kernel_v"] = _kernel_meta(second.kernel_v)
        arrays["second.v1"] = second.v1
        arrays["second.factor"] = second.factor.matrix
    elif isinstance(second, DfSecond):
        meta["second_kind"] = "df"
        meta["second_net_sizes"] = _pack_net("second.net", second.net, arrays)
        meta["v_dim"] = int(second.v_dim)
        meta["second_final_loss"] = second.final_loss
        arrays["second.psi1"] = second.psi1
        arrays["second.factor"] = second.factor.matrix
    else:
        meta["second_kind"] = "nk"
        meta["second_net_sizes"] = _pack_net("second.net", second.net, arrays)
        meta["v_dim"] = int(second.v_dim)
        meta["second_final_loss"] = second.final_loss
        arrays["second.grid"] = second.grid
        arrays["second.k_m"] = second.k_m

    arrays["__meta__"] = np.array(json.dumps(meta))
    out_dir = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path: str) -> CcmeModel:
    """Read a model written by save_model, verifying the schema version."""
    with np.load(path, allow_pickle=False) as npz:
        try:
            meta = json.loads(str(npz["__meta__"][()]))
        except KeyError:
            raise InvalidArgumentError(f"{path} is not a model archive")
        version = meta.get("schema_version")
        if version != SCHEMA_VERSION:
            raise InvalidArgumentError(
                f"unsupported model schema version {version!r}; "
                f"this build reads version {SCHEMA_VERSION}")

        ridge1 = float(meta["ridge1"])
        kind = meta["second_kind"]
        if kind == "rr":
            second: RrSecond | DfSecond | NkSecond = RrSecond(
                _kernel_from(meta["kernel_v"]),
                np.asarray(npz["second.v1"]),
                SpdFactor.from_regularized(np.asarray(npz["second.factor"]), ridge1))
        elif kind == "df":
            second = DfSecond(
                _unpack_net("second.net", meta["second_net_sizes"], npz),
                int(meta["v_dim"]),
                np.asarray(npz["second.psi1"]),
                SpdFactor.from_regularized(np.asarray(npz["second.factor"]), ridge1),
                float(meta.get("second_final_loss", float("nan"))))
        else:
            second = NkSecond(
                _unpack_net("second.net", meta["second_net_sizes"], npz),
                int(meta["v_dim"]),
                np.asarray(npz["second.grid"]),
                np.asarray(npz["second.k_m"]),
                float(meta.get("second_final_loss", float("nan"))))

        first = _unpack_first(meta["first"], npz) if meta["has_first"] else None
        return CcmeModel(
            meta["method"], meta["variant"], _kernel_from(meta["kernel_y"]),
            ridge1,
            np.asarray(npz["a"]), np.asarray(npz["c"]), np.asarray(npz["y1"]),
            np.asarray(npz["omega"]) if meta["has_omega"] else None,
            first, second, float(meta["y_lo"]), float(meta["y_hi"]),
            np.asarray(npz["cross_cache"]) if meta["has_cross"] else None,
            [int(i) for i in meta["v_cols"]])
