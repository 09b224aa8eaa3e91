"""Shared model containers: global state, weight-site matrices, init, serialization."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np


class ModelError(RuntimeError):
    """Raised for invalid model inputs, missing caches, or unsupported operations."""


def frozen_array(a, dtype=np.float64) -> np.ndarray:
    """Own a read-only float64 copy of the input array."""
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def check_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise ModelError(f"{name} contains non-finite entries")


def xavier_normal(rng: np.random.Generator, n_out: int, n_in: int,
                  gain: float = 1.0) -> np.ndarray:
    """Xavier-normal matrix of shape (n_out, n_in), std = gain * sqrt(2/(fan_in+fan_out))."""
    std = gain * np.sqrt(2.0 / (n_in + n_out))
    return std * rng.standard_normal((n_out, n_in))


@dataclass(frozen=True)
class GlobalState:
    """Immutable record of a forward pass: state tensor plus linearization caches.

    ``h`` has shape (n_x, n_t, n_feat); for recurrent models n_feat = n_h, for the
    attention model it concatenates the per-layer activations along the feature
    axis.  Re-running forward on (params, x_ref) reproduces ``h`` bit-identically.
    """

    kind: str
    h: np.ndarray
    x_ref: np.ndarray
    params: object
    caches: Mapping[str, np.ndarray]
    h0: np.ndarray | None = None

    @property
    def n_x(self) -> int:
        return self.h.shape[0]

    @property
    def n_t(self) -> int:
        return self.h.shape[1]

    @property
    def n_feat(self) -> int:
        return self.h.shape[2]


def make_state(kind: str, h: np.ndarray, x_ref: np.ndarray, params: object,
               caches: dict[str, np.ndarray], h0: np.ndarray | None = None) -> GlobalState:
    frozen = {k: frozen_array(v) for k, v in caches.items()}
    return GlobalState(kind=kind, h=frozen_array(h), x_ref=frozen_array(x_ref),
                       params=params, caches=MappingProxyType(frozen),
                       h0=None if h0 is None else frozen_array(h0))


@dataclass(frozen=True)
class WeightSites:
    """Row-per-(sample, time) matrix of the vectors each trainable weight multiplies.

    ``V`` has shape (k, m) with k = n_x * n_t.  ``replication`` is the uniform
    per-family output width of the weight products (the identity factor of the
    Kronecker core), or None when families have unequal widths.
    """

    V: np.ndarray
    replication: int | None
    family_slices: Mapping[str, slice]
    families: tuple[str, ...]

    def __post_init__(self):
        v = frozen_array(self.V)
        check_finite("weight sites", v)
        object.__setattr__(self, "V", v)
        object.__setattr__(self, "family_slices",
                           MappingProxyType(dict(self.family_slices)))
        object.__setattr__(self, "families", tuple(self.families))

    @property
    def k(self) -> int:
        return self.V.shape[0]

    @property
    def m(self) -> int:
        return self.V.shape[1]


def validate_inputs(x, n_in: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != n_in:
        raise ModelError(f"inputs must have shape (n_x, n_t, {n_in}); got {x.shape}")
    check_finite("inputs", x)
    return x


def validate_h0(h0, n_x: int, n_h: int) -> np.ndarray:
    if h0 is None:
        return np.zeros((n_x, n_h))
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.shape != (n_x, n_h):
        raise ModelError(f"h0 must have shape ({n_x}, {n_h}); got {h0.shape}")
    check_finite("h0", h0)
    return h0


def raise_on_nonfinite_step(h_t: np.ndarray, t: int) -> None:
    """Error for an unstable forward step, naming the first offending (batch, time)."""
    bad = ~np.isfinite(h_t)
    if bad.any():
        j = int(np.argwhere(bad.any(axis=tuple(range(1, h_t.ndim))))[0, 0])
        raise ModelError(f"non-finite activation at batch {j}, time {t}")


def first_offending(mask_rows: np.ndarray) -> int:
    return int(np.argwhere(mask_rows)[0, 0])


_PARAM_KINDS: dict[str, object] = {}


def register_kind(kind: str, module) -> None:
    _PARAM_KINDS[kind] = module


def backend(kind: str):
    try:
        return _PARAM_KINDS[kind]
    except KeyError:
        raise ModelError(f"unknown model kind {kind!r}") from None


def save_params(path, params) -> None:
    """Serialize model parameters to an .npz container; round-trips bit-exactly."""
    kind = getattr(params, "kind", None)
    if kind is None or kind not in _PARAM_KINDS:
        raise ModelError(f"cannot serialize parameters of type {type(params).__name__}")
    arrays = _PARAM_KINDS[kind].params_to_arrays(params)
    np.savez(path, __kind__=np.array(kind), **arrays)


def load_params(path):
    """Inverse of save_params."""
    with np.load(path) as data:
        kind = str(data["__kind__"])
        arrays = {k: data[k] for k in data.files if k != "__kind__"}
    return backend(kind).params_from_arrays(arrays)


def mask_to_array(mask) -> np.ndarray:
    return np.array(sorted(mask))


def array_to_mask(arr) -> frozenset:
    return frozenset(str(s) for s in np.atleast_1d(arr))
