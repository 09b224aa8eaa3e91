"""Vanilla RNN h(t+1) = phi(W_rec h(t) + W_in x(t+1)) with exact hand-derived linearizations.

The public per-(j, t) operations follow the one-step update producing h[:, t]
from h[:, t-1] (h[:, -1] meaning h0).  The *_step variants are batched over an
arbitrary leading stack of probe vectors and over the sample axis, and are what
the operator-assembly layer uses.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

from gsntk.models import common
from gsntk.models.common import (
    GlobalState,
    ModelError,
    WeightSites,
    check_finite,
    frozen_array,
    make_state,
    validate_h0,
    validate_inputs,
    xavier_normal,
)

STATE_FAMILIES = ("rec", "in")
ALL_FAMILIES = ("rec", "in", "out")
NONLINEARITIES = ("tanh", "identity")


@dataclass(frozen=True)
class RnnParams:
    """Weights of a vanilla RNN with linear readout."""

    w_rec: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray
    nonlinearity: str = "tanh"
    trainable_mask: frozenset = frozenset(ALL_FAMILIES)

    kind = "rnn"

    def __post_init__(self):
        w_rec = frozen_array(self.w_rec)
        w_in = frozen_array(self.w_in)
        w_out = frozen_array(self.w_out)
        n_h = w_rec.shape[0]
        if w_rec.shape != (n_h, n_h):
            raise ModelError(f"w_rec must be square; got {w_rec.shape}")
        if w_in.ndim != 2 or w_in.shape[0] != n_h:
            raise ModelError(f"w_in must have shape ({n_h}, n_in); got {w_in.shape}")
        if w_out.ndim != 2 or w_out.shape[1] != n_h:
            raise ModelError(f"w_out must have shape (n_out, {n_h}); got {w_out.shape}")
        for name, w in (("w_rec", w_rec), ("w_in", w_in), ("w_out", w_out)):
            check_finite(name, w)
        if self.nonlinearity not in NONLINEARITIES:
            raise ModelError(f"unknown nonlinearity {self.nonlinearity!r}")
        mask = frozenset(self.trainable_mask)
        if not mask <= set(ALL_FAMILIES):
            raise ModelError(f"trainable_mask must be a subset of {ALL_FAMILIES}")
        object.__setattr__(self, "w_rec", w_rec)
        object.__setattr__(self, "w_in", w_in)
        object.__setattr__(self, "w_out", w_out)
        object.__setattr__(self, "trainable_mask", mask)

    @property
    def n_h(self) -> int:
        return self.w_rec.shape[0]

    @property
    def n_in(self) -> int:
        return self.w_in.shape[1]

    @property
    def n_out(self) -> int:
        return self.w_out.shape[0]


def init_params(rng: np.random.Generator, n_h: int, n_in: int, n_out: int,
                gain_rec: float = 1.0, gain_in: float = 1.0, gain_out: float = 1.0,
                nonlinearity: str = "tanh",
                trainable_mask=frozenset(ALL_FAMILIES)) -> RnnParams:
    """Xavier-normal RNN parameters with per-family gains."""
    return RnnParams(
        w_rec=xavier_normal(rng, n_h, n_h, gain_rec),
        w_in=xavier_normal(rng, n_h, n_in, gain_in),
        w_out=xavier_normal(rng, n_out, n_h, gain_out),
        nonlinearity=nonlinearity,
        trainable_mask=trainable_mask,
    )


def params_to_arrays(p: RnnParams) -> dict:
    return {
        "w_rec": p.w_rec, "w_in": p.w_in, "w_out": p.w_out,
        "nonlinearity": np.array(p.nonlinearity),
        "trainable_mask": common.mask_to_array(p.trainable_mask),
    }


def params_from_arrays(a: dict) -> RnnParams:
    return RnnParams(w_rec=a["w_rec"], w_in=a["w_in"], w_out=a["w_out"],
                     nonlinearity=str(a["nonlinearity"]),
                     trainable_mask=common.array_to_mask(a["trainable_mask"]))


_FAMILY_FIELDS = {"rec": "w_rec", "in": "w_in", "out": "w_out"}


def perturb_params(p: RnnParams, dtheta: dict, eps: float) -> RnnParams:
    """New parameters displaced by eps along a per-family direction."""
    import dataclasses
    repl = {_FAMILY_FIELDS[f]: getattr(p, _FAMILY_FIELDS[f]) + eps * np.asarray(d, float)
            for f, d in dtheta.items()}
    return dataclasses.replace(p, **repl)


def _phi(p: RnnParams, a: np.ndarray) -> np.ndarray:
    return np.tanh(a) if p.nonlinearity == "tanh" else a


def _step(p: RnnParams, h_prev: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    return _phi(p, h_prev @ p.w_rec.T + x_t @ p.w_in.T)


def _site_map(p: RnnParams, h_prev: np.ndarray, q: np.ndarray, pin: np.ndarray) -> np.ndarray:
    """One-step update as a function of the weight products q = W_rec h, pin = W_in x."""
    return _phi(p, q + pin)


def forward(params: RnnParams, x, h0=None) -> GlobalState:
    """Run the recurrence, caching pre-update states and activation slopes."""
    x = validate_inputs(x, params.n_in)
    n_x, n_t = x.shape[:2]
    h0 = validate_h0(h0, n_x, params.n_h)
    h = np.empty((n_x, n_t, params.n_h))
    h_prev = np.empty_like(h)
    prev = h0
    for t in range(n_t):
        h_prev[:, t] = prev
        prev = _step(params, prev, x[:, t])
        common.raise_on_nonfinite_step(prev, t)
        h[:, t] = prev
    dphi = 1.0 - h ** 2 if params.nonlinearity == "tanh" else np.ones_like(h)
    return make_state("rnn", h, x, params,
                      {"h_prev": h_prev, "dphi": dphi}, h0)


def _cache(state: GlobalState, name: str) -> np.ndarray:
    try:
        return state.caches[name]
    except KeyError:
        raise ModelError(f"missing forward cache {name!r}") from None


# ---------------------------------------------------------------- state JVP/VJP

def state_jac_apply(state: GlobalState, t: int, u: np.ndarray) -> np.ndarray:
    """D_h(step t) applied to u, batched over (..., n_x, n_h)."""
    return _cache(state, "dphi")[:, t] * (u @ state.params.w_rec.T)


def state_jac_apply_adjoint(state: GlobalState, t: int, u: np.ndarray) -> np.ndarray:
    return (_cache(state, "dphi")[:, t] * u) @ state.params.w_rec


def step_jvp_state(state: GlobalState, jt: tuple[int, int], dh: np.ndarray) -> np.ndarray:
    j, t = jt
    return _cache(state, "dphi")[j, t] * (state.params.w_rec @ np.asarray(dh, float))


def step_vjp_state(state: GlobalState, jt: tuple[int, int], u: np.ndarray) -> np.ndarray:
    j, t = jt
    return state.params.w_rec.T @ (_cache(state, "dphi")[j, t] * np.asarray(u, float))


# ---------------------------------------------------------------- param JVP/VJP

def state_param_families(params: RnnParams) -> tuple[str, ...]:
    """Trainable families that enter the state update, in canonical order."""
    return tuple(f for f in STATE_FAMILIES if f in params.trainable_mask)


def _check_families(params: RnnParams, families) -> None:
    active = set(state_param_families(params))
    for fam in families:
        if fam not in active:
            raise ModelError(
                f"parameter family {fam!r} is frozen or does not enter the state "
                f"update (active: {sorted(active)})")


def step_jvp_params(state: GlobalState, jt: tuple[int, int], dtheta: dict) -> np.ndarray:
    """Derivative of the one-step map at (j, t) along a parameter direction."""
    j, t = jt
    _check_families(state.params, dtheta)
    da = np.zeros(state.params.n_h)
    if "rec" in dtheta:
        da += np.asarray(dtheta["rec"], float) @ _cache(state, "h_prev")[j, t]
    if "in" in dtheta:
        da += np.asarray(dtheta["in"], float) @ state.x_ref[j, t]
    return _cache(state, "dphi")[j, t] * da


def step_vjp_params(state: GlobalState, jt: tuple[int, int], u: np.ndarray) -> dict:
    j, t = jt
    g = _cache(state, "dphi")[j, t] * np.asarray(u, float)
    out = {}
    if "rec" in state.params.trainable_mask:
        out["rec"] = np.outer(g, _cache(state, "h_prev")[j, t])
    if "in" in state.params.trainable_mask:
        out["in"] = np.outer(g, state.x_ref[j, t])
    return out


def param_jvp_full(state: GlobalState, dtheta: dict) -> np.ndarray:
    """All per-(j, t) one-step parameter derivatives at once; dtheta values may
    carry extra leading stack axes."""
    _check_families(state.params, dtheta)
    h_prev = _cache(state, "h_prev")
    acc = 0.0
    if "rec" in dtheta:
        acc = acc + np.einsum("...hd,xtd->...xth", np.asarray(dtheta["rec"], float), h_prev)
    if "in" in dtheta:
        acc = acc + np.einsum("...hd,xtd->...xth", np.asarray(dtheta["in"], float), state.x_ref)
    return _cache(state, "dphi") * acc


def param_vjp_full(state: GlobalState, u: np.ndarray) -> dict:
    """Adjoint of param_jvp_full; u has shape (..., n_x, n_t, n_h)."""
    g = _cache(state, "dphi") * np.asarray(u, float)
    out = {}
    if "rec" in state.params.trainable_mask:
        out["rec"] = np.einsum("...xth,xtd->...hd", g, _cache(state, "h_prev"))
    if "in" in state.params.trainable_mask:
        out["in"] = np.einsum("...xth,xtd->...hd", g, state.x_ref)
    return out


# ---------------------------------------------------------------- weight sites

def site_replication(params: RnnParams) -> int:
    """Output width of each weight-site product (the identity factor)."""
    return params.n_h


def weight_sites(state: GlobalState) -> WeightSites:
    """Rows (j, t) of the vectors multiplied by each trainable state weight."""
    params = state.params
    fams = state_param_families(params)
    k = state.n_x * state.n_t
    cols, slices, start = [], {}, 0
    for fam in fams:
        block = _cache(state, "h_prev") if fam == "rec" else state.x_ref
        block = block.reshape(k, block.shape[-1])
        slices[fam] = slice(start, start + block.shape[1])
        start += block.shape[1]
        cols.append(block)
    v = np.concatenate(cols, axis=1) if cols else np.zeros((k, 0))
    return WeightSites(V=v, replication=params.n_h, family_slices=slices, families=fams)


def _split_site_channels(params: RnnParams, dq: np.ndarray) -> list[np.ndarray]:
    fams = state_param_families(params)
    rep = site_replication(params)
    if dq.shape[-1] != len(fams) * rep:
        raise ModelError(f"site perturbation has width {dq.shape[-1]}; expected "
                         f"{len(fams)} famil{'y' if len(fams) == 1 else 'ies'} x {rep}")
    return [dq[..., i * rep:(i + 1) * rep] for i in range(len(fams))]


def _site_qp(params: RnnParams, dq_all: np.ndarray):
    """Map stacked active channels to the (q, pin) coordinates of _site_map."""
    fams = state_param_families(params)
    chans = dict(zip(fams, _split_site_channels(params, dq_all)))
    zero = np.zeros(dq_all.shape[:-1] + (site_replication(params),))
    return chans.get("rec", zero), chans.get("in", zero)


def site_jvp_step(state: GlobalState, t: int, dq: np.ndarray) -> np.ndarray:
    """Derivative of step t w.r.t. the stacked weight products, batched over
    (..., n_x, n_families * n_h)."""
    channels = _split_site_channels(state.params, np.asarray(dq, float))
    total = sum(channels)
    return _cache(state, "dphi")[:, t] * total


def site_vjp_step(state: GlobalState, t: int, u: np.ndarray) -> np.ndarray:
    fams = state_param_families(state.params)
    g = _cache(state, "dphi")[:, t] * np.asarray(u, float)
    return np.concatenate([g] * len(fams), axis=-1)


def site_jvp(state: GlobalState, jt: tuple[int, int], dq: np.ndarray) -> np.ndarray:
    j, t = jt
    channels = _split_site_channels(state.params, np.asarray(dq, float))
    return _cache(state, "dphi")[j, t] * sum(channels)


def site_vjp(state: GlobalState, jt: tuple[int, int], u: np.ndarray) -> np.ndarray:
    j, t = jt
    fams = state_param_families(state.params)
    g = _cache(state, "dphi")[j, t] * np.asarray(u, float)
    return np.concatenate([g] * len(fams), axis=-1)


def readout(state: GlobalState) -> np.ndarray:
    """Linear readout y = h W_out^T, shape (n_x, n_t, n_out)."""
    return state.h @ state.params.w_out.T


common.register_kind("rnn", sys.modules[__name__])
