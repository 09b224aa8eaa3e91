"""Gated recurrent unit (no biases, gate order r, z, l) with exact linearizations.

One step, with q = W h_prev (stacked hidden products) and p = W_in x_t (stacked
input products), each split into thirds (q1, q2, q3) / (p1, p2, p3):

    r = sigmoid(q1 + p1)
    z = sigmoid(q2 + p2)
    l = tanh(p3 + r * q3)
    h = (1 - z) * l + z * h_prev

All derivatives below are hand-derived from these four lines.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

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

STATE_FAMILIES = ("hid", "in")
ALL_FAMILIES = ("hid", "in", "out")


@dataclass(frozen=True)
class GruParams:
    """GRU weights: stacked hidden w_hid (3n_h, n_h), stacked input w_in (3n_h, n_in),
    readout w_out; gate blocks ordered (r, z, l); no biases."""

    w_hid: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray
    trainable_mask: frozenset = frozenset(ALL_FAMILIES)

    kind = "gru"

    def __post_init__(self):
        w_hid = frozen_array(self.w_hid)
        w_in = frozen_array(self.w_in)
        w_out = frozen_array(self.w_out)
        if w_hid.ndim != 2 or w_hid.shape[0] % 3 != 0 or w_hid.shape[0] != 3 * w_hid.shape[1]:
            raise ModelError(f"w_hid must have shape (3n_h, n_h); got {w_hid.shape}")
        n_h = w_hid.shape[1]
        if w_in.ndim != 2 or w_in.shape[0] != 3 * n_h:
            raise ModelError(f"w_in must have shape ({3 * n_h}, n_in); got {w_in.shape}")
        if w_out.ndim != 2 or w_out.shape[1] != n_h:
            raise ModelError(f"w_out must have shape (n_out, {n_h}); got {w_out.shape}")
        for name, w in (("w_hid", w_hid), ("w_in", w_in), ("w_out", w_out)):
            check_finite(name, w)
        mask = frozenset(self.trainable_mask)
        if not mask <= set(ALL_FAMILIES):
            raise ModelError(f"trainable_mask must be a subset of {ALL_FAMILIES}")
        object.__setattr__(self, "w_hid", w_hid)
        object.__setattr__(self, "w_in", w_in)
        object.__setattr__(self, "w_out", w_out)
        object.__setattr__(self, "trainable_mask", mask)

    @property
    def n_h(self) -> int:
        return self.w_hid.shape[1]

    @property
    def n_in(self) -> int:
        return self.w_in.shape[1]

    @property
    def n_out(self) -> int:
        return self.w_out.shape[0]


def init_params(rng: np.random.Generator, n_h: int, n_in: int, n_out: int,
                gain_hid: float = 1.0, gain_in: float = 1.0, gain_out: float = 1.0,
                trainable_mask=frozenset(ALL_FAMILIES)) -> GruParams:
    """Xavier-normal GRU parameters, each gate block initialized independently."""
    w_hid = np.vstack([xavier_normal(rng, n_h, n_h, gain_hid) for _ in range(3)])
    w_in = np.vstack([xavier_normal(rng, n_h, n_in, gain_in) for _ in range(3)])
    return GruParams(w_hid=w_hid, w_in=w_in,
                     w_out=xavier_normal(rng, n_out, n_h, gain_out),
                     trainable_mask=trainable_mask)


def params_to_arrays(p: GruParams) -> dict:
    return {"w_hid": p.w_hid, "w_in": p.w_in, "w_out": p.w_out,
            "trainable_mask": common.mask_to_array(p.trainable_mask)}


def params_from_arrays(a: dict) -> GruParams:
    return GruParams(w_hid=a["w_hid"], w_in=a["w_in"], w_out=a["w_out"],
                     trainable_mask=common.array_to_mask(a["trainable_mask"]))


_FAMILY_FIELDS = {"hid": "w_hid", "in": "w_in", "out": "w_out"}


def perturb_params(p: GruParams, dtheta: dict, eps: float) -> GruParams:
    """New parameters displaced by eps along a per-family direction."""
    import dataclasses
    repl = {_FAMILY_FIELDS[f]: getattr(p, _FAMILY_FIELDS[f]) + eps * np.asarray(d, float)
            for f, d in dtheta.items()}
    return dataclasses.replace(p, **repl)


def _thirds(q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = q.shape[-1] // 3
    return q[..., :n], q[..., n:2 * n], q[..., 2 * n:]


def _site_map(p: GruParams, h_prev: np.ndarray, q: np.ndarray, pin: np.ndarray) -> np.ndarray:
    """One-step update as a function of the stacked weight products (q, pin)."""
    q1, q2, q3 = _thirds(q)
    p1, p2, p3 = _thirds(pin)
    r = expit(q1 + p1)
    z = expit(q2 + p2)
    l = np.tanh(p3 + r * q3)
    return (1.0 - z) * l + z * h_prev


def _step(p: GruParams, h_prev: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    return _site_map(p, h_prev, h_prev @ p.w_hid.T, x_t @ p.w_in.T)


def forward(params: GruParams, x, h0=None) -> GlobalState:
    """Run the gated recurrence, caching gate values needed for linearization."""
    x = validate_inputs(x, params.n_in)
    n_x, n_t = x.shape[:2]
    n_h = params.n_h
    h0 = validate_h0(h0, n_x, n_h)
    h = np.empty((n_x, n_t, n_h))
    h_prev = np.empty_like(h)
    r_c = np.empty_like(h)
    z_c = np.empty_like(h)
    l_c = np.empty_like(h)
    q3_c = np.empty_like(h)
    prev = h0
    for t in range(n_t):
        h_prev[:, t] = prev
        q = prev @ params.w_hid.T
        pin = x[:, t] @ params.w_in.T
        q1, q2, q3 = _thirds(q)
        p1, p2, p3 = _thirds(pin)
        r = expit(q1 + p1)
        z = expit(q2 + p2)
        l = np.tanh(p3 + r * q3)
        prev = (1.0 - z) * l + z * prev
        common.raise_on_nonfinite_step(prev, t)
        h[:, t] = prev
        r_c[:, t], z_c[:, t], l_c[:, t], q3_c[:, t] = r, z, l, q3
    return make_state("gru", h, x, params,
                      {"h_prev": h_prev, "r": r_c, "z": z_c, "l": l_c, "q3": q3_c}, h0)


def _cache(state: GlobalState, name: str):
    try:
        return state.caches[name]
    except KeyError:
        raise ModelError(f"missing forward cache {name!r}") from None


def _caches_at(state: GlobalState, t) -> dict:
    return {name: _cache(state, name)[:, t] for name in ("h_prev", "r", "z", "l", "q3")}


def _site_jvp_cached(c: dict, dq: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """D_(q,p) of the site map at cached gate values; broadcast over leading axes."""
    dq1, dq2, dq3 = _thirds(dq)
    dp1, dp2, dp3 = _thirds(dp)
    r, z, l, q3, h_prev = c["r"], c["z"], c["l"], c["q3"], c["h_prev"]
    dr = r * (1.0 - r) * (dq1 + dp1)
    dz = z * (1.0 - z) * (dq2 + dp2)
    dl = (1.0 - l ** 2) * (dp3 + dr * q3 + r * dq3)
    return (h_prev - l) * dz + (1.0 - z) * dl


def _site_vjp_cached(c: dict, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of _site_jvp_cached; returns (grad_q, grad_p) stacked in thirds."""
    r, z, l, q3, h_prev = c["r"], c["z"], c["l"], c["q3"], c["h_prev"]
    g_l = (1.0 - z) * u
    g_z = (h_prev - l) * u
    g_arg = (1.0 - l ** 2) * g_l
    g_r = q3 * g_arg
    g1 = r * (1.0 - r) * g_r
    g2 = z * (1.0 - z) * g_z
    gq = np.concatenate([g1, g2, r * g_arg], axis=-1)
    gp = np.concatenate([g1, g2, g_arg], axis=-1)
    return gq, gp


# ---------------------------------------------------------------- state JVP/VJP

def state_jac_apply(state: GlobalState, t: int, u: np.ndarray) -> np.ndarray:
    """D_h(step t) applied to u, batched over (..., n_x, n_h)."""
    c = _caches_at(state, t)
    dq = u @ state.params.w_hid.T
    return _site_jvp_cached(c, dq, np.zeros_like(dq)) + c["z"] * u


def state_jac_apply_adjoint(state: GlobalState, t: int, u: np.ndarray) -> np.ndarray:
    c = _caches_at(state, t)
    gq, _ = _site_vjp_cached(c, u)
    return gq @ state.params.w_hid + c["z"] * u


def step_jvp_state(state: GlobalState, jt: tuple[int, int], dh: np.ndarray) -> np.ndarray:
    j, t = jt
    dh = np.asarray(dh, float)
    c = {k: v[j] for k, v in _caches_at(state, t).items()}
    dq = state.params.w_hid @ dh
    return _site_jvp_cached(c, dq, np.zeros_like(dq)) + c["z"] * dh


def step_vjp_state(state: GlobalState, jt: tuple[int, int], u: np.ndarray) -> np.ndarray:
    j, t = jt
    u = np.asarray(u, float)
    c = {k: v[j] for k, v in _caches_at(state, t).items()}
    gq, _ = _site_vjp_cached(c, u)
    return state.params.w_hid.T @ gq + c["z"] * u


# ---------------------------------------------------------------- param JVP/VJP

def state_param_families(params: GruParams) -> tuple[str, ...]:
    """Trainable families that enter the state update, in canonical order."""
    return tuple(f for f in STATE_FAMILIES if f in params.trainable_mask)


def _check_families(params: GruParams, families) -> None:
    active = set(state_param_families(params))
    for fam in families:
        if fam not in active:
            raise ModelError(
                f"parameter family {fam!r} is frozen or does not enter the state "
                f"update (active: {sorted(active)})")


def _param_products(state: GlobalState, dtheta: dict, jt=None):
    """(dq, dp) stacked products for a parameter direction, at one (j, t) or all."""
    if jt is None:
        h_prev, x = _cache(state, "h_prev"), state.x_ref
        ein = "...ah,xth->...xta"
    else:
        j, t = jt
        h_prev, x = _cache(state, "h_prev")[j, t], state.x_ref[j, t]
        ein = "...ah,h->...a"
    dq = dp = None
    if "hid" in dtheta:
        dq = np.einsum(ein, np.asarray(dtheta["hid"], float), h_prev)
    if "in" in dtheta:
        dp = np.einsum(ein, np.asarray(dtheta["in"], float), x)
    shape_ref = dq if dq is not None else dp
    if dq is None:
        dq = np.zeros_like(shape_ref)
    if dp is None:
        dp = np.zeros_like(shape_ref)
    return dq, dp


def step_jvp_params(state: GlobalState, jt: tuple[int, int], dtheta: dict) -> np.ndarray:
    _check_families(state.params, dtheta)
    j, t = jt
    dq, dp = _param_products(state, dtheta, jt)
    c = {k: v[j] for k, v in _caches_at(state, t).items()}
    return _site_jvp_cached(c, dq, dp)


def step_vjp_params(state: GlobalState, jt: tuple[int, int], u: np.ndarray) -> dict:
    j, t = jt
    c = {k: v[j] for k, v in _caches_at(state, t).items()}
    gq, gp = _site_vjp_cached(c, np.asarray(u, float))
    out = {}
    if "hid" in state.params.trainable_mask:
        out["hid"] = np.outer(gq, c["h_prev"])
    if "in" in state.params.trainable_mask:
        out["in"] = np.outer(gp, state.x_ref[j, t])
    return out


def param_jvp_full(state: GlobalState, dtheta: dict) -> np.ndarray:
    """All per-(j, t) one-step parameter derivatives at once; dtheta values may
    carry extra leading stack axes."""
    _check_families(state.params, dtheta)
    dq, dp = _param_products(state, dtheta)
    c = {name: _cache(state, name) for name in ("h_prev", "r", "z", "l", "q3")}
    return _site_jvp_cached(c, dq, dp)


def param_vjp_full(state: GlobalState, u: np.ndarray) -> dict:
    """Adjoint of param_jvp_full; u has shape (..., n_x, n_t, n_h)."""
    c = {name: _cache(state, name) for name in ("h_prev", "r", "z", "l", "q3")}
    gq, gp = _site_vjp_cached(c, np.asarray(u, float))
    out = {}
    if "hid" in state.params.trainable_mask:
        out["hid"] = np.einsum("...xta,xth->...ah", gq, c["h_prev"])
    if "in" in state.params.trainable_mask:
        out["in"] = np.einsum("...xta,xth->...ah", gp, state.x_ref)
    return out


# ---------------------------------------------------------------- weight sites

def site_replication(params: GruParams) -> int:
    """Output width of each stacked weight product (the identity factor)."""
    return 3 * params.n_h


def weight_sites(state: GlobalState) -> WeightSites:
    params = state.params
    fams = state_param_families(params)
    k = state.n_x * state.n_t
    cols, slices, start = [], {}, 0
    for fam in fams:
        block = _cache(state, "h_prev") if fam == "hid" else state.x_ref
        block = block.reshape(k, block.shape[-1])
        slices[fam] = slice(start, start + block.shape[1])
        start += block.shape[1]
        cols.append(block)
    v = np.concatenate(cols, axis=1) if cols else np.zeros((k, 0))
    return WeightSites(V=v, replication=site_replication(params),
                       family_slices=slices, families=fams)


def _site_qp(params: GruParams, dq_all: np.ndarray):
    """Split a stacked (..., n_families * 3n_h) site perturbation into (dq, dp)."""
    fams = state_param_families(params)
    rep = site_replication(params)
    if dq_all.shape[-1] != len(fams) * rep:
        raise ModelError(f"site perturbation has width {dq_all.shape[-1]}; expected "
                         f"{len(fams)} x {rep}")
    chans = {fam: dq_all[..., i * rep:(i + 1) * rep] for i, fam in enumerate(fams)}
    zero = np.zeros(dq_all.shape[:-1] + (rep,))
    return chans.get("hid", zero), chans.get("in", zero)


def site_jvp_step(state: GlobalState, t: int, dq_all: np.ndarray) -> np.ndarray:
    """Derivative of step t w.r.t. the stacked weight products, batched over
    (..., n_x, n_families * 3n_h)."""
    dq, dp = _site_qp(state.params, np.asarray(dq_all, float))
    return _site_jvp_cached(_caches_at(state, t), dq, dp)


def site_vjp_step(state: GlobalState, t: int, u: np.ndarray) -> np.ndarray:
    gq, gp = _site_vjp_cached(_caches_at(state, t), np.asarray(u, float))
    parts = {"hid": gq, "in": gp}
    fams = state_param_families(state.params)
    return np.concatenate([parts[f] for f in fams], axis=-1)


def site_jvp(state: GlobalState, jt: tuple[int, int], dq_all: np.ndarray) -> np.ndarray:
    j, t = jt
    dq, dp = _site_qp(state.params, np.asarray(dq_all, float))
    c = {k: v[j] for k, v in _caches_at(state, t).items()}
    return _site_jvp_cached(c, dq, dp)


def site_vjp(state: GlobalState, jt: tuple[int, int], u: np.ndarray) -> np.ndarray:
    j, t = jt
    c = {k: v[j] for k, v in _caches_at(state, t).items()}
    gq, gp = _site_vjp_cached(c, np.asarray(u, float))
    parts = {"hid": gq, "in": gp}
    fams = state_param_families(state.params)
    return np.concatenate([parts[f] for f in fams], axis=-1)


def readout(state: GlobalState) -> np.ndarray:
    """Linear readout y = h W_out^T, shape (n_x, n_t, n_out)."""
    return state.h @ state.params.w_out.T


common.register_kind("gru", sys.modules[__name__])
