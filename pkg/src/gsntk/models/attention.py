"""Single-block self-attention + MLP, analyzed at initialization.

Per batch sample, with X in R^(n_t x n_in):

    Q = X Wq^T,  K = X Wk^T,  Z = X Wv^T
    S = softmax_rows(Q K^T / sqrt(n_attn)),  A = S Z
    H_1 = A Wo^T
    H_(l+1) = tanh(H_l Wl^T + bl),  l = 1..L-1
    Y = H_L Wout^T + bout

The global state concatenates (A, H_1, ..., H_L) along the feature axis; the
readout Y does not enter it.  This model is non-recurrent, so the per-step and
per-site operations of the recurrent models are unsupported; instead the full
state-parameter JVP/VJP pair (model_jvp_params / model_vjp_params) is provided,
with the internal propagation folded in.
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
    validate_inputs,
    xavier_normal,
)

ATTN_FAMILIES = ("q", "k", "v", "o")


def mlp_family(layer: int) -> str:
    return f"mlp_{layer}"


@dataclass(frozen=True)
class AttnMlpParams:
    """Attention weights (w_q, w_k, w_v: n_attn x n_in; w_o: n_mlp x n_attn),
    hidden MLP weights/biases, and a linear readout."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    mlp_ws: tuple
    mlp_bs: tuple
    w_out: np.ndarray
    b_out: np.ndarray
    trainable_mask: frozenset = frozenset()

    kind = "attn"

    def __post_init__(self):
        w_q = frozen_array(self.w_q)
        w_k = frozen_array(self.w_k)
        w_v = frozen_array(self.w_v)
        w_o = frozen_array(self.w_o)
        mlp_ws = tuple(frozen_array(w) for w in self.mlp_ws)
        mlp_bs = tuple(frozen_array(b) for b in self.mlp_bs)
        w_out = frozen_array(self.w_out)
        b_out = frozen_array(self.b_out)
        n_attn, n_in = w_q.shape
        if w_k.shape != (n_attn, n_in) or w_v.shape != (n_attn, n_in):
            raise ModelError("w_q, w_k, w_v must share shape (n_attn, n_in)")
        if w_o.ndim != 2 or w_o.shape[1] != n_attn:
            raise ModelError(f"w_o must have shape (n_mlp, {n_attn}); got {w_o.shape}")
        n_mlp = w_o.shape[0]
        if len(mlp_ws) != len(mlp_bs):
            raise ModelError("mlp_ws and mlp_bs must have equal length")
        for w, b in zip(mlp_ws, mlp_bs):
            if w.shape != (n_mlp, n_mlp) or b.shape != (n_mlp,):
                raise ModelError("hidden MLP weights must be (n_mlp, n_mlp) with "
                                 "(n_mlp,) biases")
        if w_out.ndim != 2 or w_out.shape[1] != n_mlp or b_out.shape != (w_out.shape[0],):
            raise ModelError("readout must be (n_out, n_mlp) with (n_out,) bias")
        for name, arr in (("w_q", w_q), ("w_k", w_k), ("w_v", w_v), ("w_o", w_o),
                          ("w_out", w_out), ("b_out", b_out), *(("mlp", w) for w in mlp_ws),
                          *(("mlp bias", b) for b in mlp_bs)):
            check_finite(name, arr)
        fams = set(self.all_families_for(len(mlp_ws)))
        mask = frozenset(self.trainable_mask) if self.trainable_mask else frozenset(fams)
        if not mask <= fams:
            raise ModelError(f"trainable_mask must be a subset of {sorted(fams)}")
        object.__setattr__(self, "w_q", w_q)
        object.__setattr__(self, "w_k", w_k)
        object.__setattr__(self, "w_v", w_v)
        object.__setattr__(self, "w_o", w_o)
        object.__setattr__(self, "mlp_ws", mlp_ws)
        object.__setattr__(self, "mlp_bs", mlp_bs)
        object.__setattr__(self, "w_out", w_out)
        object.__setattr__(self, "b_out", b_out)
        object.__setattr__(self, "trainable_mask", mask)

    @staticmethod
    def all_families_for(n_hidden: int) -> tuple[str, ...]:
        return ATTN_FAMILIES + tuple(mlp_family(i + 1) for i in range(n_hidden)) + ("out",)

    @property
    def n_in(self) -> int:
        return self.w_q.shape[1]

    @property
    def n_attn(self) -> int:
        return self.w_q.shape[0]

    @property
    def n_mlp(self) -> int:
        return self.w_o.shape[0]

    @property
    def n_layers(self) -> int:
        """L: number of activation layers H_1..H_L in the state."""
        return len(self.mlp_ws) + 1

    @property
    def n_out(self) -> int:
        return self.w_out.shape[0]

    @property
    def state_width(self) -> int:
        return self.n_attn + self.n_layers * self.n_mlp


def init_params(rng: np.random.Generator, n_in: int, n_attn: int, n_mlp: int,
                n_layers: int, n_out: int, gain: float = 1.0,
                trainable_mask=frozenset()) -> AttnMlpParams:
    """Xavier-normal attention + MLP parameters with zero biases; n_layers = L >= 1."""
    if n_layers < 1:
        raise ModelError("n_layers must be >= 1")
    return AttnMlpParams(
        w_q=xavier_normal(rng, n_attn, n_in, gain),
        w_k=xavier_normal(rng, n_attn, n_in, gain),
        w_v=xavier_normal(rng, n_attn, n_in, gain),
        w_o=xavier_normal(rng, n_mlp, n_attn, gain),
        mlp_ws=tuple(xavier_normal(rng, n_mlp, n_mlp, gain) for _ in range(n_layers - 1)),
        mlp_bs=tuple(np.zeros(n_mlp) for _ in range(n_layers - 1)),
        w_out=xavier_normal(rng, n_out, n_mlp, gain),
        b_out=np.zeros(n_out),
        trainable_mask=trainable_mask,
    )


def params_to_arrays(p: AttnMlpParams) -> dict:
    arrays = {"w_q": p.w_q, "w_k": p.w_k, "w_v": p.w_v, "w_o": p.w_o,
              "w_out": p.w_out, "b_out": p.b_out,
              "trainable_mask": common.mask_to_array(p.trainable_mask),
              "n_hidden": np.array(len(p.mlp_ws))}
    for i, (w, b) in enumerate(zip(p.mlp_ws, p.mlp_bs)):
        arrays[f"mlp_w_{i}"] = w
        arrays[f"mlp_b_{i}"] = b
    return arrays


def params_from_arrays(a: dict) -> AttnMlpParams:
    n_hidden = int(a["n_hidden"])
    return AttnMlpParams(
        w_q=a["w_q"], w_k=a["w_k"], w_v=a["w_v"], w_o=a["w_o"],
        mlp_ws=tuple(a[f"mlp_w_{i}"] for i in range(n_hidden)),
        mlp_bs=tuple(a[f"mlp_b_{i}"] for i in range(n_hidden)),
        w_out=a["w_out"], b_out=a["b_out"],
        trainable_mask=common.array_to_mask(a["trainable_mask"]))


def perturb_params(p: AttnMlpParams, dtheta: dict, eps: float) -> AttnMlpParams:
    """New parameters displaced by eps along a per-family direction."""
    import dataclasses
    fields = {"q": "w_q", "k": "w_k", "v": "w_v", "o": "w_o", "out": "w_out"}
    repl = {}
    mlp_ws = list(p.mlp_ws)
    for fam, d in dtheta.items():
        d = np.asarray(d, float)
        if fam in fields:
            repl[fields[fam]] = getattr(p, fields[fam]) + eps * d
        elif fam.startswith("mlp_"):
            idx = int(fam.split("_")[1]) - 1
            mlp_ws[idx] = mlp_ws[idx] + eps * d
        else:
            raise ModelError(f"unknown parameter family {fam!r}")
    repl["mlp_ws"] = tuple(mlp_ws)
    return dataclasses.replace(p, **repl)


def _softmax_rows(e: np.ndarray) -> np.ndarray:
    e = e - e.max(axis=-1, keepdims=True)
    w = np.exp(e)
    return w / w.sum(axis=-1, keepdims=True)


def forward(params: AttnMlpParams, x, h0=None) -> GlobalState:
    """Evaluate the block, caching attention weights and layer activations."""
    if h0 is not None:
        raise ModelError("the attention model takes no initial state")
    x = validate_inputs(x, params.n_in)
    q = x @ params.w_q.T
    k = x @ params.w_k.T
    z = x @ params.w_v.T
    e = np.einsum("xta,xsa->xts", q, k) / np.sqrt(params.n_attn)
    s = _softmax_rows(e)
    a = np.einsum("xts,xsa->xta", s, z)
    layers = [a @ params.w_o.T]
    for w, b in zip(params.mlp_ws, params.mlp_bs):
        layers.append(np.tanh(layers[-1] @ w.T + b))
    h_layers = np.stack(layers)                      # (L, n_x, n_t, n_mlp)
    dphi = 1.0 - h_layers[1:] ** 2                   # slopes of H_2..H_L
    state = np.concatenate([a] + layers, axis=-1)
    common.check_finite("activations", state)
    return make_state("attn", state, x, params,
                      {"q": q, "k": k, "z": z, "s": s, "a": a,
                       "h_layers": h_layers, "dphi": dphi})


def _cache(state: GlobalState, name: str):
    try:
        return state.caches[name]
    except KeyError:
        raise ModelError(f"missing forward cache {name!r}") from None


def state_param_families(params: AttnMlpParams) -> tuple[str, ...]:
    """Trainable families that enter the global state (readout excluded)."""
    fams = ATTN_FAMILIES + tuple(mlp_family(i + 1) for i in range(len(params.mlp_ws)))
    return tuple(f for f in fams if f in params.trainable_mask)


def _check_families(params: AttnMlpParams, families) -> None:
    active = set(state_param_families(params))
    for fam in families:
        if fam not in active:
            raise ModelError(
                f"parameter family {fam!r} is frozen or does not enter the state "
                f"(active: {sorted(active)})")


def _split_state(params: AttnMlpParams, u: np.ndarray):
    """Split a state tensor (..., n_x, n_t, state_width) into (uA, [uH_1..uH_L])."""
    n_attn, n_mlp = params.n_attn, params.n_mlp
    ua = u[..., :n_attn]
    uh = [u[..., n_attn + i * n_mlp: n_attn + (i + 1) * n_mlp]
          for i in range(params.n_layers)]
    return ua, uh


def model_jvp_params(state: GlobalState, dtheta: dict) -> np.ndarray:
    """Full derivative of the global state along a parameter direction; dtheta
    values may carry extra leading stack axes."""
    p: AttnMlpParams = state.params
    _check_families(p, dtheta)
    x = state.x_ref
    q, k, z, s = (_cache(state, n) for n in ("q", "k", "z", "s"))
    a, h_layers, dphi = _cache(state, "a"), _cache(state, "h_layers"), _cache(state, "dphi")
    scale = 1.0 / np.sqrt(p.n_attn)

    def site(fam, other):
        d = dtheta.get(fam)
        return None if d is None else np.einsum("...ai,xti->...xta",
                                                np.asarray(d, float), other)

    dq, dk, dz = site("q", x), site("k", x), site("v", x)
    de = 0.0
    if dq is not None:
        de = de + np.einsum("...xta,xsa->...xts", dq, k) * scale
    if dk is not None:
        de = de + np.einsum("xta,...xsa->...xts", q, dk) * scale
    if np.isscalar(de) and de == 0.0:
        ds = None
    else:
        tmp = s * de
        ds = tmp - s * tmp.sum(axis=-1, keepdims=True)
    da = 0.0
    if ds is not None:
        da = da + np.einsum("...xts,xsa->...xta", ds, z)
    if dz is not None:
        da = da + np.einsum("xts,...xsa->...xta", s, dz)
    if np.isscalar(da):
        da = np.zeros(_lead_shape(dtheta) + state.h.shape[:-1] + (p.n_attn,))

    dh = np.einsum("...xta,ma->...xtm", da, p.w_o)
    if "o" in dtheta:
        dh = dh + np.einsum("...ma,xta->...xtm", np.asarray(dtheta["o"], float), a)
    dh_list = [dh]
    for i, w in enumerate(p.mlp_ws):
        dg = np.einsum("...xtm,nm->...xtn", dh_list[-1], w)
        fam = mlp_family(i + 1)
        if fam in dtheta:
            dg = dg + np.einsum("...nm,xtm->...xtn", np.asarray(dtheta[fam], float),
                                h_layers[i])
        dh_list.append(dphi[i] * dg)
    da = np.broadcast_to(da, dh_list[0].shape[:-1] + (p.n_attn,))
    return np.concatenate([da] + dh_list, axis=-1)


def _lead_shape(dtheta: dict) -> tuple:
    for v in dtheta.values():
        return np.asarray(v).shape[:-2]
    return ()


def model_vjp_params(state: GlobalState, u: np.ndarray) -> dict:
    """Adjoint of model_jvp_params; u has shape (..., n_x, n_t, state_width)."""
    p: AttnMlpParams = state.params
    x = state.x_ref
    q, k, z, s = (_cache(state, n) for n in ("q", "k", "z", "s"))
    a, h_layers, dphi = _cache(state, "a"), _cache(state, "h_layers"), _cache(state, "dphi")
    scale = 1.0 / np.sqrt(p.n_attn)
    active = set(state_param_families(p))
    u = np.asarray(u, float)
    ua, uh = _split_state(p, u)
    out = {}

    g = uh[-1]
    for i in range(len(p.mlp_ws) - 1, -1, -1):
        gg = dphi[i] * g
        fam = mlp_family(i + 1)
        if fam in active:
            out[fam] = np.einsum("...xtn,xtm->...nm", gg, h_layers[i])
        g = np.einsum("...xtn,nm->...xtm", gg, p.mlp_ws[i]) + uh[i]
    if "o" in active:
        out["o"] = np.einsum("...xtm,xta->...ma", g, a)
    ga = np.einsum("...xtm,ma->...xta", g, p.w_o) + ua
    if "v" in active:
        gz = np.einsum("xts,...xta->...xsa", s, ga)
        out["v"] = np.einsum("...xsa,xsi->...ai", gz, x)
    if "q" in active or "k" in active:
        gs = np.einsum("...xta,xsa->...xts", ga, z)
        tmp = s * gs
        ge = (tmp - s * tmp.sum(axis=-1, keepdims=True)) * scale
        if "q" in active:
            gq = np.einsum("...xts,xsa->...xta", ge, k)
            out["q"] = np.einsum("...xta,xti->...ai", gq, x)
        if "k" in active:
            gk = np.einsum("...xts,xta->...xsa", ge, q)
            out["k"] = np.einsum("...xsa,xsi->...ai", gk, x)
    return out


def weight_sites(state: GlobalState) -> WeightSites:
    """Rows (j, t): input (for q, k, v), attention output (for o), and hidden MLP
    activations (for mlp_l); column count 3 n_in + n_attn + (L-1) n_mlp when all
    state families are trainable."""
    p: AttnMlpParams = state.params
    fams = state_param_families(p)
    k_rows = state.n_x * state.n_t
    blocks = {"q": state.x_ref, "k": state.x_ref, "v": state.x_ref,
              "o": _cache(state, "a")}
    for i in range(len(p.mlp_ws)):
        blocks[mlp_family(i + 1)] = _cache(state, "h_layers")[i]
    cols, slices, start = [], {}, 0
    for fam in fams:
        block = blocks[fam].reshape(k_rows, -1)
        slices[fam] = slice(start, start + block.shape[1])
        start += block.shape[1]
        cols.append(block)
    v = np.concatenate(cols, axis=1) if cols else np.zeros((k_rows, 0))
    return WeightSites(V=v, replication=None, family_slices=slices, families=fams)


def readout(state: GlobalState) -> np.ndarray:
    """Linear readout from the last MLP layer, shape (n_x, n_t, n_out)."""
    p: AttnMlpParams = state.params
    h_last = _cache(state, "h_layers")[-1]
    return h_last @ p.w_out.T + p.b_out


def _unsupported(name: str):
    def op(*_args, **_kwargs):
        raise ModelError(f"{name} is not supported for the attention model: it is "
                         "non-recurrent and its lifted site propagator is not "
                         "implemented; use model_jvp_params / model_vjp_params")
    return op


step_jvp_state = _unsupported("step_jvp_state")
step_vjp_state = _unsupported("step_vjp_state")
state_jac_apply = _unsupported("state_jac_apply")
state_jac_apply_adjoint = _unsupported("state_jac_apply_adjoint")
step_jvp_params = _unsupported("step_jvp_params")
step_vjp_params = _unsupported("step_vjp_params")
site_jvp = _unsupported("site_jvp")
site_vjp = _unsupported("site_vjp")
site_jvp_step = _unsupported("site_jvp_step")
site_vjp_step = _unsupported("site_vjp_step")

common.register_kind("attn", sys.modules[__name__])
