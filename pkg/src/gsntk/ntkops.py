"""Assembly of the global-state NTK and its structural factorizations.

For a recurrent global state S, the NTK factors as P K P*, where P propagates
state-to-state dependencies (causal, lower-triangular in time) and K is the
Gram of the immediate parameter-to-state derivatives.  K itself factors through
the weight sites: per trainable family f with site block V_f and site map G_f,

    K = sum_f G_f (V_f V_f^T x I_rep) G_f*,

which this module assembles as one lifted operator on a (site, channel) grid —
the per-family block-diagonal Gram tensored with an identity of width
``families x replication``.  The direct and lifted assemblies are two fully
independent code paths and are required to agree to near round-off.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from gsntk.linop import (
    DomainShape,
    LinOpHandle,
    ShapeError,
    adjoint,
    compose,
    compose_all,
    dense_wrap,
    identity,
    materialize,
    partial_average,
    shape_of,
    _merge_batch,
    _split_batch,
)
from gsntk.models import GlobalState, ModelError, WeightSites, common
from gsntk.rnla import EstimatorError, ProbeConfig, frobenius_norm
from gsntk.linop import op_sum, scale


@dataclass(frozen=True)
class ErrorSignal:
    """An immediate loss gradient with respect to the global state."""

    err: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.err, dtype=np.float64)
        if not np.all(np.isfinite(e)):
            raise ValueError("error signal contains non-finite entries")
        e = e.copy()
        e.flags.writeable = False
        object.__setattr__(self, "err", e)


def _err_tensor(err) -> np.ndarray:
    if isinstance(err, ErrorSignal):
        return err.err
    return np.asarray(err, dtype=np.float64)


def state_domain(state: GlobalState) -> DomainShape:
    """The labeled tensor domain of the global state S."""
    n_x, n_t, n_f = state.h.shape
    return shape_of(("batch", n_x), ("time", n_t), ("feature", n_f))


def _require_recurrent(state: GlobalState, what: str) -> None:
    if state.kind == "attn":
        raise ModelError(f"{what} requires a recurrent global state; the attention "
                         "model exposes only the direct NTK")


# ------------------------------------------------------------------ propagator

def propagator(state: GlobalState) -> LinOpHandle:
    """The causal state-to-state propagator P = (I - D_h f T)^(-1) on S.

    apply solves u(t) = q(t) + J(t) u(t-1) by forward substitution; the adjoint
    runs the time-reversed recursion and is anti-causal.
    """
    _require_recurrent(state, "propagator")
    mod = common.backend(state.kind)
    dom = state_domain(state)
    n_x, n_t, n_f = state.h.shape

    def _apply(v):
        v2d, batched = _split_batch(v, dom)
        q = v2d.reshape(-1, n_x, n_t, n_f)
        u = np.empty_like(q)
        cur = q[:, :, 0]
        u[:, :, 0] = cur
        for t in range(1, n_t):
            cur = q[:, :, t] + mod.state_jac_apply(state, t, cur)
            u[:, :, t] = cur
        return _merge_batch(u.reshape(v2d.shape), dom, batched)

    def _adjoint(v):
        v2d, batched = _split_batch(v, dom)
        q = v2d.reshape(-1, n_x, n_t, n_f)
        a = np.empty_like(q)
        cur = q[:, :, n_t - 1]
        a[:, :, n_t - 1] = cur
        for t in range(n_t - 2, -1, -1):
            cur = q[:, :, t] + mod.state_jac_apply_adjoint(state, t + 1, cur)
            a[:, :, t] = cur
        return _merge_batch(a.reshape(v2d.shape), dom, batched)

    return LinOpHandle(domain=dom, codomain=dom, apply=_apply, apply_adjoint=_adjoint)


# -------------------------------------------------------------- param kernel K

def param_kernel(state: GlobalState) -> LinOpHandle:
    """K = (D_theta f)(D_theta f)* on S, restricted to the trainable families
    entering the state.

    For recurrent models D_theta f collects the per-step parameter derivatives;
    for the attention model the full state-parameter Jacobian is used (its
    internal propagation folded in), so that P K P* with P = identity is the
    direct NTK.
    """
    mod = common.backend(state.kind)
    if not mod.state_param_families(state.params):
        raise ModelError("param_kernel: no trainable families enter the state "
                         "(empty effective trainable_mask)")
    dom = state_domain(state)
    if state.kind == "attn":
        jvp, vjp = mod.model_jvp_params, mod.model_vjp_params
    else:
        jvp, vjp = mod.param_jvp_full, mod.param_vjp_full

    def _apply(v):
        v2d, batched = _split_batch(v, dom)
        u = v2d.reshape((-1,) + dom.shape)
        out = jvp(state, vjp(state, u))
        return _merge_batch(out.reshape(v2d.shape), dom, batched)

    return LinOpHandle(domain=dom, codomain=dom, apply=_apply, apply_adjoint=_apply,
                       psd_hint=True)


# ------------------------------------------------------------- Kronecker core

def lifted_domain(sites: WeightSites) -> DomainShape:
    """Domain of the lifted core: one row per (sample, time) site, with the
    per-family replication channels concatenated along the feature axis."""
    if sites.replication is None:
        raise ModelError("lifted core requires a uniform per-family replication")
    if not sites.families:
        raise ModelError("lifted core requires at least one trainable family")
    return shape_of(("site", sites.k), ("feature", len(sites.families) * sites.replication))


def kron_core(sites: WeightSites) -> LinOpHandle:
    """The site-Gram core: block-diagonal over families, each block
    (V_f V_f^T) x I_replication acting on that family's channel slice."""
    dom = lifted_domain(sites)
    rep = sites.replication
    grams = [sites.V[:, sites.family_slices[f]] @ sites.V[:, sites.family_slices[f]].T
             for f in sites.families]

    def _apply(v):
        v2d, batched = _split_batch(v, dom)
        q = v2d.reshape(-1, sites.k, len(grams) * rep)
        out = np.empty_like(q)
        for i, g in enumerate(grams):
            sl = slice(i * rep, (i + 1) * rep)
            out[..., sl] = np.einsum("kl,blc->bkc", g, q[..., sl])
        return _merge_batch(out.reshape(v2d.shape), dom, batched)

    return LinOpHandle(domain=dom, codomain=dom, apply=_apply, apply_adjoint=_apply,
                       psd_hint=True)


def core_gram(sites: WeightSites) -> LinOpHandle:
    """The plain k x k site Gram V V^T (sum of the per-family Grams), used as a
    temporal-rank surrogate when replication is nonuniform."""
    return dense_wrap(sites.V @ sites.V.T, domain=shape_of(("site", sites.k)),
                      codomain=shape_of(("site", sites.k)), psd_hint=True)


def site_map(state: GlobalState, sites: WeightSites) -> LinOpHandle:
    """G: lifted (site, channel) perturbations -> immediate state corrections,
    applying the per-(j, t) site derivative and summing family channels."""
    _require_recurrent(state, "site_map")
    mod = common.backend(state.kind)
    dom = lifted_domain(sites)
    cod = state_domain(state)
    n_x, n_t, n_f = state.h.shape

    def _apply(v):
        v2d, batched = _split_batch(v, dom)
        q = v2d.reshape(-1, n_x, n_t, dom.shape[1])
        out = np.empty(q.shape[:3] + (n_f,))
        for t in range(n_t):
            out[:, :, t] = mod.site_jvp_step(state, t, q[:, :, t])
        return _merge_batch(out.reshape(v2d.shape[0], cod.dim), cod, batched)

    def _adjoint(v):
        v2d, batched = _split_batch(v, cod)
        u = v2d.reshape(-1, n_x, n_t, n_f)
        out = np.empty(u.shape[:3] + (dom.shape[1],))
        for t in range(n_t):
            out[:, :, t] = mod.site_vjp_step(state, t, u[:, :, t])
        return _merge_batch(out.reshape(v2d.shape[0], dom.dim), dom, batched)

    return LinOpHandle(domain=dom, codomain=cod, apply=_apply, apply_adjoint=_adjoint)


def propagator_core(state: GlobalState, sites: WeightSites | None = None) -> LinOpHandle:
    """P_core = P after the site map G: lifted perturbations to state corrections."""
    if sites is None:
        sites = common.backend(state.kind).weight_sites(state)
    return compose(propagator(state), site_map(state, sites))


# ------------------------------------------------------------------ global NTK

def _psd(op: LinOpHandle) -> LinOpHandle:
    return dataclasses.replace(op, psd_hint=True)


@dataclass(frozen=True)
class NtkBundle:
    """The assembled NTK with its factors.

    ``core_propagator`` is None for the attention model, whose lifted site
    propagator is not implemented; there ``core`` is the plain k x k site Gram.
    """

    propagator: LinOpHandle
    kernel: LinOpHandle
    ntk: LinOpHandle
    core: LinOpHandle | None
    core_propagator: LinOpHandle | None
    sites: WeightSites
    state: GlobalState
    mode: str


def global_ntk(state: GlobalState, mode: str = "direct") -> NtkBundle:
    """Assemble NTK_S = P K P* (direct) or via the lifted site core (lifted)."""
    if mode not in ("direct", "lifted"):
        raise ValueError(f"unknown NTK assembly mode {mode!r}")
    mod = common.backend(state.kind)
    sites = mod.weight_sites(state)
    if state.kind == "attn":
        if mode != "direct":
            raise ModelError("the attention model supports only the direct NTK "
                             "assembly (no lifted site propagator)")
        kernel = param_kernel(state)
        return NtkBundle(propagator=identity(state_domain(state)), kernel=kernel,
                         ntk=kernel, core=core_gram(sites), core_propagator=None,
                         sites=sites, state=state, mode=mode)

    p = propagator(state)
    kernel = param_kernel(state)
    core = kron_core(sites)
    p_core = propagator_core(state, sites)
    if mode == "direct":
        ntk = _psd(compose_all(p, kernel, adjoint(p)))
    else:
        ntk = _psd(compose_all(p_core, core, adjoint(p_core)))
    return NtkBundle(propagator=p, kernel=kernel, ntk=ntk, core=core,
                     core_propagator=p_core, sites=sites, state=state, mode=mode)


# ---------------------------------------------------------------- reduced views

def _axes_by_label(op: LinOpHandle, labels: tuple[str, ...]) -> tuple[int, ...]:
    found = tuple(i for i, (lab, _) in enumerate(op.domain.axes) if lab in labels)
    if not found:
        raise ShapeError(f"operator domain {op.domain.axes} has no axis in {labels}")
    return found

def temporal_view(ntk: LinOpHandle) -> LinOpHandle:
    """Partial average over the feature axis: a k x k operator on (batch, time)."""
    return partial_average(ntk, _axes_by_label(ntk, ("feature",)))


def spatial_view(ntk: LinOpHandle) -> LinOpHandle:
    """Partial average over the (batch, time) axes: an operator on features."""
    return partial_average(ntk, _axes_by_label(ntk, ("batch", "time")))


def _param_family_shapes(state: GlobalState) -> dict[str, tuple[int, int]]:
    mod = common.backend(state.kind)
    params = state.params
    if state.kind == "attn":
        shapes = {"q": params.w_q.shape, "k": params.w_k.shape,
                  "v": params.w_v.shape, "o": params.w_o.shape}
        for i, w in enumerate(params.mlp_ws):
            shapes[f"mlp_{i + 1}"] = w.shape
    else:
        shapes = {f: getattr(params, mod._FAMILY_FIELDS[f]).shape
                  for f in mod._FAMILY_FIELDS}
    return {f: shapes[f] for f in mod.state_param_families(params)}


def _jacobian_chunks(state: GlobalState, chunk: int):
    """Yield stacked rows of the parameter-to-state Jacobian, family by family.

    Each yielded array has shape (n_dirs, n_x, n_t, n_feat): the response of
    the full state to one-hot parameter directions (propagated through time
    for recurrent models, through the whole forward map for attention).
    """
    mod = common.backend(state.kind)
    recurrent = state.kind != "attn"
    prop = propagator(state) if recurrent else None
    for fam, (rows, cols) in _param_family_shapes(state).items():
        n_params = rows * cols
        for start in range(0, n_params, chunk):
            n = min(chunk, n_params - start)
            basis = np.zeros((n, n_params))
            basis[np.arange(n), start + np.arange(n)] = 1.0
            dirs = {fam: basis.reshape((n, rows, cols))}
            if recurrent:
                yield np.asarray(prop.apply(mod.param_jvp_full(state, dirs)))
            else:
                yield np.asarray(mod.model_jvp_params(state, dirs))


def dense_views(state: GlobalState, chunk: int = 512
                ) -> tuple[np.ndarray, np.ndarray]:
    """Dense temporal (k x k) and spatial (n_feat x n_feat) NTK views.

    Computed by accumulating outer products of parameter-Jacobian rows, which
    matches materializing temporal_view/spatial_view of global_ntk().ntk to
    round-off while avoiding the per-basis embedding loop of the partial
    average.
    """
    n_x, n_t, n_f = state.h.shape
    k = n_x * n_t
    temporal = np.zeros((k, k))
    spatial = np.zeros((n_f, n_f))
    for j in _jacobian_chunks(state, chunk):
        n = j.shape[0]
        j_time = j.transpose(1, 2, 0, 3).reshape(k, n * n_f)
        temporal += j_time @ j_time.T
        j_space = j.reshape(n * k, n_f)
        spatial += j_space.T @ j_space
    return temporal / n_f, spatial / k


def param_side_gram(state: GlobalState, chunk: int = 512) -> np.ndarray:
    """Dense parameter-side Gram J J^T sharing its nonzero spectrum with NTK_S.

    Useful for full-operator spectra when the state dimension is large but the
    trainable parameter count is moderate.
    """
    rows = [j.reshape(j.shape[0], -1) for j in _jacobian_chunks(state, chunk)]
    j_full = np.concatenate(rows, axis=0)
    return j_full @ j_full.T


# ----------------------------------------------------- adjoint state and filter

def adjoint_state(p: LinOpHandle, err) -> np.ndarray:
    """adj = P*(err): the backward-in-time accumulated error signal."""
    return np.asarray(p.apply_adjoint(_err_tensor(err)))


def quadratic_form(ntk: LinOpHandle, err) -> float:
    """<NTK err, err>, computed through the operator's own apply path."""
    e = _err_tensor(err)
    return float(np.vdot(e, ntk.apply(e)))


def core_filter_norm(state: GlobalState, sites: WeightSites, adj) -> float:
    """Squared norm of the site-filtered adjoint, sum_f |V_f^T A_f|_F^2 with
    A = G*(adj); equals <NTK err, err> for adj = P*(err).

    This path touches only the site VJP and the raw site matrix, so it is
    independent of the parameter-kernel assembly it is checked against.
    """
    _require_recurrent(state, "core_filter_norm")
    mod = common.backend(state.kind)
    adj = _err_tensor(adj)
    n_x, n_t, _ = state.h.shape
    rep = sites.replication
    lifted = np.stack([mod.site_vjp_step(state, t, adj[:, t]) for t in range(n_t)],
                      axis=1)
    lifted = lifted.reshape(n_x * n_t, len(sites.families) * rep)
    total = 0.0
    for i, fam in enumerate(sites.families):
        v_f = sites.V[:, sites.family_slices[fam]]
        a_f = lifted[:, i * rep:(i + 1) * rep]
        total += float(np.sum((v_f.T @ a_f) ** 2))
    return total


# ----------------------------------------------------------------- verification

def verify_core(a: LinOpHandle, b: LinOpHandle, cfg: ProbeConfig) -> float:
    """Probe-estimated relative operator error |a - b|_F / |b|_F."""
    if not (a.domain.compatible(b.domain) and a.codomain.compatible(b.codomain)):
        raise ShapeError("verify_core requires operators on matching shapes")
    nb = frobenius_norm(b, cfg)
    if nb == 0.0:
        raise EstimatorError("verify_core: reference operator has zero norm")
    return frobenius_norm(op_sum(a, scale(b, -1.0)), cfg) / nb


def ntk_target_alignment(ntk_temporal: LinOpHandle, mode: np.ndarray,
                         cfg: ProbeConfig) -> float:
    """Kernel-target alignment <v, A v> / |A|_F of the temporal view with a unit
    temporal target mode."""
    v = np.asarray(mode, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-8:
        raise ValueError("target mode must have unit norm")
    den = frobenius_norm(ntk_temporal, cfg)
    if den == 0.0:
        raise EstimatorError("ntk_target_alignment: zero-norm operator")
    num = float(np.vdot(v, ntk_temporal.apply(v.reshape(ntk_temporal.domain.shape))))
    return num / den


def _numerical_rank(values: np.ndarray, rel_tol: float) -> int:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0
    top = values.max(initial=0.0)
    if top <= 0.0:
        return 0
    return int(np.count_nonzero(values > rel_tol * top))


def delta_h_rank_check(ntk: LinOpHandle, err, rel_tol: float = 1e-8
                       ) -> tuple[int, int, int]:
    """Numerical ranks of the state update NTK(err) and of the two reduced views.

    Returns (rank of the update reshaped (batch*time) x feature, rank of the
    temporal view, rank of the spatial view) and raises if the update rank
    exceeds the smaller view rank — the space-time bottleneck.
    """
    e = _err_tensor(err)
    dh = np.asarray(ntk.apply(e))
    n_f = ntk.domain.shape[-1]
    sv = np.linalg.svd(dh.reshape(-1, n_f), compute_uv=False)
    rank_dh = _numerical_rank(sv, rel_tol)
    eig_t = np.linalg.eigvalsh(materialize(temporal_view(ntk)))
    eig_s = np.linalg.eigvalsh(materialize(spatial_view(ntk)))
    rank_t = _numerical_rank(np.clip(eig_t, 0.0, None), rel_tol)
    rank_s = _numerical_rank(np.clip(eig_s, 0.0, None), rel_tol)
    if rank_dh > min(rank_t, rank_s):
        raise EstimatorError(
            f"space-time bottleneck violated: rank(update) = {rank_dh} exceeds "
            f"min(temporal {rank_t}, spatial {rank_s})")
    return rank_dh, rank_t, rank_s
