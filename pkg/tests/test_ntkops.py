import numpy as np
import pytest

from gsntk import models, ntkops
from gsntk.linop import dense_wrap, identity, materialize, shape_of, tensor_product
from gsntk.models import ModelError, attention, gru, rnn
from gsntk.ntkops import (
    ErrorSignal,
    NtkBundle,
    adjoint_state,
    core_filter_norm,
    delta_h_rank_check,
    global_ntk,
    kron_core,
    ntk_target_alignment,
    param_kernel,
    propagator,
    propagator_core,
    quadratic_form,
    spatial_view,
    state_domain,
    temporal_view,
    verify_core,
)
from gsntk.rnla import EstimatorError, ProbeConfig, topk_eigs

RNG = np.random.default_rng(77)
CFG = ProbeConfig(sketch_size=48, residual_probes=48, seed=3)


def rnn_state(n_x=3, n_t=5, n_h=4, n_in=2, seed=5, **kw):
    rng = np.random.default_rng(seed)
    p = rnn.init_params(rng, n_h=n_h, n_in=n_in, n_out=1, **kw)
    x = rng.standard_normal((n_x, n_t, n_in))
    return models.forward(p, x)


def gru_state(n_x=3, n_t=5, n_h=4, n_in=2, seed=6, **kw):
    rng = np.random.default_rng(seed)
    p = gru.init_params(rng, n_h=n_h, n_in=n_in, n_out=1, **kw)
    x = rng.standard_normal((n_x, n_t, n_in))
    return models.forward(p, x)


def dense_one_step_map(state):
    """D_h f contribution: block matrix N with N[(j,t), (j,t-1)] = J_j(t)."""
    n_x, n_t, n_h = state.h.shape
    dim = n_x * n_t * n_h
    n = np.zeros((dim, dim))
    for j in range(n_x):
        for t in range(1, n_t):
            jac = np.column_stack([
                models.step_jvp_state(state, (j, t), e) for e in np.eye(n_h)])
            r = (j * n_t + t) * n_h
            c = (j * n_t + t - 1) * n_h
            n[r:r + n_h, c:c + n_h] = jac
    return n


class TestPropagator:
    def test_no_recurrence_gives_identity(self):
        p = rnn.RnnParams(w_rec=np.zeros((3, 3)), w_in=np.eye(3), w_out=np.ones((1, 3)))
        s = models.forward(p, RNG.standard_normal((2, 4, 3)))
        np.testing.assert_allclose(materialize(propagator(s)), np.eye(24), atol=1e-15)

    @pytest.mark.parametrize("state", [rnn_state(), gru_state()])
    def test_dense_inverse_oracle(self, state):
        p_mat = materialize(propagator(state))
        n = dense_one_step_map(state)
        np.testing.assert_allclose(p_mat @ (np.eye(len(n)) - n), np.eye(len(n)),
                                   atol=1e-10)

    def test_causality(self):
        s = gru_state()
        q = np.zeros(s.h.shape)
        q[:, 3] = RNG.standard_normal((3, 4))
        out = propagator(s).apply(q)
        assert np.all(out[:, :3] == 0.0)
        assert np.any(out[:, 3:] != 0.0)

    def test_adjoint_is_anticausal(self):
        s = gru_state()
        q = np.zeros(s.h.shape)
        q[:, 2] = RNG.standard_normal((3, 4))
        out = propagator(s).apply_adjoint(q)
        assert np.all(out[:, 3:] == 0.0)

    def test_adjoint_pairing(self):
        s = rnn_state()
        p = propagator(s)
        for _ in range(5):
            u = RNG.standard_normal(s.h.shape)
            v = RNG.standard_normal(s.h.shape)
            lhs = np.vdot(p.apply(u), v)
            rhs = np.vdot(u, p.apply_adjoint(v))
            assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_rejects_attention_state(self):
        rng = np.random.default_rng(1)
        p = attention.init_params(rng, 2, 3, 4, 2, 1)
        s = models.forward(p, rng.standard_normal((2, 4, 2)))
        with pytest.raises(ModelError, match="recurrent"):
            propagator(s)


class TestParamKernel:
    def test_single_scalar_parameter_gives_rank_one(self):
        rng = np.random.default_rng(2)
        p = rnn.init_params(rng, n_h=1, n_in=1, n_out=1,
                            trainable_mask=frozenset({"rec"}))
        s = models.forward(p, rng.standard_normal((2, 4, 1)))
        k = materialize(param_kernel(s))
        sv = np.linalg.svd(k, compute_uv=False)
        assert sv[1] <= 1e-12 * sv[0]

    @pytest.mark.parametrize("state", [rnn_state(), gru_state()])
    def test_matches_explicit_jacobian_gram(self, state):
        mod = rnn if state.kind == "rnn" else gru
        fams = mod.state_param_families(state.params)
        cols = []
        for fam in fams:
            shape = getattr(state.params, mod._FAMILY_FIELDS[fam]).shape
            for idx in range(int(np.prod(shape))):
                d = np.zeros(np.prod(shape))
                d[idx] = 1.0
                cols.append(mod.param_jvp_full(state, {fam: d.reshape(shape)}).ravel())
        j_theta = np.column_stack(cols)
        np.testing.assert_allclose(materialize(param_kernel(state)),
                                   j_theta @ j_theta.T, rtol=1e-10, atol=1e-12)

    def test_freezing_shrinks_kernel_in_psd_order(self):
        s_full = rnn_state(seed=9)
        s_part = models.forward(
            rnn.RnnParams(w_rec=s_full.params.w_rec, w_in=s_full.params.w_in,
                          w_out=s_full.params.w_out,
                          trainable_mask=frozenset({"rec", "out"})),
            s_full.x_ref)
        diff = materialize(param_kernel(s_full)) - materialize(param_kernel(s_part))
        assert np.linalg.eigvalsh(diff).min() >= -1e-10

    def test_empty_mask_rejected(self):
        s = rnn_state(trainable_mask=frozenset({"out"}))
        with pytest.raises(ModelError, match="trainable"):
            param_kernel(s)


class TestKronCore:
    def test_one_hot_site_rank_is_replication(self):
        from gsntk.models.common import WeightSites
        v = np.zeros((6, 3))
        v[0, 0] = 1.0
        sites = WeightSites(V=v, replication=4, family_slices={"rec": slice(0, 3)},
                            families=("rec",))
        mat = materialize(kron_core(sites))
        sv = np.linalg.svd(mat, compute_uv=False)
        assert np.sum(sv > 1e-12) == 4

    def test_rank_bounded_by_site_columns(self):
        from gsntk.models.common import WeightSites
        rng = np.random.default_rng(4)
        v = rng.standard_normal((12, 3))
        sites = WeightSites(V=v, replication=2, family_slices={"rec": slice(0, 3)},
                            families=("rec",))
        op = kron_core(sites)
        summ, _ = topk_eigs(op, 3 * 2 + 1, CFG)
        assert summ.eigenvalues[-1] <= 1e-8 * summ.eigenvalues[0]

    def test_gru_replication(self):
        s = gru_state()
        sites = models.weight_sites(s)
        assert sites.replication == 3 * 4
        assert kron_core(sites).domain.shape == (15, 2 * 12)

    def test_per_family_blocks_match_dense_assembly(self):
        s = gru_state()
        sites = models.weight_sites(s)
        got = materialize(kron_core(sites))
        rep, k = sites.replication, sites.k
        want = np.zeros_like(got)
        for i, fam in enumerate(sites.families):
            vf = sites.V[:, sites.family_slices[fam]]
            block = np.kron(vf @ vf.T, np.eye(rep))
            # family channel i occupies the slice [i*rep, (i+1)*rep) of the
            # feature axis of the lifted (site, feature) grid
            full = np.zeros((k, len(sites.families) * rep, k, len(sites.families) * rep))
            sl = slice(i * rep, (i + 1) * rep)
            full[:, sl, :, sl] += block.reshape(k, rep, k, rep)
            want += full.reshape(got.shape)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


class TestPropagatorCore:
    def test_linear_no_recurrence_sums_channels(self):
        p = rnn.RnnParams(w_rec=np.zeros((3, 3)), w_in=np.eye(3),
                          w_out=np.ones((1, 3)), nonlinearity="identity")
        s = models.forward(p, RNG.standard_normal((2, 4, 3)))
        pc = propagator_core(s)
        dq = RNG.standard_normal((8, 6))
        out = pc.apply(dq.reshape(pc.domain.shape))
        want = (dq[:, :3] + dq[:, 3:]).reshape(2, 4, 3)
        np.testing.assert_allclose(out, want, atol=1e-14)

    def test_adjoint_pairing(self):
        s = gru_state()
        pc = propagator_core(s)
        for _ in range(5):
            u = RNG.standard_normal(pc.domain.shape)
            v = RNG.standard_normal(pc.codomain.shape)
            assert np.vdot(pc.apply(u), v) == pytest.approx(
                np.vdot(u, pc.apply_adjoint(v)), rel=1e-12)


class TestGlobalNtk:
    @pytest.mark.parametrize("state", [rnn_state(), gru_state()])
    def test_direct_equals_lifted(self, state):
        direct = materialize(global_ntk(state, "direct").ntk)
        lifted = materialize(global_ntk(state, "lifted").ntk)
        rel = np.linalg.norm(direct - lifted) / np.linalg.norm(direct)
        assert rel <= 1e-8

    @pytest.mark.parametrize("state", [rnn_state(), gru_state()])
    def test_matches_brute_force_state_jacobian_gram(self, state):
        # Columns of the full state-parameter Jacobian: propagate each one-step
        # parameter derivative through P.
        mod = rnn if state.kind == "rnn" else gru
        p = propagator(state)
        cols = []
        for fam in mod.state_param_families(state.params):
            shape = getattr(state.params, mod._FAMILY_FIELDS[fam]).shape
            eye = np.eye(int(np.prod(shape)))
            for row in eye:
                q = mod.param_jvp_full(state, {fam: row.reshape(shape)})
                cols.append(np.asarray(p.apply(q)).ravel())
        j_full = np.column_stack(cols)
        got = materialize(global_ntk(state, "direct").ntk)
        rel = np.linalg.norm(got - j_full @ j_full.T) / np.linalg.norm(got)
        assert rel <= 1e-8

    def test_psd_on_random_probes(self):
        bundle = global_ntk(gru_state(), "direct")
        for _ in range(20):
            u = RNG.standard_normal(bundle.state.h.shape)
            assert np.vdot(u, bundle.ntk.apply(u)) >= -1e-10 * np.vdot(u, u)

    def test_dead_network_has_zero_ntk(self):
        rng = np.random.default_rng(12)
        p = rnn.init_params(rng, 4, 2, 1, trainable_mask=frozenset({"rec", "out"}))
        s = models.forward(p, np.zeros((2, 4, 2)))
        bundle = global_ntk(s, "direct")
        assert np.all(materialize(bundle.ntk) == 0.0)

    def test_attention_direct_only(self):
        rng = np.random.default_rng(13)
        p = attention.init_params(rng, 2, 3, 4, 2, 1)
        s = models.forward(p, rng.standard_normal((2, 4, 2)))
        bundle = global_ntk(s, "direct")
        assert bundle.core_propagator is None
        m = materialize(bundle.ntk)
        assert np.linalg.eigvalsh(0.5 * (m + m.T)).min() >= -1e-10
        with pytest.raises(ModelError, match="direct"):
            global_ntk(s, "lifted")

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            global_ntk(rnn_state(), "sideways")


class TestReducedViews:
    def test_kronecker_ntk_views_are_exact(self):
        a = RNG.standard_normal((6, 6))
        a = a @ a.T
        op = tensor_product(
            dense_wrap(a, domain=shape_of(("batch", 2), ("time", 3)),
                       codomain=shape_of(("batch", 2), ("time", 3)), psd_hint=True),
            identity(shape_of(("feature", 4))))
        np.testing.assert_allclose(materialize(temporal_view(op)), a, atol=1e-12)
        np.testing.assert_allclose(materialize(spatial_view(op)),
                                   np.trace(a) / 6.0 * np.eye(4), atol=1e-12)

    def test_matches_dense_partial_trace(self):
        state = gru_state(n_x=2, n_t=3, n_h=3)
        ntk = global_ntk(state, "direct").ntk
        dense = materialize(ntk).reshape(2, 3, 3, 2, 3, 3)
        want_t = np.einsum("xtabsa->xtbs", dense.transpose(0, 1, 2, 3, 4, 5)
                           ).reshape(6, 6) / 3.0
        np.testing.assert_allclose(materialize(temporal_view(ntk)), want_t,
                                   rtol=1e-10, atol=1e-12)
        want_s = np.einsum("xtaxtb->ab", dense) / 6.0
        np.testing.assert_allclose(materialize(spatial_view(ntk)), want_s,
                                   rtol=1e-10, atol=1e-12)

    def test_views_are_psd(self):
        ntk = global_ntk(rnn_state(), "direct").ntk
        for view in (temporal_view(ntk), spatial_view(ntk)):
            assert np.linalg.eigvalsh(materialize(view)).min() >= -1e-10


class TestAdjointState:
    def test_identity_propagator_returns_error(self):
        p = rnn.RnnParams(w_rec=np.zeros((3, 3)), w_in=np.eye(3), w_out=np.ones((1, 3)))
        s = models.forward(p, RNG.standard_normal((2, 4, 3)))
        err = RNG.standard_normal(s.h.shape)
        np.testing.assert_allclose(adjoint_state(propagator(s), err), err, atol=1e-15)

    def test_error_at_time_zero_stays_at_time_zero(self):
        s = gru_state()
        err = np.zeros(s.h.shape)
        err[:, 0] = RNG.standard_normal((3, 4))
        adj = adjoint_state(propagator(s), err)
        assert np.all(adj[:, 1:] == 0.0)

    def test_matches_dense_transpose(self):
        s = rnn_state()
        p = propagator(s)
        err = RNG.standard_normal(s.h.shape)
        want = (materialize(p).T @ err.ravel()).reshape(err.shape)
        np.testing.assert_allclose(adjoint_state(p, err), want, rtol=1e-11, atol=1e-12)


class TestAdjointFilterIdentity:
    @pytest.mark.parametrize("state", [rnn_state(), gru_state()])
    def test_quadratic_form_equals_filtered_adjoint_norm(self, state):
        bundle = global_ntk(state, "direct")
        for _ in range(20):
            err = RNG.standard_normal(state.h.shape)
            lhs = quadratic_form(bundle.ntk, err)
            adj = adjoint_state(bundle.propagator, err)
            rhs = core_filter_norm(state, bundle.sites, adj)
            assert abs(lhs - rhs) <= 1e-8 * max(abs(lhs), abs(rhs))

    def test_zero_error(self):
        state = rnn_state()
        bundle = global_ntk(state, "direct")
        zero = np.zeros(state.h.shape)
        assert quadratic_form(bundle.ntk, zero) == 0.0
        assert core_filter_norm(state, bundle.sites, zero) == 0.0

    def test_dead_core_stalls_learning(self):
        rng = np.random.default_rng(21)
        p = rnn.init_params(rng, 4, 2, 1, trainable_mask=frozenset({"rec", "out"}))
        s = models.forward(p, np.zeros((2, 4, 2)))
        bundle = global_ntk(s, "direct")
        err = rng.standard_normal(s.h.shape)
        adj = adjoint_state(bundle.propagator, err)
        assert core_filter_norm(s, bundle.sites, adj) == 0.0
        assert quadratic_form(bundle.ntk, err) == 0.0

    def test_error_signal_wrapper(self):
        state = rnn_state()
        bundle = global_ntk(state, "direct")
        err = ErrorSignal(RNG.standard_normal(state.h.shape))
        assert quadratic_form(bundle.ntk, err) == quadratic_form(bundle.ntk, err.err)
        with pytest.raises(ValueError):
            ErrorSignal(np.array([np.inf]))


class TestVerifyCore:
    def test_self_comparison(self):
        a = dense_wrap(RNG.standard_normal((10, 10)))
        assert verify_core(a, a, CFG) <= 1e-10

    def test_known_ratio(self):
        from gsntk.linop import scale
        a = dense_wrap(RNG.standard_normal((10, 10)))
        assert verify_core(a, scale(a, 2.0), CFG) == pytest.approx(0.5, rel=1e-9)

    def test_desk_scale_probe_estimate(self):
        # too big to materialize: dim = 3 * 20 * 64
        state = gru_state(n_x=3, n_t=20, n_h=64, n_in=4, seed=30)
        direct = global_ntk(state, "direct").ntk
        lifted = global_ntk(state, "lifted").ntk
        assert verify_core(direct, lifted,
                           ProbeConfig(sketch_size=16, residual_probes=16, seed=1)) <= 1e-6

    def test_zero_reference_rejected(self):
        z = dense_wrap(np.zeros((4, 4)))
        a = dense_wrap(np.eye(4))
        with pytest.raises(EstimatorError):
            verify_core(a, z, CFG)


class TestTargetAlignment:
    def test_rank_one_perfect_alignment(self):
        u = RNG.standard_normal(9)
        u /= np.linalg.norm(u)
        op = dense_wrap(np.outer(u, u), psd_hint=True)
        assert ntk_target_alignment(op, u, CFG) == pytest.approx(1.0, rel=1e-8)

    def test_orthogonal_mode(self):
        e1, e2 = np.eye(2)
        op = dense_wrap(np.outer(e1, e1), psd_hint=True)
        assert ntk_target_alignment(op, e2, CFG) == pytest.approx(0.0, abs=1e-12)

    def test_requires_unit_mode(self):
        op = dense_wrap(np.eye(3))
        with pytest.raises(ValueError, match="unit"):
            ntk_target_alignment(op, np.full(3, 2.0), CFG)


class TestSpaceTimeBottleneck:
    def test_kronecker_rank_one_core(self):
        u = RNG.standard_normal(6)
        u /= np.linalg.norm(u)
        op = tensor_product(
            dense_wrap(np.outer(u, u), domain=shape_of(("batch", 2), ("time", 3)),
                       codomain=shape_of(("batch", 2), ("time", 3)), psd_hint=True),
            identity(shape_of(("feature", 4))))
        for _ in range(10):
            err = RNG.standard_normal((2, 3, 4))
            rank_dh, rank_t, rank_s = delta_h_rank_check(op, err)
            assert rank_dh <= 1

    def test_zero_error_rank_zero(self):
        ntk = global_ntk(rnn_state(), "direct").ntk
        rank_dh, _, _ = delta_h_rank_check(ntk, np.zeros((3, 5, 4)))
        assert rank_dh == 0

    def test_random_instances_respect_inequality(self):
        rng = np.random.default_rng(40)
        for i in range(25):
            maker = rnn_state if i % 2 == 0 else gru_state
            state = maker(n_x=2, n_t=4, n_h=3, seed=100 + i)
            ntk = global_ntk(state, "direct").ntk
            err = rng.standard_normal(state.h.shape)
            rank_dh, rank_t, rank_s = delta_h_rank_check(ntk, err)
            assert rank_dh <= min(rank_t, rank_s)


class TestDenseViews:
    def _attn_state(self, seed=7):
        rng = np.random.default_rng(seed)
        params = attention.init_params(rng, 2, 3, 4, 2, 1)
        x = rng.standard_normal((2, 4, 2))
        return attention.forward(params, x)

    def test_matches_partial_average_recurrent(self):
        for state in (rnn_state(), gru_state()):
            bundle = global_ntk(state, "direct")
            temporal, spatial = ntkops.dense_views(state, chunk=7)
            k = state.n_x * state.h.shape[1]
            t_ref = np.asarray(materialize(ntkops.temporal_view(bundle.ntk))).reshape(k, k)
            s_ref = np.asarray(materialize(ntkops.spatial_view(bundle.ntk)))
            s_ref = s_ref.reshape(spatial.shape)
            assert np.linalg.norm(temporal - t_ref) <= 1e-12 * np.linalg.norm(t_ref)
            assert np.linalg.norm(spatial - s_ref) <= 1e-12 * np.linalg.norm(s_ref)

    def test_matches_partial_average_attention(self):
        state = self._attn_state()
        bundle = global_ntk(state, "direct")
        temporal, spatial = ntkops.dense_views(state, chunk=5)
        k = temporal.shape[0]
        t_ref = np.asarray(materialize(ntkops.temporal_view(bundle.ntk))).reshape(k, k)
        s_ref = np.asarray(materialize(ntkops.spatial_view(bundle.ntk)))
        s_ref = s_ref.reshape(spatial.shape)
        assert np.linalg.norm(temporal - t_ref) <= 1e-12 * np.linalg.norm(t_ref)
        assert np.linalg.norm(spatial - s_ref) <= 1e-12 * np.linalg.norm(s_ref)

    def test_param_side_gram_shares_spectrum(self):
        state = gru_state(n_x=2, n_t=3, n_h=3)
        bundle = global_ntk(state, "direct")
        dim = state.h.size
        ntk_dense = np.asarray(materialize(bundle.ntk)).reshape(dim, dim)
        lam_ntk = np.sort(np.linalg.eigvalsh(ntk_dense))[::-1]
        gram = ntkops.param_side_gram(state, chunk=11)
        lam_gram = np.sort(np.linalg.eigvalsh(gram))[::-1]
        n = min(len(lam_ntk), len(lam_gram))
        keep = lam_ntk[:n] > 1e-10 * lam_ntk[0]
        assert np.allclose(lam_ntk[:n][keep], lam_gram[:n][keep],
                           rtol=1e-8, atol=1e-10 * lam_ntk[0])
