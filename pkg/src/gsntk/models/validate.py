"""Central finite-difference validation of all hand-derived linearizations."""

from __future__ import annotations

import numpy as np

from gsntk.models import common


def _rel(fd: np.ndarray, an: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(fd)), float(np.linalg.norm(an)))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(np.asarray(fd) - np.asarray(an)) / scale)


def _unit(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v)


def fd_check(params, x, eps: float = 1e-6) -> dict:
    """Compare analytic JVPs against central finite differences.

    Returns a dict of (n_x, n_t) max-relative-error arrays keyed by derivative
    kind ("state", "params", "site" for recurrent models; "params" for the
    attention model), plus "max", the worst entry overall.
    """
    mod = common.backend(params.kind)
    state = mod.forward(params, x)
    rng = np.random.default_rng(0)
    if params.kind == "attn":
        report = {"params": _fd_attention(mod, params, state, eps, rng)}
    else:
        report = _fd_recurrent(mod, params, state, eps, rng)
    report["max"] = max(float(v.max()) for k, v in report.items())
    return report


def _fd_recurrent(mod, params, state, eps, rng) -> dict:
    n_x, n_t = state.n_x, state.n_t
    h_prev = state.caches["h_prev"]
    x = state.x_ref
    fams = mod.state_param_families(params)
    rep = mod.site_replication(params)

    err_state = np.zeros((n_x, n_t))
    err_params = np.zeros((n_x, n_t))
    err_site = np.zeros((n_x, n_t))

    dh = _unit(rng, params.n_h)
    dtheta = {f: _unit(rng, getattr(params, mod._FAMILY_FIELDS[f]).shape) for f in fams}
    dq_all = _unit(rng, len(fams) * rep) if fams else np.zeros(0)
    p_plus = mod.perturb_params(params, dtheta, eps) if fams else params
    p_minus = mod.perturb_params(params, dtheta, -eps) if fams else params

    for j in range(n_x):
        for t in range(n_t):
            hp, xt = h_prev[j, t], x[j, t]
            fd = (mod._step(params, hp + eps * dh, xt)
                  - mod._step(params, hp - eps * dh, xt)) / (2 * eps)
            err_state[j, t] = _rel(fd, mod.step_jvp_state(state, (j, t), dh))

            if fams:
                fd = (mod._step(p_plus, hp, xt) - mod._step(p_minus, hp, xt)) / (2 * eps)
                err_params[j, t] = _rel(fd, mod.step_jvp_params(state, (j, t), dtheta))

                q0 = hp @ _hidden_weight(mod, params).T
                p0 = xt @ params.w_in.T
                dq, dp = mod._site_qp(params, dq_all)
                fd = (mod._site_map(params, hp, q0 + eps * dq, p0 + eps * dp)
                      - mod._site_map(params, hp, q0 - eps * dq, p0 - eps * dp)) / (2 * eps)
                err_site[j, t] = _rel(fd, mod.site_jvp(state, (j, t), dq_all))

    return {"state": err_state, "params": err_params, "site": err_site}


def _hidden_weight(mod, params):
    return params.w_rec if params.kind == "rnn" else params.w_hid


def _fd_attention(mod, params, state, eps, rng) -> np.ndarray:
    fams = mod.state_param_families(params)
    err = np.zeros((state.n_x, state.n_t))
    shapes = {"q": params.w_q.shape, "k": params.w_k.shape, "v": params.w_v.shape,
              "o": params.w_o.shape}
    for i, w in enumerate(params.mlp_ws):
        shapes[f"mlp_{i + 1}"] = w.shape
    for _ in range(3):
        dtheta = {f: _unit(rng, shapes[f]) for f in fams}
        p_plus = mod.perturb_params(params, dtheta, eps)
        p_minus = mod.perturb_params(params, dtheta, -eps)
        fd = (mod.forward(p_plus, state.x_ref).h
              - mod.forward(p_minus, state.x_ref).h) / (2 * eps)
        an = mod.model_jvp_params(state, dtheta)
        for j in range(state.n_x):
            for t in range(state.n_t):
                err[j, t] = max(err[j, t], _rel(fd[j, t], an[j, t]))
    return err
