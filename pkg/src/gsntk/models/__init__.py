"""Model forward passes and exact hand-derived linearizations.

Three architectures share one calling convention: ``forward`` produces an
immutable GlobalState, and all JVP/VJP operations act on that state.  Generic
functions below dispatch on the state (or parameter) kind so the operator
assembly layer never imports a concrete architecture.
"""

from __future__ import annotations

from gsntk.models import attention, common, gru, rnn
from gsntk.models.attention import AttnMlpParams
from gsntk.models.common import (
    GlobalState,
    ModelError,
    WeightSites,
    load_params,
    save_params,
    xavier_normal,
)
from gsntk.models.gru import GruParams
from gsntk.models.rnn import RnnParams
from gsntk.models.validate import fd_check


def _mod(state: GlobalState):
    return common.backend(state.kind)


def forward(params, x, h0=None) -> GlobalState:
    """Evaluate the model named by params.kind; see the architecture modules."""
    return common.backend(params.kind).forward(params, x, h0)


def step_jvp_state(state, jt, dh):
    return _mod(state).step_jvp_state(state, jt, dh)


def step_vjp_state(state, jt, u):
    return _mod(state).step_vjp_state(state, jt, u)


def step_jvp_params(state, jt, dtheta):
    return _mod(state).step_jvp_params(state, jt, dtheta)


def step_vjp_params(state, jt, u):
    return _mod(state).step_vjp_params(state, jt, u)


def site_jvp(state, jt, dq):
    return _mod(state).site_jvp(state, jt, dq)


def site_vjp(state, jt, u):
    return _mod(state).site_vjp(state, jt, u)


def weight_sites(state) -> WeightSites:
    return _mod(state).weight_sites(state)


def readout(state):
    return _mod(state).readout(state)


def state_param_families(params):
    return common.backend(params.kind).state_param_families(params)


__all__ = [
    "AttnMlpParams",
    "GlobalState",
    "GruParams",
    "ModelError",
    "RnnParams",
    "WeightSites",
    "attention",
    "fd_check",
    "forward",
    "gru",
    "load_params",
    "readout",
    "rnn",
    "save_params",
    "site_jvp",
    "site_vjp",
    "state_param_families",
    "step_jvp_params",
    "step_jvp_state",
    "step_vjp_params",
    "step_vjp_state",
    "weight_sites",
    "xavier_normal",
]
