"""Matrix-free operator toolkit for the empirical global-state NTK."""

__version__ = "0.1.0"

from gsntk.linop import (
    DomainShape,
    LinOpHandle,
    identity,
    dense_wrap,
    compose,
    adjoint,
    op_sum,
    scale,
    tensor_product,
    partial_average,
    materialize,
)
from gsntk.rnla import (
    ProbeConfig,
    SpectrumSummary,
    hutchpp_trace,
    frobenius_norm,
    op_cosine,
    topk_eigs,
    effective_rank,
)

__all__ = [
    "DomainShape",
    "LinOpHandle",
    "identity",
    "dense_wrap",
    "compose",
    "adjoint",
    "op_sum",
    "scale",
    "tensor_product",
    "partial_average",
    "materialize",
    "ProbeConfig",
    "SpectrumSummary",
    "hutchpp_trace",
    "frobenius_norm",
    "op_cosine",
    "topk_eigs",
    "effective_rank",
]
