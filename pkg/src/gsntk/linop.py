"""Matrix-free linear operators on labeled tensor domains.

Operators are immutable handles exposing ``apply`` and ``apply_adjoint``
closures. Every closure must accept either a single tensor shaped like the
operator's domain or a stack of such tensors with one extra leading axis;
all combinators below preserve this batching convention, which is what makes
probe-based estimation cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

AXIS_LABELS = ("batch", "time", "feature", "site", "flat")

DEFAULT_MATERIALIZE_CAP = 4096


class ShapeError(ValueError):
    """Domain/codomain mismatch between operators or tensors."""


@dataclass(frozen=True)
class DomainShape:
    """Ordered, labeled tensor axes defining an operator's domain."""

    axes: tuple[tuple[str, int], ...]

    def __post_init__(self):
        for label, extent in self.axes:
            if label not in AXIS_LABELS:
                raise ShapeError(f"unknown axis label {label!r}")
            if not isinstance(extent, (int, np.integer)) or extent < 1:
                raise ShapeError(f"axis extent must be a positive integer, got {extent!r}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(e) for _, e in self.axes)

    @property
    def dim(self) -> int:
        return int(math.prod(self.shape))

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(l for l, _ in self.axes)

    def compatible(self, other: "DomainShape") -> bool:
        return self.dim == other.dim and self.labels == other.labels and self.shape == other.shape


def shape_of(*axes: tuple[str, int]) -> DomainShape:
    return DomainShape(tuple((l, int(e)) for l, e in axes))


def flat_shape(dim: int) -> DomainShape:
    return shape_of(("flat", dim))


@dataclass(frozen=True)
class LinOpHandle:
    """A matrix-free linear operator with an explicit adjoint.

    ``apply`` maps domain-shaped tensors to codomain-shaped tensors and
    ``apply_adjoint`` the reverse. Both must accept an optional leading
    stack axis and be free of internal mutable state.
    """

    domain: DomainShape
    codomain: DomainShape
    apply: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    apply_adjoint: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    psd_hint: bool = False

    @property
    def is_square(self) -> bool:
        return self.domain.compatible(self.codomain)


def _split_batch(x: np.ndarray, dom: DomainShape) -> tuple[np.ndarray, bool]:
    """Normalize input to (B, dim) and report whether a stack axis was present."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == dom.shape:
        return x.reshape(1, dom.dim), False
    if x.ndim == len(dom.shape) + 1 and x.shape[1:] == dom.shape:
        return x.reshape(x.shape[0], dom.dim), True
    raise ShapeError(f"input shape {x.shape} does not match domain {dom.shape} (optionally stacked)")


def _merge_batch(y2d: np.ndarray, cod: DomainShape, batched: bool) -> np.ndarray:
    if batched:
        return y2d.reshape((y2d.shape[0],) + cod.shape)
    return y2d.reshape(cod.shape)


def identity(shape: DomainShape) -> LinOpHandle:
    """The identity operator on ``shape``."""

    def _id(v):
        v = np.asarray(v, dtype=np.float64)
        return v.copy()

    return LinOpHandle(domain=shape, codomain=shape, apply=_id, apply_adjoint=_id, psd_hint=True)


def dense_wrap(m: np.ndarray, domain: DomainShape | None = None,
               codomain: DomainShape | None = None, psd_hint: bool = False) -> LinOpHandle:
    """Wrap a dense matrix as an operator acting on flattened tensors."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"dense_wrap expects a matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ValueError("dense_wrap rejects non-finite entries")
    dom = domain if domain is not None else flat_shape(m.shape[1])
    cod = codomain if codomain is not None else flat_shape(m.shape[0])
    if dom.dim != m.shape[1] or cod.dim != m.shape[0]:
        raise ShapeError(f"matrix shape {m.shape} inconsistent with domain/codomain dims "
                         f"({dom.dim}, {cod.dim})")

    def _apply(v):
        v2d, batched = _split_batch(v, dom)
        return _merge_batch(v2d @ m.T, cod, batched)

    def _adjoint(v):
        v2d, batched = _split_batch(v, cod)
        return _merge_batch(v2d @ m, dom, batched)

    return LinOpHandle(domain=dom, codomain=cod, apply=_apply, apply_adjoint=_adjoint,
                       psd_hint=psd_hint)


def compose(a: LinOpHandle, b: LinOpHandle) -> LinOpHandle:
    """The operator a after b (materializes to the matrix product A @ B)."""
    if not b.codomain.compatible(a.domain):
        raise ShapeError(f"cannot compose: inner shapes differ, "
                         f"a.domain={a.domain.axes} vs b.codomain={b.codomain.axes}")

    def _apply(v):
        return a.apply(b.apply(v))

    def _adjoint(v):
        return b.apply_adjoint(a.apply_adjoint(v))

    return LinOpHandle(domain=b.domain, codomain=a.codomain,
                       apply=_apply, apply_adjoint=_adjoint)


def compose_all(*ops: LinOpHandle) -> LinOpHandle:
    out = ops[0]
    for op in ops[1:]:
        out = compose(out, op)
    return out


def adjoint(a: LinOpHandle) -> LinOpHandle:
    """Swap apply/apply_adjoint and domain/codomain."""
    return LinOpHandle(domain=a.codomain, codomain=a.domain,
                       apply=a.apply_adjoint, apply_adjoint=a.apply,
                       psd_hint=a.psd_hint)


def op_sum(*ops: LinOpHandle) -> LinOpHandle:
    """Sum of operators on matching domains/codomains."""
    first = ops[0]
    for op in ops[1:]:
        if not (op.domain.compatible(first.domain) and op.codomain.compatible(first.codomain)):
            raise ShapeError("op_sum requires matching domains and codomains")

    def _apply(v):
        out = ops[0].apply(v)
        for op in ops[1:]:
            out = out + op.apply(v)
        return out

    def _adjoint(v):
        out = ops[0].apply_adjoint(v)
        for op in ops[1:]:
            out = out + op.apply_adjoint(v)
        return out

    return LinOpHandle(domain=first.domain, codomain=first.codomain,
                       apply=_apply, apply_adjoint=_adjoint,
                       psd_hint=all(op.psd_hint for op in ops))


def scale(a: LinOpHandle, c: float) -> LinOpHandle:
    """Scalar multiple c * a."""
    c = float(c)

    def _apply(v):
        return c * a.apply(v)

    def _adjoint(v):
        return c * a.apply_adjoint(v)

    return LinOpHandle(domain=a.domain, codomain=a.codomain,
                       apply=_apply, apply_adjoint=_adjoint,
                       psd_hint=a.psd_hint and c >= 0)


def tensor_product(a: LinOpHandle, b: LinOpHandle,
                   like: LinOpHandle | None = None) -> LinOpHandle:
    """Tensor (Kronecker) product of two operators.

    Acts on the concatenated axes (a.domain, b.domain); materializes to
    kron(A, B). When ``like`` is given, the product is re-laid-out to the
    domain/codomain of the reference operator (which must have matching
    total dimensions).
    """
    dom = DomainShape(a.domain.axes + b.domain.axes)
    cod = DomainShape(a.codomain.axes + b.codomain.axes)
    if like is not None:
        if like.domain.dim != dom.dim or like.codomain.dim != cod.dim:
            raise ShapeError(f"tensor_product like-layout mismatch: product acts on "
                             f"({dom.dim}, {cod.dim}), reference on "
                             f"({like.domain.dim}, {like.codomain.dim})")
        dom, cod = like.domain, like.codomain

    da, db = a.domain.dim, b.domain.dim
    ca, cb = a.codomain.dim, b.codomain.dim

    def _kron_apply(v2d: np.ndarray, left: LinOpHandle, right: LinOpHandle,
                    dl: int, dr: int, cl: int, cr: int) -> np.ndarray:
        # v2d: (B, dl*dr) -> (B, cl*cr), applying right on the trailing factor
        # and left on the leading factor.
        nb = v2d.shape[0]
        x = v2d.reshape((nb * dl,) + right.domain.shape)
        y = np.asarray(right.apply(x)).reshape(nb, dl, cr)
        y = np.swapaxes(y, 1, 2).reshape((nb * cr,) + left.domain.shape)
        z = np.asarray(left.apply(y)).reshape(nb, cr, cl)
        return np.swapaxes(z, 1, 2).reshape(nb, cl * cr)

    def _apply(v):
        v2d, batched = _split_batch(v, dom)
        out = _kron_apply(v2d, a, b, da, db, ca, cb)
        return _merge_batch(out, cod, batched)

    def _adjoint(v):
        v2d, batched = _split_batch(v, cod)
        out = _kron_apply(v2d, adjoint(a), adjoint(b), ca, cb, da, db)
        return _merge_batch(out, dom, batched)

    return LinOpHandle(domain=dom, codomain=cod, apply=_apply, apply_adjoint=_adjoint,
                       psd_hint=a.psd_hint and b.psd_hint)


def partial_average(op: LinOpHandle, axes: int | tuple[int, ...] | set) -> LinOpHandle:
    """Averaged partial trace of a square operator over the given axis indices.

    The reduced operator on the remaining axes is evaluated matrix-free as
    ``(1/E) * sum_j op(embed(x, j))`` over the basis of the traced axes,
    where E is the product of traced extents; averaging (rather than plain
    tracing) keeps identity operators mapping to identities.
    """
    if not op.is_square:
        raise ShapeError("partial_average requires a square operator (domain == codomain)")
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    traced = tuple(sorted(set(int(i) for i in axes)))
    nax = len(op.domain.axes)
    if any(i < 0 or i >= nax for i in traced):
        raise ShapeError(f"axis indices {traced} out of range for {nax} axes")
    kept = tuple(i for i in range(nax) if i not in traced)
    kept_axes = tuple(op.domain.axes[i] for i in kept)
    if not kept_axes:
        kept_axes = (("flat", 1),)
    red = DomainShape(kept_axes)
    extent = int(math.prod(op.domain.shape[i] for i in traced))
    full_shape = op.domain.shape

    # Axis order used internally: kept axes first, traced axes last.
    perm = kept + traced
    inv_perm = tuple(np.argsort(perm))

    def _reduced_apply(fn, v):
        v2d, batched = _split_batch(v, red)
        nb = v2d.shape[0]
        acc = np.zeros((nb, red.dim), dtype=np.float64)
        for j in range(extent):
            emb = np.zeros((nb, red.dim, extent), dtype=np.float64)
            emb[:, :, j] = v2d
            full = emb.reshape((nb,) + tuple(full_shape[i] for i in perm))
            full = np.transpose(full, (0,) + tuple(i + 1 for i in inv_perm))
            out = fn(full)
            out = np.asarray(out).reshape((nb,) + full_shape)
            out = np.transpose(out, (0,) + tuple(i + 1 for i in perm))
            acc += out.reshape(nb, red.dim, extent)[:, :, j]
        return _merge_batch(acc / extent, red, batched)

    def _apply(v):
        return _reduced_apply(op.apply, v)

    def _adjoint(v):
        return _reduced_apply(op.apply_adjoint, v)

    return LinOpHandle(domain=red, codomain=red, apply=_apply, apply_adjoint=_adjoint,
                       psd_hint=op.psd_hint)


def materialize(op: LinOpHandle, cap: int = DEFAULT_MATERIALIZE_CAP) -> np.ndarray:
    """Form the dense matrix of an operator, column by column (batched).

    Guarded by ``cap`` on the larger of the two dimensions to prevent
    accidental huge materializations.
    """
    d, c = op.domain.dim, op.codomain.dim
    if max(d, c) > cap:
        raise ShapeError(f"materialize: dimension {max(d, c)} exceeds cap {cap}")
    basis = np.eye(d).reshape((d,) + op.domain.shape)
    cols = np.asarray(op.apply(basis)).reshape(d, c)
    return cols.T.copy()
