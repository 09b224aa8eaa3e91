"""Randomized matrix-free estimators: Hutch++ traces, norms, cosines, eigenpairs.

All estimators are deterministic functions of (operator, ProbeConfig): probe
matrices are derived counter-style from the seed, so identical configs give
bit-identical results regardless of how calls interleave.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gsntk.linop import LinOpHandle, ShapeError, adjoint, compose


class EstimatorError(RuntimeError):
    """Raised when an estimator cannot satisfy its accuracy contract."""


@dataclass(frozen=True)
class ProbeConfig:
    """Probe budget for randomized estimators."""

    sketch_size: int = 64
    residual_probes: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.sketch_size < 1 or self.residual_probes < 1:
            raise ValueError("sketch_size and residual_probes must be >= 1")

    def rng(self, stream: int) -> np.random.Generator:
        """Independent generator for a named probe stream."""
        return np.random.Generator(np.random.Philox(key=np.uint64(self.seed) + (np.uint64(stream) << np.uint64(32))))


@dataclass(frozen=True)
class SpectrumSummary:
    """Descending eigenvalues with cumulative-variance and rank summaries."""

    eigenvalues: np.ndarray
    cumulative_variance: np.ndarray
    effective_rank_pr: float
    effective_rank_95: int


def _square_dim(op: LinOpHandle) -> int:
    if not op.is_square:
        raise ShapeError(f"operator is not square: domain {op.domain.axes}, "
                         f"codomain {op.codomain.axes}")
    return op.domain.dim


def _apply_mat(op: LinOpHandle, m: np.ndarray) -> np.ndarray:
    """Apply op to the columns of a (d, p) matrix, returning (c, p)."""
    p = m.shape[1]
    x = m.T.reshape((p,) + op.domain.shape)
    return np.asarray(op.apply(x)).reshape(p, op.codomain.dim).T


def hutchpp_trace(op: LinOpHandle, cfg: ProbeConfig) -> float:
    """Hutch++ trace estimate; exact (to round-off) when rank <= sketch_size.

    Uses a Gaussian range sketch plus Rademacher residual probes, both drawn
    from seeded streams.
    """
    d = _square_dim(op)
    sketch = min(cfg.sketch_size, d)

    s = cfg.rng(0).standard_normal((d, sketch))
    y = _apply_mat(op, s)
    q, _ = np.linalg.qr(y)
    aq = _apply_mat(op, q)
    t_low = float(np.trace(q.T @ aq))
    if q.shape[1] >= d:
        return t_low

    g = cfg.rng(1).integers(0, 2, size=(d, cfg.residual_probes)).astype(np.float64) * 2.0 - 1.0
    g_perp = g - q @ (q.T @ g)
    ag = _apply_mat(op, g_perp)
    t_res = float(np.einsum("ij,ij->", g_perp, ag)) / cfg.residual_probes
    return t_low + t_res


def _gram_op(op: LinOpHandle) -> LinOpHandle:
    """op @ op* as a PSD square operator on op's codomain."""

    def _apply(v):
        return op.apply(op.apply_adjoint(v))

    return LinOpHandle(domain=op.codomain, codomain=op.codomain,
                       apply=_apply, apply_adjoint=_apply, psd_hint=True)


def frobenius_norm(op: LinOpHandle, cfg: ProbeConfig) -> float:
    """Estimate of sqrt(trace(op @ op*)) via Hutch++."""
    t = hutchpp_trace(_gram_op(op), cfg)
    return float(np.sqrt(max(t, 0.0)))


def op_cosine(a: LinOpHandle, b: LinOpHandle, cfg: ProbeConfig) -> float:
    """Frobenius cosine similarity trace(a b*) / (|a|_F |b|_F).

    The same probe streams are used for the cross term and both norms, so
    op_cosine(a, a) returns exactly 1.
    """
    if not (a.domain.compatible(b.domain) and a.codomain.compatible(b.codomain)):
        raise ShapeError("op_cosine requires operators on matching shapes")
    na = frobenius_norm(a, cfg)
    nb = frobenius_norm(b, cfg)
    if na == 0.0 or nb == 0.0:
        raise EstimatorError("op_cosine: zero-norm operand")
    cross = hutchpp_trace(_cross_op(a, b), cfg)
    return float(np.clip(cross / (na * nb), -1.0, 1.0))


def _cross_op(a: LinOpHandle, b: LinOpHandle) -> LinOpHandle:
    """a @ b* on the shared codomain; trace gives the Frobenius inner product."""
    c = compose(a, adjoint(b))

    def _apply(v):
        # symmetrized so the Hutch++ sketch captures the dominant shared range
        return 0.5 * (c.apply(v) + c.apply_adjoint(v))

    return LinOpHandle(domain=c.domain, codomain=c.codomain,
                       apply=_apply, apply_adjoint=_apply)


def spectrum_summary(eigenvalues: np.ndarray) -> SpectrumSummary:
    """Build cumulative-variance and effective-rank summaries from a spectrum."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    lam = np.sort(lam)[::-1].copy()
    top = lam[0] if lam.size else 0.0
    if lam.size and np.any(lam < -1e-8 * max(abs(top), 1e-300)):
        raise EstimatorError("spectrum_summary: significantly negative eigenvalue in "
                             "a supposedly PSD spectrum")
    lam_pos = np.clip(lam, 0.0, None)
    total = float(lam_pos.sum())
    if total <= 0.0:
        cum = np.zeros_like(lam_pos)
        return SpectrumSummary(lam, cum, 0.0, 0)
    cum = np.cumsum(lam_pos) / total
    pr = float(total ** 2 / np.sum(lam_pos ** 2))
    var95 = int(np.searchsorted(cum, 0.95 - 1e-12) + 1)
    return SpectrumSummary(lam, cum, pr, var95)


def effective_rank(spectrum: np.ndarray, method: str = "participation_ratio") -> float:
    """Scalar rank summary of a non-negative spectrum.

    participation_ratio: (sum l)^2 / sum l^2; variance_95: smallest mode count
    reaching 95% cumulative variance.
    """
    summ = spectrum_summary(np.asarray(spectrum, dtype=np.float64))
    if method == "participation_ratio":
        return summ.effective_rank_pr
    if method == "variance_95":
        return float(summ.effective_rank_95)
    raise ValueError(f"unknown effective-rank method {method!r}")


def topk_eigs(op: LinOpHandle, k: int, cfg: ProbeConfig,
              max_iter: int = 300, tol: float = 1e-6) -> tuple[SpectrumSummary, np.ndarray]:
    """Top-k eigenpairs of a symmetric PSD operator by blocked subspace iteration.

    Returns (summary over the k Ritz values, eigenvector matrix of shape (dim, k)).
    Residuals |op v - lambda v| are driven below tol * lambda_1; failure to
    converge raises instead of returning a silent result.
    """
    d = _square_dim(op)
    if not op.psd_hint:
        raise EstimatorError("topk_eigs requires an operator with psd_hint")
    if k < 1 or k > d:
        raise ValueError(f"k={k} out of range for dimension {d}")

    block = min(d, 2 * k + 10)
    q, _ = np.linalg.qr(cfg.rng(2).standard_normal((d, block)))
    lam = np.zeros(k)
    vecs = None
    for _ in range(max_iter):
        y = _apply_mat(op, q)
        m = q.T @ y
        m = 0.5 * (m + m.T)
        ritz, u = np.linalg.eigh(m)
        order = np.argsort(ritz)[::-1]
        ritz, u = ritz[order], u[:, order]
        lam1 = max(ritz[0], 0.0)
        if ritz[-1] < -1e-8 * max(lam1, 1e-300):
            raise EstimatorError(f"topk_eigs: negative Rayleigh quotient {ritz[-1]:.3e} "
                                 "detected; operator is not PSD")
        vecs = q @ u[:, :k]
        lam = ritz[:k]
        resid = y @ u[:, :k] - vecs * lam[np.newaxis, :]
        if np.all(np.linalg.norm(resid, axis=0) <= tol * max(lam1, 1e-300)):
            return spectrum_summary(lam), vecs
        q, _ = np.linalg.qr(y)
    raise EstimatorError(f"topk_eigs failed to converge in {max_iter} iterations "
                         f"(last residuals {np.linalg.norm(resid, axis=0)})")
