"""Task generators, structured initializations, and training loops.

Provides the delayed-reproduction ("memory-pro") task, a realizable
student-teacher setup for vanilla RNNs, Fourier-feature input embeddings,
weight constructions that plant prescribed fixed points into recurrent
dynamics, target-mode extraction, and gradient-descent / Kronecker-factored
preconditioned training with diagnostic logging.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from gsntk import ntkops
from gsntk.models import common, gru, rnn
from gsntk.models.common import ModelError, frozen_array, xavier_normal


class TaskError(ValueError):
    """Invalid task or training configuration."""


# ------------------------------------------------------------------ batches

@dataclass(frozen=True)
class TaskBatch:
    """Immutable inputs/targets pair with optional per-timestep loss weights."""

    inputs: np.ndarray           # (n_x, n_t, n_in)
    targets: np.ndarray          # (n_x, n_t, n_out)
    loss_weights: np.ndarray | None = None   # (n_t,), None = uniform
    angles: np.ndarray | None = None         # (n_x,), set by memory_pro_batch

    def __post_init__(self):
        inputs = frozen_array(self.inputs)
        targets = frozen_array(self.targets)
        if inputs.ndim != 3 or targets.ndim != 3:
            raise TaskError("inputs and targets must have shape (n_x, n_t, channels)")
        if inputs.shape[:2] != targets.shape[:2]:
            raise TaskError(
                f"inputs {inputs.shape} and targets {targets.shape} disagree on (n_x, n_t)")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        if self.loss_weights is not None:
            w = frozen_array(self.loss_weights)
            if w.shape != (inputs.shape[1],) or np.any(w < 0) or w.sum() <= 0:
                raise TaskError("loss_weights must be non-negative with shape (n_t,)")
            object.__setattr__(self, "loss_weights", w)
        if self.angles is not None:
            object.__setattr__(self, "angles", frozen_array(self.angles))

    @property
    def n_x(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_t(self) -> int:
        return self.inputs.shape[1]


# --------------------------------------------------- delayed-reproduction task

@dataclass(frozen=True)
class MemoryProConfig:
    """Delayed angle-reproduction task: stimulus, memory, response phases.

    Inputs carry (cos θ, sin θ) during the stimulus phase plus a fixation
    channel that drops to zero when the response is required; targets ask for
    the same (cos θ, sin θ) pair, delayed to the response phase.
    """

    n_x: int = 20
    n_t: int = 90
    phases: tuple[int, int, int] = (30, 30, 30)
    noise_var: float = 3.2
    n_h: int = 64
    seed: int = 0

    def __post_init__(self):
        if len(self.phases) != 3 or any(p <= 0 for p in self.phases):
            raise TaskError("phases must be three positive lengths")
        if sum(self.phases) != self.n_t:
            raise TaskError(
                f"phase lengths {self.phases} must sum to n_t={self.n_t}")
        if self.n_x <= 0 or self.noise_var < 0:
            raise TaskError("n_x must be positive and noise_var non-negative")


def memory_pro_batch(cfg: MemoryProConfig, noise: bool = True) -> TaskBatch:
    """Sample one batch of the delayed-reproduction task.

    Input channels: (cos θ, sin θ) during the stimulus phase (zero elsewhere)
    and fixation = 1 through stimulus+memory, 0 during response.  Target
    channels mirror them: (cos θ, sin θ) during the response phase only, and
    the fixation channel reproduces the (noiseless) fixation input.  Training
    noise N(0, noise_var) is added to the inputs when ``noise`` is set.
    """
    rng = np.random.default_rng(cfg.seed)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=cfg.n_x)
    stim, mem, resp = cfg.phases
    x = np.zeros((cfg.n_x, cfg.n_t, 3))
    y = np.zeros((cfg.n_x, cfg.n_t, 3))
    x[:, :stim, 0] = np.cos(theta)[:, None]
    x[:, :stim, 1] = np.sin(theta)[:, None]
    x[:, :stim + mem, 2] = 1.0
    y[:, stim + mem:, 0] = np.cos(theta)[:, None]
    y[:, stim + mem:, 1] = np.sin(theta)[:, None]
    y[:, :, 2] = x[:, :, 2]
    if noise and cfg.noise_var > 0:
        x = x + np.sqrt(cfg.noise_var) * rng.standard_normal(x.shape)
    return TaskBatch(inputs=x, targets=y, angles=theta)


def response_weights(cfg: MemoryProConfig) -> np.ndarray:
    """Per-timestep loss weights selecting only the response phase."""
    w = np.zeros(cfg.n_t)
    w[cfg.phases[0] + cfg.phases[1]:] = 1.0
    return w


# ------------------------------------------------------------ student-teacher

@dataclass(frozen=True)
class StudentTeacherConfig:
    """Realizable RNN student-teacher task: one weight family is re-drawn.

    The teacher is Xavier with gain 1 throughout; the student copies every
    family except ``family`` ("rec" or "in"), which is re-initialized with
    gain ``gain`` and is the only trainable family.  Inputs are i.i.d.
    standard normal, optionally restricted to an ``input_rank``-dimensional
    subspace of the input channels.
    """

    family: str = "rec"
    gain: float = 1.0
    n_in: int = 16
    n_h: int = 64
    n_out: int = 1
    n_t: int = 40
    n_x: int = 128
    input_rank: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("rec", "in"):
            raise TaskError(f"family must be 'rec' or 'in'; got {self.family!r}")
        if self.input_rank is not None and not 1 <= self.input_rank <= self.n_in:
            raise TaskError(f"input_rank must lie in [1, n_in]; got {self.input_rank}")


def student_teacher(cfg: StudentTeacherConfig):
    """Build (teacher params, student params, batch) for the student-teacher task.

    Targets are the teacher's outputs on the sampled inputs, so the task is
    exactly realizable by returning the re-drawn family to the teacher values.
    """
    rng = np.random.default_rng(cfg.seed)
    teacher = rnn.init_params(rng, cfg.n_h, cfg.n_in, cfg.n_out)
    field = rnn._FAMILY_FIELDS[cfg.family]
    shape = getattr(teacher, field).shape
    fresh = xavier_normal(rng, shape[0], shape[1], cfg.gain)
    student = dataclasses.replace(
        teacher, **{field: fresh}, trainable_mask=frozenset({cfg.family}))

    if cfg.input_rank is None:
        x = rng.standard_normal((cfg.n_x, cfg.n_t, cfg.n_in))
    else:
        basis, _ = np.linalg.qr(rng.standard_normal((cfg.n_in, cfg.input_rank)))
        coeffs = rng.standard_normal((cfg.n_x, cfg.n_t, cfg.input_rank))
        x = coeffs @ basis.T
    targets = rnn.readout(rnn.forward(teacher, x))
    return teacher, student, TaskBatch(inputs=x, targets=targets)


# ------------------------------------------------------------ input embeddings

def fourier_embed(x: np.ndarray, frequencies: int) -> np.ndarray:
    """Deterministic Fourier features of a scalar input channel.

    Maps x -> (cos(2π f x), sin(2π f x)) for f = 1..frequencies, widening the
    channel axis from 1 to 2*frequencies.  frequencies = 0 returns the input
    unchanged.
    """
    x = np.asarray(x, float)
    if x.ndim != 3 or x.shape[-1] != 1:
        raise TaskError(f"fourier_embed expects a scalar channel; got shape {x.shape}")
    if frequencies < 0:
        raise TaskError("frequencies must be non-negative")
    if frequencies == 0:
        return x.copy()
    feats = []
    for f in range(1, frequencies + 1):
        phase = 2.0 * np.pi * f * x[..., 0]
        feats.extend([np.cos(phase), np.sin(phase)])
    return np.stack(feats, axis=-1)


# -------------------------------------------------- planted fixed-point weights

def coordinate_points(n_h: int, m: int, scale: float = 6.0) -> list[np.ndarray]:
    """Scaled coordinate directions scale*e_i, whose tanh images are orthogonal."""
    if not 0 <= m <= n_h:
        raise TaskError(f"number of points must lie in [0, {n_h}]; got {m}")
    return [scale * np.eye(n_h)[i] for i in range(m)]


def ntfp_weights(rng: np.random.Generator, n_h: int, fixed_points,
                 gain: float = 1.0) -> np.ndarray:
    """Recurrent weights with prescribed fixed points of h -> W tanh(h).

    Builds W = Σ_i h̄_i σ(h̄_i)ᵀ / ||σ(h̄_i)||² plus a Xavier-gain matrix
    projected onto the orthocomplement of span{σ(h̄_i)}, so W σ(h̄_i) = h̄_i
    exactly.  The σ-images must be mutually orthogonal (checked); with no
    points the construction reduces to plain Xavier initialization.
    """
    w_rand = xavier_normal(rng, n_h, n_h, gain)
    points = [np.asarray(p, float) for p in fixed_points]
    if not points:
        return w_rand
    if any(p.shape != (n_h,) for p in points):
        raise TaskError(f"fixed points must be vectors of length {n_h}")
    images = np.stack([np.tanh(p) for p in points], axis=1)   # (n_h, m)
    norms = np.linalg.norm(images, axis=0)
    if np.any(norms < 1e-12):
        raise TaskError("a fixed point has a vanishing tanh image")
    unit = images / norms
    off_diag = unit.T @ unit - np.eye(len(points))
    if np.abs(off_diag).max() > 1e-8:
        raise TaskError("tanh images of the fixed points are not orthogonal")
    pinned = np.stack(points, axis=1) @ (images / norms ** 2).T
    complement = w_rand @ (np.eye(n_h) - unit @ unit.T)
    return pinned + complement


def sigma_inside_trajectories(w: np.ndarray, h0: np.ndarray,
                              n_steps: int) -> np.ndarray:
    """Iterate h -> W tanh(h); returns (n_steps+1, n_starts, n_h) trajectories."""
    h = np.atleast_2d(np.asarray(h0, float))
    out = np.empty((n_steps + 1,) + h.shape)
    out[0] = h
    for s in range(n_steps):
        h = np.tanh(h) @ np.asarray(w).T
        out[s + 1] = h
    return out


def ntfp_cluster_count(endpoints: np.ndarray, fixed_points,
                       threshold: float | None = None) -> int:
    """Count effective attractors among trajectory endpoints.

    Each endpoint is projected onto the planted directions and keyed by the
    sign pattern of the projections, with magnitudes below ``threshold``
    (default: a quarter of the mean planted norm) treated as zero.  With no
    planted points every endpoint shares the empty key, so the count is 1.
    """
    points = [np.asarray(p, float) for p in fixed_points]
    ends = np.atleast_2d(np.asarray(endpoints, float))
    if not points:
        return 1
    directions = np.stack([p / np.linalg.norm(p) for p in points], axis=1)
    if threshold is None:
        threshold = float(np.mean([np.linalg.norm(p) for p in points])) / 4.0
    proj = ends @ directions
    keys = {tuple(int(np.sign(v)) if abs(v) > threshold else 0 for v in row)
            for row in proj}
    return len(keys)


def cluster_endpoints(points: np.ndarray, tol: float = 1e-2):
    """Greedy clustering of endpoint vectors; returns (labels, centers)."""
    pts = np.atleast_2d(np.asarray(points, float))
    centers: list[np.ndarray] = []
    labels = np.empty(len(pts), dtype=int)
    for i, p in enumerate(pts):
        for c, center in enumerate(centers):
            if np.linalg.norm(p - center) <= tol:
                labels[i] = c
                break
        else:
            labels[i] = len(centers)
            centers.append(p)
    return labels, np.stack(centers)


def network2_gru_params(rng: np.random.Generator, n_h: int, n_in: int,
                        n_out: int, n_points: int = 5, scale: float = 0.8,
                        gain: float = 1.0) -> gru.GruParams:
    """GRU initialization with prescribed zero-input fixed points.

    Starts from a Xavier GRU and rebuilds the candidate-gate block of the
    hidden weights so that each h̄_i = scale*e_i satisfies the zero-input
    fixed-point condition tanh(r̄ ⊙ W_l h̄_i) = h̄_i exactly: column i of W_l
    is set to arctanh(scale) / (scale * r̄_i) * e_i, where r̄_i is the reset
    gate at h̄_i.  Because the update gate mixes h with the candidate, any
    state with candidate equal to itself is a fixed point regardless of the
    gate value.  Stability of the planted points is an empirical property;
    use gru_zero_input_trajectories to measure the achieved attractor count.
    """
    if not 0 < abs(scale) < 1:
        raise TaskError("scale must lie in (0, 1) so arctanh is defined")
    if not 0 <= n_points <= n_h:
        raise TaskError(f"n_points must lie in [0, {n_h}]; got {n_points}")
    base = gru.init_params(rng, n_h, n_in, n_out, gain_hid=gain, gain_in=gain)
    w_hid = np.array(base.w_hid)
    w_r = w_hid[:n_h]
    w_l = w_hid[2 * n_h:]
    for i in range(n_points):
        point = scale * np.eye(n_h)[i]
        reset_i = expit(w_r @ point)[i]
        w_l[:, i] = 0.0
        w_l[i, i] = np.arctanh(scale) / (scale * reset_i)
    w_hid[2 * n_h:] = w_l
    return dataclasses.replace(base, w_hid=w_hid)


def gru_zero_input_trajectories(params: gru.GruParams, h0: np.ndarray,
                                n_steps: int) -> np.ndarray:
    """Iterate the GRU with zero input; returns (n_steps+1, n_starts, n_h)."""
    h = np.atleast_2d(np.asarray(h0, float))
    x0 = np.zeros((h.shape[0], params.n_in))
    out = np.empty((n_steps + 1,) + h.shape)
    out[0] = h
    for s in range(n_steps):
        h = gru._step(params, h, x0)
        out[s + 1] = h
    return out


# ----------------------------------------------------------------- target modes

def target_modes(targets: np.ndarray) -> np.ndarray:
    """Orthonormal trial-time modes of the targets, ordered by singular value.

    Targets (n_x, n_t, n_out) are reshaped to (n_x*n_t, n_out) and the left
    singular vectors returned as columns of U.
    """
    y = np.asarray(targets, float)
    if y.ndim != 3:
        raise TaskError(f"targets must have shape (n_x, n_t, n_out); got {y.shape}")
    mat = y.reshape(-1, y.shape[-1])
    if np.linalg.norm(mat) < 1e-12:
        raise TaskError("targets are identically zero; no modes to extract")
    u, _, _ = np.linalg.svd(mat, full_matrices=False)
    return u


# --------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    """Knobs for train(): budget, step size, logging, and preconditioning."""

    iterations: int
    lr: float
    log_every: int = 1
    checkpoint_every: int | None = None
    n_modes: int = 0
    damping: float = 1e-4
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.iterations <= 0 or self.lr <= 0 or self.log_every <= 0:
            raise TaskError("iterations, lr, and log_every must be positive")
        if self.checkpoint_every is not None and self.checkpoint_every <= 0:
            raise TaskError("checkpoint_every must be positive when set")
        if self.damping <= 0:
            raise TaskError("damping must be positive")


@dataclass(frozen=True)
class TrainLog:
    """Training trace: losses, per-mode target alignments, and checkpoints."""

    iterations: np.ndarray                 # (n_logs,), strictly increasing
    losses: np.ndarray                     # (n_logs,), finite
    mode_alignments: np.ndarray            # (n_logs, n_modes)
    checkpoints: tuple                     # ((iteration, params), ...)
    final_params: object
    diverged: bool = False

    def __post_init__(self):
        its = frozen_array(self.iterations, dtype=np.int64)
        losses = frozen_array(self.losses)
        aligns = frozen_array(self.mode_alignments)
        if len(its) and np.any(np.diff(its) <= 0):
            raise TaskError("logged iterations must be strictly increasing")
        if not np.all(np.isfinite(losses)):
            raise TaskError("logged losses must be finite")
        object.__setattr__(self, "iterations", its)
        object.__setattr__(self, "losses", losses)
        object.__setattr__(self, "mode_alignments", aligns)


def _matrix_power_sym(m: np.ndarray, power: float) -> np.ndarray:
    values, vectors = np.linalg.eigh(m)
    values = np.clip(values, 0.0, None)
    return (vectors * values ** power) @ vectors.T


def _kfp_direction(grad: np.ndarray, stats: dict, fam: str, damping: float
                   ) -> np.ndarray:
    """Kronecker-factored preconditioned direction L^{-1/4} G R^{-1/4}.

    L and R accumulate row and column second moments of the gradient; the
    quarter-power on each side gives an inverse square root overall.
    """
    if fam not in stats:
        n, m = grad.shape
        stats[fam] = (np.zeros((n, n)), np.zeros((m, m)))
    left, right = stats[fam]
    left += grad @ grad.T
    right += grad.T @ grad
    left_pre = _matrix_power_sym(left + damping * np.eye(left.shape[0]), -0.25)
    right_pre = _matrix_power_sym(right + damping * np.eye(right.shape[0]), -0.25)
    return left_pre @ grad @ right_pre


def _loss_and_grads(params, batch: TaskBatch):
    """MSE loss and its gradient per trainable family, via the unrolled adjoint."""
    mod = common.backend(params.kind)
    state = mod.forward(params, batch.inputs)
    y = mod.readout(state)
    resid = y - batch.targets
    if batch.loss_weights is None:
        weights = np.ones((1, batch.n_t, 1))
    else:
        weights = (batch.loss_weights / batch.loss_weights.mean())[None, :, None]
    loss = float(np.mean(weights * resid ** 2))
    if not np.isfinite(loss):
        return loss, None, y

    d_y = 2.0 * weights * resid / resid.size
    grads = {}
    if "out" in params.trainable_mask:
        grads["out"] = np.einsum("xto,xth->oh", d_y, state.h)
    if mod.state_param_families(params):
        d_h = d_y @ params.w_out
        accumulated = ntkops.propagator(state).apply_adjoint(d_h)
        grads.update(mod.param_vjp_full(state, accumulated))
    return loss, grads, y


def _mode_alignments(y: np.ndarray, targets: np.ndarray, modes: np.ndarray
                     ) -> np.ndarray:
    """Per-mode alignment <u_mᵀY, u_mᵀY*> / ||u_mᵀY*||² over trial-time rows."""
    y_mat = y.reshape(-1, y.shape[-1])
    t_mat = targets.reshape(-1, targets.shape[-1])
    out = np.empty(modes.shape[1])
    for m in range(modes.shape[1]):
        proj_y = modes[:, m] @ y_mat
        proj_t = modes[:, m] @ t_mat
        denom = float(proj_t @ proj_t)
        out[m] = float(proj_y @ proj_t) / denom if denom > 1e-24 else 0.0
    return out


def train(params, batch: TaskBatch, optimizer: str, cfg: TrainConfig) -> TrainLog:
    """Train the model's trainable families on the batch; returns a TrainLog.

    optimizer "sgd" takes plain gradient steps; "kfp" preconditions each
    weight-matrix gradient by running Kronecker factors (quarter-power each
    side, damped).  Training aborts with the partial log if the loss exceeds
    the divergence threshold or becomes non-finite.
    """
    if optimizer not in ("sgd", "kfp"):
        raise TaskError(f"unknown optimizer {optimizer!r}")
    if params.kind not in ("rnn", "gru"):
        raise ModelError("training supports the recurrent models only")
    mod = common.backend(params.kind)
    fields = mod._FAMILY_FIELDS

    modes = None
    if cfg.n_modes > 0:
        modes = target_modes(batch.targets)[:, :cfg.n_modes]

    iterations, losses, aligns, checkpoints = [], [], [], []
    stats: dict = {}
    diverged = False
    for it in range(cfg.iterations):
        loss, grads, y = _loss_and_grads(params, batch)
        if not np.isfinite(loss) or loss > cfg.divergence_threshold:
            diverged = True
            break
        if it % cfg.log_every == 0:
            iterations.append(it)
            losses.append(loss)
            if modes is not None:
                aligns.append(_mode_alignments(y, batch.targets, modes))
        if cfg.checkpoint_every is not None and it % cfg.checkpoint_every == 0:
            checkpoints.append((it, params))
        updates = {}
        for fam, grad in grads.items():
            direction = (grad if optimizer == "sgd"
                         else _kfp_direction(grad, stats, fam, cfg.damping))
            updates[fields[fam]] = getattr(params, fields[fam]) - cfg.lr * direction
        params = dataclasses.replace(params, **updates)

    n_modes = modes.shape[1] if modes is not None else 0
    return TrainLog(
        iterations=np.asarray(iterations, dtype=np.int64),
        losses=np.asarray(losses, dtype=float),
        mode_alignments=(np.asarray(aligns, dtype=float) if aligns
                         else np.zeros((len(iterations), n_modes))),
        checkpoints=tuple(checkpoints),
        final_params=params,
        diverged=diverged,
    )
