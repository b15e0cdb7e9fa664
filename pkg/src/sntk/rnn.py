"""Autonomous tanh recurrent models: dynamics, losses, exact gradients.

The dynamics are h_{t+1} = W @ tanh(h_t) + b, with the activation inside
the linear map so that W @ tanh(x) = x pins x (and -x) as fixed points.
Parameters travel as a flat vector of length N*N + N: row-major W
followed by b.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


def num_params(N: int) -> int:
    return N * N + N


def pack_params(W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([W.ravel(), b])


def unpack_params(theta: np.ndarray, N: int) -> tuple[np.ndarray, np.ndarray]:
    if theta.shape != (num_params(N),):
        raise ValueError(f"expected parameter vector of length {num_params(N)}")
    return theta[: N * N].reshape(N, N).copy(), theta[N * N :].copy()


@dataclass
class RnnModel:
    """Recurrent weights W (N x N), bias b (N), and a two-index readout."""

    W: np.ndarray
    b: np.ndarray
    readout: tuple[int, int] = (0, 1)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        N = self.W.shape[0]
        if self.W.shape != (N, N) or self.b.shape != (N,):
            raise ValueError(f"inconsistent shapes W{self.W.shape}, b{self.b.shape}")
        i, j = self.readout
        if i == j or not (0 <= i < N and 0 <= j < N):
            raise ValueError(f"readout indices must be distinct and < {N}")
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise ValueError("model parameters must be finite")

    @property
    def N(self) -> int:
        return self.W.shape[0]

    def to_params(self) -> np.ndarray:
        return pack_params(self.W, self.b)

    @classmethod
    def from_params(cls, theta, N, readout=(0, 1)) -> "RnnModel":
        W, b = unpack_params(np.asarray(theta, dtype=float), N)
        return cls(W=W, b=b, readout=readout)


@dataclass(frozen=True)
class TrajectoryBatch:
    """Simulated states, shape (B, T, N)."""

    states: np.ndarray

    @property
    def B(self) -> int:
        return self.states.shape[0]

    @property
    def T(self) -> int:
        return self.states.shape[1]

    @property
    def N(self) -> int:
        return self.states.shape[2]


def init_xavier(N: int, seed) -> RnnModel:
    """Xavier-uniform weights and biases on [-sqrt(6/(2N)), +sqrt(6/(2N))]."""
    if N < 2:
        raise ValueError(f"need N >= 2 for a two-coordinate readout, got {N}")
    bound = np.sqrt(6.0 / (N + N))
    rng = np.random.default_rng(seed)
    W = rng.uniform(-bound, bound, size=(N, N))
    b = rng.uniform(-bound, bound, size=N)
    return RnnModel(W=W, b=b)


def plant_fixed_points(base: RnnModel, points) -> RnnModel:
    """Rebuild W so that W @ tanh(x) = x for every x in `points`.

    Because tanh is odd, each planted x brings its mirror -x along. On the
    orthogonal complement of span{tanh(x_i)} the returned W acts as the
    base W projected onto that complement; the bias is zeroed so mirrored
    fixed points coexist. With a single point this reduces to
    W = x tanh(x)^T / ||tanh(x)||^2 + W_perp.
    """
    N = base.N
    pts = [np.asarray(p, dtype=float) for p in points]
    if not pts:
        raise ValueError("need at least one fixed point")
    for p in pts:
        if p.shape != (N,):
            raise ValueError(f"fixed point shape {p.shape} does not match N={N}")
        if not np.isfinite(p).all():
            raise ValueError("fixed points must be finite")
        if np.linalg.norm(np.tanh(p)) == 0.0:
            raise ValueError("tanh of a fixed point must be nonzero")
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            for sign in (1.0, -1.0):
                if np.allclose(pts[i], sign * pts[j], rtol=0.0, atol=1e-12):
                    raise ValueError(
                        f"points {i} and {j} coincide (up to mirror symmetry)"
                    )

    X = np.column_stack(pts)  # (N, k)
    Y = np.tanh(X)
    svals = np.linalg.svd(Y, compute_uv=False)
    if len(pts) > N or svals[-1] <= 1e-12 * svals[0]:
        raise ValueError("tanh images of the fixed points are linearly dependent")
    # W Y = X on span(Y), base action on the complement.
    C = np.linalg.solve(Y.T @ Y, Y.T)  # (k, N)
    projector = Y @ C
    W = X @ C + base.W @ (np.eye(N) - projector)
    return RnnModel(W=W, b=np.zeros(N), readout=base.readout)


def simulate(model: RnnModel, h0_batch: np.ndarray, T: int) -> TrajectoryBatch:
    """Roll out h_{t+1} = W tanh(h_t) + b for T states from each row of h0_batch."""
    h0 = np.asarray(h0_batch, dtype=float)
    if h0.ndim != 2 or h0.shape[1] != model.N:
        raise ValueError(f"h0_batch must have shape (B, {model.N}), got {h0.shape}")
    if not np.isfinite(h0).all():
        raise ValueError("initial conditions must be finite")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    B = h0.shape[0]
    states = np.empty((B, T, model.N))
    states[:, 0] = h0
    for t in range(T - 1):
        states[:, t + 1] = np.tanh(states[:, t]) @ model.W.T + model.b
    return TrajectoryBatch(states=states)


def readout_loss(
    student_traj: TrajectoryBatch,
    teacher_traj: TrajectoryBatch,
    readout: tuple[int, int],
    mode: str = "readout",
) -> float:
    """MSE between student and teacher states for t >= 1.

    mode "readout" restricts to the readout coordinates; "full_state"
    averages over all N coordinates. t = 0 is excluded: initial conditions
    are shared, so that term is identically zero.
    """
    s, te = student_traj.states, teacher_traj.states
    if s.shape != te.shape:
        raise ValueError(f"trajectory shapes differ: {s.shape} vs {te.shape}")
    if s.shape[1] < 2:
        return 0.0
    if mode == "readout":
        diff = s[:, 1:, list(readout)] - te[:, 1:, list(readout)]
    elif mode == "full_state":
        diff = s[:, 1:] - te[:, 1:]
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return float(np.mean(diff * diff))


def _loss_state_gradient(student_states, teacher_states, readout, mode):
    """d(loss)/d(states): zero at t = 0, 2*diff/count elsewhere."""
    grad = np.zeros_like(student_states)
    B, T, N = student_states.shape
    if T < 2:
        return grad
    if mode == "readout":
        dims = list(readout)
    elif mode == "full_state":
        dims = list(range(N))
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    count = B * (T - 1) * len(dims)
    diff = student_states[:, 1:, dims] - teacher_states[:, 1:, dims]
    grad[:, 1:, dims] = 2.0 * diff / count
    return grad


def _backward(W, states, state_grad):
    """Reverse-accumulate d(loss)/d(W, b) from per-state loss gradients."""
    B, T, N = states.shape
    phi = np.tanh(states)
    dphi = 1.0 - phi * phi
    lam = np.empty_like(states)
    lam[:, T - 1] = state_grad[:, T - 1]
    for t in range(T - 2, -1, -1):
        lam[:, t] = state_grad[:, t] + dphi[:, t] * (lam[:, t + 1] @ W)
    if T < 2:
        return np.zeros((N, N)), np.zeros(N)
    gW = lam[:, 1:].reshape(-1, N).T @ phi[:, :-1].reshape(-1, N)
    gb = lam[:, 1:].sum(axis=(0, 1))
    return gW, gb


def loss_and_gradient(
    student: RnnModel,
    teacher_traj: TrajectoryBatch,
    h0_batch: np.ndarray,
    T: int,
    mode: str = "readout",
) -> tuple[float, np.ndarray, TrajectoryBatch]:
    """Loss, its exact parameter gradient, and the student trajectory."""
    straj = simulate(student, h0_batch, T)
    if straj.states.shape != teacher_traj.states.shape:
        raise ValueError("student and teacher trajectories must share (B, T, N)")
    loss = readout_loss(straj, teacher_traj, student.readout, mode)
    sgrad = _loss_state_gradient(
        straj.states, teacher_traj.states, student.readout, mode
    )
    gW, gb = _backward(student.W, straj.states, sgrad)
    grad = pack_params(gW, gb)
    if not np.isfinite(grad).all():
        raise FloatingPointError("non-finite gradient encountered")
    return loss, grad, straj


def bptt_gradient(
    student: RnnModel,
    teacher_traj: TrajectoryBatch,
    h0_batch: np.ndarray,
    T: int,
    mode: str = "readout",
) -> np.ndarray:
    """Exact gradient of the trajectory loss with respect to (W, b), flat."""
    _, grad, _ = loss_and_gradient(student, teacher_traj, h0_batch, T, mode)
    return grad


def spectral_radius(model: RnnModel) -> float:
    """Largest eigenvalue modulus of W."""
    return float(np.abs(np.linalg.eigvals(model.W)).max())


def eigen_moduli(model: RnnModel, k: int) -> list[float]:
    """The k largest eigenvalue moduli of W, descending."""
    if not 1 <= k <= model.N:
        raise ValueError(f"need 1 <= k <= {model.N}, got {k}")
    moduli = np.sort(np.abs(np.linalg.eigvals(model.W)))[::-1]
    return [float(x) for x in moduli[:k]]


def save_checkpoint(model: RnnModel, path) -> None:
    """Write the line-oriented text format (shortest-repr floats, exact round-trip)."""
    i, j = model.readout
    lines = [f"rnn N={model.N} readout={i},{j}"]
    for row in model.W:
        lines.append(" ".join(repr(float(x)) for x in row))
    lines.append(" ".join(repr(float(x)) for x in model.b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> RnnModel:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"empty checkpoint file: {path}")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "rnn":
        raise ValueError(f"bad checkpoint header: {lines[0]!r}")
    try:
        N = int(head[1].removeprefix("N="))
        i, j = (int(x) for x in head[2].removeprefix("readout=").split(","))
    except ValueError as exc:
        raise ValueError(f"bad checkpoint header: {lines[0]!r}") from exc
    if len(lines) != 1 + N + 1:
        raise ValueError(f"expected {N + 2} lines, found {len(lines)}")
    W = np.array([[float(x) for x in lines[1 + r].split()] for r in range(N)])
    b = np.array([float(x) for x in lines[1 + N].split()])
    return RnnModel(W=W, b=b, readout=(i, j))
