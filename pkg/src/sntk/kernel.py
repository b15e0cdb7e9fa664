"""Parameter-to-state Jacobians and the kernel/Fisher spectra they induce.

The Jacobian J of all trajectory states with respect to the flat
parameters is computed by forward sensitivity propagation:

    S_0 = 0,   S_{t+1} = W diag(1 - tanh^2(h_t)) S_t + D_theta f(h_t)

Rows of J are ordered lexicographically by (batch, time, state); columns
follow the pack_params layout (row-major W, then b). The state-space
kernel J J^T and the Fisher J^T J share their nonzero spectrum, so norms,
stable rank, and the top eigenpair are all evaluated on the (much
smaller) Fisher side; J J^T itself is only materialized in tests.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from sntk.rnn import RnnModel, TrajectoryBatch, num_params, pack_params, simulate

# Largest array (element count) the dense-Jacobian paths may allocate.
DEFAULT_MAX_ELEMENTS = 10**8


class MemoryBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class StateJacobian:
    """Dense Jacobian, shape (B*T*N, m) with m = N*N + N."""

    J: np.ndarray
    B: int
    T: int
    N: int
    m: int


def _check_budget(elements: int, max_elements: int, what: str) -> None:
    if elements > max_elements:
        raise MemoryBudgetExceeded(
            f"{what} needs {elements} elements (> budget {max_elements}); "
            "use the matrix-free jvp/vjp operations instead"
        )


def state_jacobian_from_traj(
    model: RnnModel,
    traj: TrajectoryBatch,
    max_elements: int = DEFAULT_MAX_ELEMENTS,
) -> StateJacobian:
    """Forward-sensitivity Jacobian of an already-simulated trajectory."""
    B, T, N = traj.states.shape
    m = num_params(N)
    _check_budget(B * T * N * m, max_elements, "dense state Jacobian")
    W = model.W
    phi = np.tanh(traj.states)
    dphi = 1.0 - phi * phi
    rows = np.arange(N)[:, None]
    w_cols = np.arange(N)[:, None] * N + np.arange(N)[None, :]
    b_cols = N * N + np.arange(N)
    J = np.zeros((B, T, N, m))
    S = np.zeros((B, N, m))
    for t in range(T - 1):
        A = W[None, :, :] * dphi[:, t][:, None, :]
        S = A @ S
        S[:, rows, w_cols] += phi[:, t][:, None, :]
        S[:, np.arange(N), b_cols] += 1.0
        J[:, t + 1] = S
    return StateJacobian(J=J.reshape(B * T * N, m), B=B, T=T, N=N, m=m)


def state_jacobian(
    model: RnnModel,
    h0_batch: np.ndarray,
    T: int,
    max_elements: int = DEFAULT_MAX_ELEMENTS,
) -> StateJacobian:
    """Exact Jacobian of simulate(model, h0_batch, T) w.r.t. the flat parameters.

    Rows with t = 0 are identically zero: initial conditions do not depend
    on the parameters.
    """
    return state_jacobian_from_traj(model, simulate(model, h0_batch, T), max_elements)


def _jvp_cached(W, phi, dphi, v):
    B, T, N = phi.shape
    V = v[: N * N].reshape(N, N)
    vb = v[N * N :]
    out = np.zeros((B, T, N))
    if T < 2:
        return out
    drive = (phi[:, :-1].reshape(-1, N) @ V.T).reshape(B, T - 1, N) + vb
    s = np.zeros((B, N))
    for t in range(T - 1):
        s = (dphi[:, t] * s) @ W.T + drive[:, t]
        out[:, t + 1] = s
    return out


def _vjp_cached(W, phi, dphi, u):
    B, T, N = phi.shape
    if T < 2:
        return np.zeros(num_params(N))
    lam = np.empty((B, T, N))
    lam[:, T - 1] = u[:, T - 1]
    for t in range(T - 2, -1, -1):
        lam[:, t] = u[:, t] + dphi[:, t] * (lam[:, t + 1] @ W)
    gW = lam[:, 1:].reshape(-1, N).T @ phi[:, :-1].reshape(-1, N)
    gb = lam[:, 1:].sum(axis=(0, 1))
    return pack_params(gW, gb)


def jvp(model: RnnModel, traj: TrajectoryBatch, v: np.ndarray) -> np.ndarray:
    """J @ v without materializing J; returns a (B, T, N) tensor."""
    v = np.asarray(v, dtype=float)
    if v.shape != (num_params(traj.N),):
        raise ValueError(f"expected parameter vector of length {num_params(traj.N)}")
    phi = np.tanh(traj.states)
    return _jvp_cached(model.W, phi, 1.0 - phi * phi, v)


def vjp(model: RnnModel, traj: TrajectoryBatch, u: np.ndarray) -> np.ndarray:
    """J^T @ u without materializing J; u has shape (B, T, N)."""
    u = np.asarray(u, dtype=float)
    if u.shape != traj.states.shape:
        raise ValueError(f"expected tensor of shape {traj.states.shape}")
    phi = np.tanh(traj.states)
    return _vjp_cached(model.W, phi, 1.0 - phi * phi, u)


class FisherOperator:
    """Matrix-free v -> J^T J v for a fixed model and trajectory batch."""

    def __init__(self, model: RnnModel, traj: TrajectoryBatch):
        self._W = model.W
        self._phi = np.tanh(traj.states)
        self._dphi = 1.0 - self._phi * self._phi
        self.dim = num_params(traj.N)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        tangent = _jvp_cached(self._W, self._phi, self._dphi, v)
        return _vjp_cached(self._W, self._phi, self._dphi, tangent)


def fisher_matrix(jacobian: StateJacobian) -> np.ndarray:
    """The Fisher information J^T J (symmetric PSD, m x m)."""
    return jacobian.J.T @ jacobian.J


def fisher_from_model(
    model: RnnModel,
    h0_batch: np.ndarray,
    T: int,
    max_elements: int = DEFAULT_MAX_ELEMENTS,
) -> np.ndarray:
    """J^T J accumulated over batch chunks when the full J exceeds the budget."""
    h0 = np.asarray(h0_batch, dtype=float)
    B = h0.shape[0]
    N = model.N
    m = num_params(N)
    _check_budget(m * m, max_elements, "Fisher matrix")
    if B * T * N * m <= max_elements:
        return fisher_matrix(state_jacobian(model, h0, T, max_elements))
    chunk = max(1, max_elements // (T * N * m))
    fim = np.zeros((m, m))
    for start in range(0, B, chunk):
        jac = state_jacobian(model, h0[start : start + chunk], T, max_elements)
        fim += fisher_matrix(jac)
    return fim


def _power_iteration(matvec, dim, iters, tol, v0=None, seed=0):
    """Power iteration on a symmetric PSD operator.

    Returns (eigenvalue, unit vector, residual, converged); converged means
    ||A v - lam v|| <= tol * lam was reached within the iteration budget.
    """
    if v0 is not None:
        v = np.asarray(v0, dtype=float)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            raise ValueError("v0 must be nonzero")
        v = v / nv
    else:
        v = np.random.default_rng(seed).standard_normal(dim)
        v /= np.linalg.norm(v)
    lam = 0.0
    resid = np.inf
    v_eval = v
    for _ in range(max(1, iters)):
        w = matvec(v)
        lam = float(v @ w)
        resid = float(np.linalg.norm(w - lam * v))
        v_eval = v
        if lam > 0.0 and resid <= tol * lam:
            return lam, v, resid, True
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            # operator annihilates the iterate: degenerate (zero on this subspace)
            return 0.0, v, 0.0, True
        v = w / norm_w
    return lam, v_eval, resid, False


def _as_operator(operator):
    if isinstance(operator, np.ndarray):
        return (lambda x: operator @ x), operator.shape[0]
    return operator.matvec, operator.dim


def _fix_sign(v: np.ndarray) -> np.ndarray:
    nz = np.nonzero(v)[0]
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def top_eigpair(
    operator,
    iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    v0: np.ndarray | None = None,
    warn: bool = True,
) -> tuple[float, np.ndarray]:
    """Top eigenpair of a symmetric PSD matrix or matrix-free operator.

    Power iteration from a seeded random unit vector (or v0). The returned
    vector is unit norm with its first nonzero component positive. Warns
    if the residual target was not reached or the operator is degenerate
    (set warn=False for telemetry loops that tolerate a loose eigenpair).
    """
    matvec, dim = _as_operator(operator)
    lam, v, resid, converged = _power_iteration(matvec, dim, iters, tol, v0, seed)
    if warn and lam == 0.0:
        warnings.warn("power iteration hit a degenerate (zero) operator")
    elif warn and not converged:
        warnings.warn(
            f"power iteration did not converge: residual {resid:.3e} "
            f"(target {tol * lam:.3e}) after {iters} iterations"
        )
    return lam, _fix_sign(v)


@dataclass(frozen=True)
class SntkSummary:
    """Norms and top eigenpair shared by the kernel J J^T and Fisher J^T J.

    frob_norm is the Frobenius norm of the Gram operator; stable_rank is
    frob_norm^2 / spec_norm^2 (0 for the zero operator); top_eigvec is the
    Fisher eigenvector (parameter space, unit norm).
    """

    frob_norm: float
    spec_norm: float
    stable_rank: float
    top_eigval: float
    top_eigvec: np.ndarray


def summary_from_fisher(
    fim: np.ndarray,
    iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    v0: np.ndarray | None = None,
    warn: bool = True,
) -> SntkSummary:
    frob = float(np.linalg.norm(fim))
    if frob == 0.0:
        e0 = np.zeros(fim.shape[0])
        e0[0] = 1.0
        return SntkSummary(0.0, 0.0, 0.0, 0.0, e0)
    lam, v = top_eigpair(fim, iters=iters, tol=tol, seed=seed, v0=v0, warn=warn)
    return SntkSummary(
        frob_norm=frob,
        spec_norm=lam,
        stable_rank=frob * frob / (lam * lam),
        top_eigval=lam,
        top_eigvec=v,
    )


def sntk_summary(
    jacobian: StateJacobian, iters: int = 100, tol: float = 1e-6, seed: int = 0
) -> SntkSummary:
    """Kernel norms, stable rank, and top Fisher eigenpair from a Jacobian."""
    return summary_from_fisher(fisher_matrix(jacobian), iters=iters, tol=tol, seed=seed)


@dataclass(frozen=True)
class DecompositionResult:
    """Split of the kernel along one unit parameter direction u.

    sntk_g_norm = ||J u||^2 is the spectral norm of the rank-one channel
    (J u)(J u)^T; residual_frob is the Frobenius norm of the complement
    channel J (I - u u^T) J^T; dominance_ratio divides sntk_g_norm by the
    spectral norm of the full kernel. The two channels sum to the kernel
    exactly by construction.
    """

    direction: np.ndarray
    sntk_g_norm: float
    residual_frob: float
    dominance_ratio: float


def decompose(
    jacobian: StateJacobian,
    direction: np.ndarray,
    iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
) -> DecompositionResult:
    """Split the kernel into a rank-one channel along `direction` and a residual."""
    u = np.asarray(direction, dtype=float)
    if u.shape != (jacobian.m,):
        raise ValueError(f"direction must have length {jacobian.m}")
    if abs(np.linalg.norm(u) - 1.0) > 1e-10:
        raise ValueError("direction must be a unit vector")
    Ju = jacobian.J @ u
    g_norm = float(Ju @ Ju)
    fim = fisher_matrix(jacobian)
    # ||J (I-uu^T) J^T||_F = ||(I-uu^T) F (I-uu^T)||_F via the Gram transpose trick
    fu = fim @ u
    quad = float(u @ fu)
    M = fim - np.outer(u, fu) - np.outer(fu, u) + quad * np.outer(u, u)
    residual_frob = float(np.linalg.norm(M))
    summary = summary_from_fisher(fim, iters=iters, tol=tol, seed=seed)
    ratio = g_norm / summary.spec_norm if summary.spec_norm > 0 else 0.0
    return DecompositionResult(
        direction=u,
        sntk_g_norm=g_norm,
        residual_frob=residual_frob,
        dominance_ratio=ratio,
    )


def _probe_point(model, theta, h0_batch, T, iters, tol, seed, max_elements):
    candidate = RnnModel.from_params(theta, model.N, model.readout)
    jac = state_jacobian(candidate, h0_batch, T, max_elements)
    if not np.isfinite(jac.J).all():
        return np.nan, np.nan
    fim = fisher_matrix(jac)
    if not np.isfinite(fim).all():
        return np.nan, np.nan
    summary = summary_from_fisher(fim, iters=iters, tol=tol, seed=seed)
    return summary.spec_norm, summary.stable_rank


def landscape_sweep(
    model: RnnModel,
    h0_batch: np.ndarray,
    T: int,
    direction: np.ndarray,
    alpha_grid,
    iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    max_elements: int = DEFAULT_MAX_ELEMENTS,
) -> list[tuple[float, float, float]]:
    """Kernel spectral norm and stable rank along theta + alpha * direction.

    Each grid point re-simulates the same initial conditions at displaced
    parameters. Points whose Jacobian leaves the finite range are recorded
    as NaN; the sweep continues.
    """
    u = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(u) - 1.0) > 1e-10:
        raise ValueError("direction must be a unit vector")
    alphas = list(alpha_grid)
    if not alphas:
        raise ValueError("alpha_grid must be non-empty")
    theta0 = model.to_params()
    rows = []
    for alpha in alphas:
        spec, rank = _probe_point(
            model, theta0 + alpha * u, h0_batch, T, iters, tol, seed, max_elements
        )
        rows.append((float(alpha), spec, rank))
    return rows


def landscape_sweep_2d(
    model: RnnModel,
    h0_batch: np.ndarray,
    T: int,
    direction_a: np.ndarray,
    direction_b: np.ndarray,
    alpha_grid,
    beta_grid,
    iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    max_elements: int = DEFAULT_MAX_ELEMENTS,
) -> list[tuple[float, float, float, float]]:
    """Two-direction variant of landscape_sweep for surface plots."""
    ua = np.asarray(direction_a, dtype=float)
    ub = np.asarray(direction_b, dtype=float)
    for u in (ua, ub):
        if abs(np.linalg.norm(u) - 1.0) > 1e-10:
            raise ValueError("directions must be unit vectors")
    theta0 = model.to_params()
    rows = []
    for alpha in alpha_grid:
        for beta in beta_grid:
            spec, rank = _probe_point(
                model,
                theta0 + alpha * ua + beta * ub,
                h0_batch,
                T,
                iters,
                tol,
                seed,
                max_elements,
            )
            rows.append((float(alpha), float(beta), spec, rank))
    return rows
