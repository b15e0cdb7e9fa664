"""Student-teacher training with SGD or a rank-one natural-gradient corrector.

Each iteration draws a fresh batch of initial conditions, simulates both
models, and applies one optimizer step to the student. Telemetry (loss,
kernel stable rank and spectral norm, weight spectral radius) is recorded
on a fixed cadence, and spectral-radius crossings of 1 are treated as
bifurcation events: the crossing model is checkpointed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sntk.kernel import (
    DEFAULT_MAX_ELEMENTS,
    FisherOperator,
    fisher_from_model,
    fisher_matrix,
    state_jacobian_from_traj,
    summary_from_fisher,
    top_eigpair,
)
from sntk.rnn import (
    RnnModel,
    loss_and_gradient,
    save_checkpoint,
    simulate,
    spectral_radius,
)

DIVERGENCE_LIMIT = 1e10

METRICS_HEADER = (
    "iteration",
    "loss",
    "stable_rank",
    "spec_norm",
    "spectral_radius",
    "step_norm",
    "optimizer_mode_eigval",
)


class TrainingDiverged(RuntimeError):
    """Loss left the finite range; carries the records gathered so far."""

    def __init__(self, iteration: int, loss: float, records):
        super().__init__(
            f"training diverged at iteration {iteration} (loss={loss!r}); "
            f"{len(records)} metric records retained"
        )
        self.iteration = iteration
        self.loss = loss
        self.records = records


@dataclass
class TrainConfig:
    N: int = 64
    B: int = 256
    T: int = 25
    learning_rate: float = 5e-3
    iterations: int = 35000
    optimizer: str = "sgd"  # "sgd" | "natgrad"
    natgrad_epsilon: float = 1e-4
    natgrad_power_iters: int = 10
    metrics_every: int = 50
    seed: int = 0
    ic_bounds: float = 1.0
    loss_mode: str = "readout"  # "readout" | "full_state"
    fixed_dataset: bool = False
    probe_batch: int = 0  # >0: evaluate kernel metrics on a fixed probe batch
    checkpoint_every: int = 0  # >0: periodic checkpoints on top of event ones
    max_jacobian_elements: int = DEFAULT_MAX_ELEMENTS

    def __post_init__(self):
        if min(self.N, self.B, self.T, self.iterations, self.metrics_every) < 1:
            raise ValueError("N, B, T, iterations, metrics_every must be positive")
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if self.optimizer not in ("sgd", "natgrad"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_mode not in ("readout", "full_state"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if self.natgrad_epsilon < 0 or self.natgrad_power_iters < 1:
            raise ValueError("natgrad_epsilon must be >= 0, power iters >= 1")
        if not (
            np.isfinite(self.learning_rate)
            and np.isfinite(self.learning_rate * self.iterations)
        ):
            raise ValueError("learning_rate (x iterations) must be finite")
        if self.ic_bounds < 0:
            raise ValueError("ic_bounds must be >= 0")


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    loss: float
    stable_rank: float
    spec_norm: float
    spectral_radius: float
    step_norm: float
    optimizer_mode_eigval: float  # 0 under SGD or natgrad fallback


@dataclass
class TrainResult:
    model: RnnModel
    records: list[MetricsRecord]
    extras: list[dict]
    checkpoints: list[Path] = field(default_factory=list)


def sgd_step(model: RnnModel, gradient: np.ndarray, lr: float) -> RnnModel:
    """theta <- theta - lr * gradient; no momentum, no clipping."""
    gradient = np.asarray(gradient, dtype=float)
    if not np.isfinite(gradient).all():
        raise ValueError("gradient must be finite")
    return RnnModel.from_params(
        model.to_params() - lr * gradient, model.N, model.readout
    )


def natgrad_step(
    model: RnnModel,
    gradient: np.ndarray,
    lr: float,
    fisher_op,
    epsilon: float = 1e-4,
    power_iters: int = 10,
    tol: float = 1e-6,
    v_init: np.ndarray | None = None,
    seed: int = 0,
) -> tuple[RnnModel, float, np.ndarray | None]:
    """SGD with curvature-rescaled descent along the top Fisher mode.

    The top eigenpair (lam, v) of the Fisher operator is estimated
    matrix-free by power iteration (warm-started from v_init when given),
    then theta <- theta - lr * [g + (1/(lam + epsilon) - 1) (v.g) v]: plain
    SGD on the complement of v, 1/(lam + epsilon) rescaling along v. A
    degenerate (zero) Fisher falls back to plain SGD, flagged by the
    returned eigenvalue 0.
    """
    gradient = np.asarray(gradient, dtype=float)
    if not np.isfinite(gradient).all():
        raise ValueError("gradient must be finite")
    lam, v = top_eigpair(
        fisher_op, iters=power_iters, tol=tol, seed=seed, v0=v_init, warn=False
    )
    if lam <= 0.0:
        return sgd_step(model, gradient, lr), 0.0, None
    if v_init is not None and float(v @ np.asarray(v_init, dtype=float)) < 0:
        v = -v
    coeff = (1.0 / (lam + epsilon) - 1.0) * float(v @ gradient)
    step = gradient + coeff * v
    new_model = RnnModel.from_params(
        model.to_params() - lr * step, model.N, model.readout
    )
    return new_model, lam, v


def _draw_batch(rng, B, N, bound):
    return rng.uniform(-bound, bound, size=(B, N))


def train(
    config: TrainConfig,
    student: RnnModel,
    teacher: RnnModel,
    out_dir=None,
    extra_metrics=None,
) -> TrainResult:
    """Run the training loop; returns the final model plus telemetry.

    When out_dir is given, checkpoints (rnn text format, ckpt_<iter>.rnn)
    are written at spectral-radius crossings of 1, every checkpoint_every
    iterations if configured, on divergence, and at the end of the run.
    extra_metrics(model) may return a dict of additional per-record values
    (stored alongside, not inside, the records).
    """
    if student.N != teacher.N or student.N != config.N:
        raise ValueError("student, teacher, and config must agree on N")
    if student.readout != teacher.readout:
        raise ValueError("student and teacher must share readout indices")
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    rng_ic = np.random.default_rng([config.seed, 0])
    rng_probe = np.random.default_rng([config.seed, 1])
    rng_power = np.random.default_rng([config.seed, 2])

    fixed_h0 = (
        _draw_batch(rng_ic, config.B, config.N, config.ic_bounds)
        if config.fixed_dataset
        else None
    )
    probe_h0 = (
        _draw_batch(rng_probe, config.probe_batch, config.N, config.ic_bounds)
        if config.probe_batch > 0
        else None
    )

    result = TrainResult(model=student, records=[], extras=[])
    v_prev: np.ndarray | None = None
    metrics_v_prev: np.ndarray | None = None
    prev_rho: float | None = None

    def checkpoint(model, iteration):
        if out_path is None:
            return
        path = out_path / f"ckpt_{iteration}.rnn"
        save_checkpoint(model, path)
        result.checkpoints.append(path)

    for it in range(config.iterations):
        h0 = (
            fixed_h0
            if fixed_h0 is not None
            else _draw_batch(rng_ic, config.B, config.N, config.ic_bounds)
        )
        teacher_traj = simulate(teacher, h0, config.T)
        try:
            loss, grad, straj = loss_and_gradient(
                student, teacher_traj, h0, config.T, config.loss_mode
            )
        except FloatingPointError:
            checkpoint(student, it)
            raise TrainingDiverged(it, float("nan"), result.records) from None
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            checkpoint(student, it)
            raise TrainingDiverged(it, loss, result.records)

        lam = 0.0
        if config.optimizer == "sgd":
            new_model = sgd_step(student, grad, config.learning_rate)
            step_norm = config.learning_rate * float(np.linalg.norm(grad))
        else:
            fisher_op = FisherOperator(student, straj)
            v0 = v_prev
            if v0 is None:
                v0 = rng_power.standard_normal(fisher_op.dim)
            new_model, lam, v = natgrad_step(
                student,
                grad,
                config.learning_rate,
                fisher_op,
                epsilon=config.natgrad_epsilon,
                power_iters=config.natgrad_power_iters,
                v_init=v0,
            )
            if v is not None:
                v_prev = v
            step_norm = float(
                np.linalg.norm(new_model.to_params() - student.to_params())
            )

        if it % config.metrics_every == 0:
            if probe_h0 is not None:
                eval_traj = simulate(student, probe_h0, config.T)
            else:
                eval_traj = straj
            B_eval = eval_traj.states.shape[0]
            budget = config.max_jacobian_elements
            n_params = student.N * student.N + student.N
            if B_eval * config.T * student.N * n_params <= budget:
                fim = fisher_matrix(
                    state_jacobian_from_traj(student, eval_traj, budget)
                )
            else:
                fim = fisher_from_model(
                    student, eval_traj.states[:, 0], config.T, budget
                )
            summary = summary_from_fisher(fim, v0=metrics_v_prev, warn=False)
            if summary.spec_norm > 0:
                metrics_v_prev = summary.top_eigvec
            rho = spectral_radius(student)
            result.records.append(
                MetricsRecord(
                    iteration=it,
                    loss=loss,
                    stable_rank=summary.stable_rank,
                    spec_norm=summary.spec_norm,
                    spectral_radius=rho,
                    step_norm=step_norm,
                    optimizer_mode_eigval=lam,
                )
            )
            result.extras.append(
                dict(extra_metrics(student)) if extra_metrics is not None else {}
            )
            if prev_rho is not None and prev_rho < 1.0 <= rho:
                checkpoint(student, it)
            prev_rho = rho

        if config.checkpoint_every > 0 and it % config.checkpoint_every == 0:
            checkpoint(student, it)

        student = new_model

    result.model = student
    checkpoint(student, config.iterations)
    return result


def detect_bifurcation(records: list[MetricsRecord]) -> list[float]:
    """Iterations where the spectral radius crosses 1 from below.

    Crossing points are linearly interpolated between consecutive records.
    """
    if len(records) < 2:
        raise ValueError("need at least 2 records")
    crossings = []
    for prev, curr in zip(records, records[1:]):
        if prev.spectral_radius < 1.0 <= curr.spectral_radius:
            span = curr.spectral_radius - prev.spectral_radius
            frac = (1.0 - prev.spectral_radius) / span
            crossings.append(
                prev.iteration + frac * (curr.iteration - prev.iteration)
            )
    return crossings


def format_float(x: float) -> str:
    """Decimal text with 17 significant digits (CSV convention)."""
    return format(float(x), ".17g")


def write_metrics_csv(records, path, extras=None, extra_names=()) -> None:
    """Metrics CSV: fixed header, one row per record, 17-digit floats."""
    extra_names = tuple(extra_names)
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER + extra_names)
        for idx, rec in enumerate(records):
            row = [
                str(rec.iteration),
                format_float(rec.loss),
                format_float(rec.stable_rank),
                format_float(rec.spec_norm),
                format_float(rec.spectral_radius),
                format_float(rec.step_norm),
                format_float(rec.optimizer_mode_eigval),
            ]
            for name in extra_names:
                row.append(format_float(extras[idx][name]))
            writer.writerow(row)
