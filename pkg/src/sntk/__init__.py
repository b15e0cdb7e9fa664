"""Numerical toolkit for state-space tangent kernels of discrete-time models.

Computes the empirical state-space NTK (the Gram operator of the
parameter-to-state Jacobian) for scalar normal-form maps and tanh RNNs,
tracks its collapse and amplification near codimension-one bifurcations,
and trains student RNNs against planted-fixed-point teachers with SGD or
a rank-one natural-gradient corrector.
"""

from sntk.normal_forms import (
    NormalFormKind,
    ScalarNormalForm,
    ScalarTrajectory,
    SimulationOverflow,
    closed_form_flip_norm,
)
from sntk.rnn import RnnModel, TrajectoryBatch, init_xavier, plant_fixed_points
from sntk.kernel import (
    DecompositionResult,
    FisherOperator,
    MemoryBudgetExceeded,
    SntkSummary,
    StateJacobian,
    decompose,
    fisher_matrix,
    jvp,
    sntk_summary,
    state_jacobian,
    top_eigpair,
    vjp,
)
from sntk.training import (
    MetricsRecord,
    TrainConfig,
    TrainingDiverged,
    detect_bifurcation,
    natgrad_step,
    sgd_step,
    train,
)

__all__ = [
    "NormalFormKind",
    "ScalarNormalForm",
    "ScalarTrajectory",
    "SimulationOverflow",
    "closed_form_flip_norm",
    "RnnModel",
    "TrajectoryBatch",
    "init_xavier",
    "plant_fixed_points",
    "DecompositionResult",
    "FisherOperator",
    "MemoryBudgetExceeded",
    "SntkSummary",
    "StateJacobian",
    "decompose",
    "fisher_matrix",
    "jvp",
    "sntk_summary",
    "state_jacobian",
    "top_eigpair",
    "vjp",
    "MetricsRecord",
    "TrainConfig",
    "TrainingDiverged",
    "detect_bifurcation",
    "natgrad_step",
    "sgd_step",
    "train",
]
