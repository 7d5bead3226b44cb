"""Periodic score functions for attention, with gradients and analysis."""

from .scorefn import (
    ALL_KINDS,
    COS_MAX,
    DenominatorNearZero,
    JacobianMatrix,
    NonFiniteInput,
    PoleProximity,
    SIN2_MAX,
    SIN2_MAX_SHIFTED,
    SIN_MAX,
    SIN_MAX_CONSTANT,
    SIN_SOFTMAX,
    SIREN_MAX,
    SM_SOFTMAX,
    SM_TAYLOR_SOFTMAX,
    SOFTMAX,
    TAYLOR_SOFTMAX,
    ScoreError,
    ScoreEval,
    ScoreFunctionKind,
    finite_diff_jacobian,
    intermediate,
    intermediate_derivative,
    jacobian,
    kind_from_name,
    scores,
)
from .analysis import (
    CurveSeries,
    DegenerateRow,
    ExtremumInterval,
    SaturationReport,
    cosmax_extremum_interval,
    extremum_vs_m_curve,
    filter_gain,
    gradient_curve,
    prenormed_jacobian,
    prenormed_scores,
    row_normalize,
    row_normalize_jacobian,
    saturation_fraction,
    sin2max_extremum_location,
    sinmax_constant_expected_gradient,
    sinmax_constant_expected_score,
    softmax_extreme_gradient,
    submersion_curve,
)
from .autodiff import Tensor, cross_entropy, parameter
from .model import (
    AttentionConfig,
    BreakdownSignal,
    DemoConfig,
    DemoModel,
    GradientTapRecord,
    attention_forward,
    build_demo,
    export_attention,
    tap_scores,
)
from .harness import (
    AdamSpec,
    Cifar100Spec,
    GradientHistogram,
    SgdSpec,
    SyntheticSpec,
    TrainConfig,
    TrainRunLog,
    aggregate_taps,
    load_cifar100,
    make_synthetic,
    read_run_log,
    train,
    write_run_log,
)

__all__ = [name for name in dir() if not name.startswith("_")]
