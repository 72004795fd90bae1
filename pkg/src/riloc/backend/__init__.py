from .factors import (
    B,
    BiasWalkFactor,
    Kind,
    L,
    P,
    PreintImuFactor,
    PriorFactor,
    RangeFactor,
    SingularGeometryError,
    V,
    VariableId,
    bias_walk_residual,
    preint_residual,
    range_residual,
)
from .graph import FactorGraph, LMResult, UnderconstrainedError, levenberg_marquardt
from .preintegration import ImuIntegrator, PreintegratedImu, preintegrate, preintegration_covariance
from .smoother import BackendConfig, BackendSolution, Keyframe, Smoother, export_solution

__all__ = [
    "B",
    "BackendConfig",
    "BackendSolution",
    "BiasWalkFactor",
    "FactorGraph",
    "ImuIntegrator",
    "Keyframe",
    "Kind",
    "L",
    "LMResult",
    "P",
    "PreintImuFactor",
    "PreintegratedImu",
    "PriorFactor",
    "RangeFactor",
    "SingularGeometryError",
    "Smoother",
    "UnderconstrainedError",
    "V",
    "VariableId",
    "bias_walk_residual",
    "export_solution",
    "levenberg_marquardt",
    "preint_residual",
    "preintegrate",
    "preintegration_covariance",
    "range_residual",
]
