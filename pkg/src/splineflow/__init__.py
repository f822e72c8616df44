"""Normalizing flows with monotonic rational-quadratic spline transforms."""
from .errors import (
    ConfigError,
    GraphError,
    InvalidParameter,
    NumericalError,
    ParseError,
    ShapeError,
    SplineFlowError,
)
from .rq_spline import (
    ParamVector,
    RQSpline,
    SplineEval,
    parameterize,
    spline_derivative,
    spline_forward,
    spline_inverse,
    spline_param_gradients,
)
from .transforms import (
    AutoregressiveLayer,
    CouplingLayer,
    Flow,
    FlowSpec,
    LULinear,
    build_flow,
    load_flow,
    save_flow,
)
from .training import TrainConfig, train

__version__ = "0.1.0"
