"""Numerical audits for orbits of families of Lipschitz vector fields."""

from .builtins import builtin_family, list_builtins
from .charts import (
    Chart,
    ChartBasis,
    audit_chart,
    build_chart,
    chart_map,
    fit_chart,
    select_basis,
    slice_audit,
    v_fields,
)
from .errors import (
    DegenerateBasisError,
    DegeneratePointError,
    DivergenceError,
    EvaluationError,
    ExprSyntaxError,
    IllConditionedWarning,
    OrbitlabError,
    PreconditionError,
    ScenarioError,
    ShrinkRadiusError,
    UnknownIdentifierError,
    VariableIndexError,
)
from .expr import Expression
from .fields import FieldFamily, VectorField
from .flows import ControlLaw, Trajectory, flow, integrate_subunit, quadruple_defect
from .involutivity import commutator, domain_audit, least_norm, pinv_least_norm, structure_coefficients
from .mollify import MollifiedFamily, friedrichs_residual, residual_ladder, wedge_derivative_identity_check
from .multivector import lambda_p, pointwise_rank, ranks
from .orbits import cc_distance_upper, orbit_sample, rank_constancy_audit, rank_stability_audit, single_wedge_drift
from .scenario import run_scenario

__version__ = "0.1.0"
