"""Symbolic-numeric normal forms and KAM diagnostics for NLS on the circle.

The core algebra lives in hamcore (monomials, Hamiltonians, brackets),
nlsham builds the model Hamiltonian and its Wick blocks, birkhoff hosts
the divisor surveys and the normal-form engine, kamlab the action-angle
side, dynamics the integrators, and cli the command-line surface.
"""

from .hamcore import (
    CutoffError,
    GaussianRational,
    Hamiltonian,
    InvariantError,
    Monomial,
    State,
    canonicalize,
    evaluate,
    gradient,
    gradient_split,
    insert,
    l2_gradient,
    majorant_norm,
    poisson_bracket,
)
from .nlsham import (
    NonlinearitySpec,
    build_nls_hamiltonian,
    expand_lp_norm,
    kinetic_hamiltonian,
    newton_sum,
    overpairing_report,
    taylor_coefficients,
    wick_hamiltonian,
    wick_identity_defect,
    wick_identity_residual,
)
from .birkhoff import (
    ThresholdPolicy,
    birkhoff_normal_form,
    bnf_step,
    divisor,
    extract_integrable_part,
    pairing_class,
    smoothing_bound_report,
    split_gm,
    verify_divisor_lower_bound,
    verify_quasi_resonant_implication,
)
from .kamlab import (
    AAHamiltonian,
    FrequencyMap,
    OpeningSpec,
    SamplingConfig,
    TbrParams,
    frequency_map,
    open_sites,
    project,
    small_divisor_bad_measure,
    sparsity_functional,
    twist_margin,
)
from .dynamics import (
    Trajectory,
    action_drift,
    gauge_align,
    hamiltonian_vector_field,
    integrate,
    integrate_field,
    integrate_nls,
    invariance_experiment,
)

__version__ = "0.1.0"
