"""Probabilistic region-of-attraction estimation from sampled trajectories."""

from .dynamics import (
    CertificateError,
    DivergedError,
    ScalarChannel,
    StructuredNonlinearity,
    SystemDef,
    Trajectory,
    make_saturated_lqr,
    make_suboptimal_mpc,
    simulate,
)
from .converse import (
    ConverseCertificate,
    F_p,
    build_bound_spec,
    classify_batch,
    find_p_tilde,
    find_r_iota,
    make_certificate,
    membership,
)
from .basis import GramPoly, MonomialBasis, eval_Z, eval_gram, flatten_to_vec, sample_matrix_rank
from .sampling import (
    ComplexityQuote,
    DomainBox,
    DomainMismatchError,
    SamplePools,
    achieved_epsilon,
    draw_pools,
    required_samples,
)
from .scenario import GramEstimate, estimate, membership_estimate, solve_level, solve_shape
from .audit import AccuracyReport, audit, grid_export, repeat_audit, sweep_sample_sizes

__version__ = "0.1.0"
