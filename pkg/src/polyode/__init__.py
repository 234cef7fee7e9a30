"""Neural ODEs whose hidden state carries sliding-window Legendre memory banks."""

from .autodiff import AdamState, ModelParams, Tape, adam_step, backward, mlp_forward
from .data import Bundle, DatasetSpec, generate, read_bundle, write_bundle
from .model import (
    DivergenceError,
    PolyODEConfig,
    PolyODEState,
    TimeSeries,
    embed,
    forecast,
    integration_step,
    reverse_reconstruct,
    run_sequence,
    run_sequences,
    update_step,
)
from .odeint import (
    IntegrationStats,
    LinearField,
    MaxStepsExceeded,
    SolverConfig,
    eigen_real_parts,
    integrate,
    stiffness_ratio,
)
from .orthopoly import (
    LegTBasis,
    basis_eval,
    build_legt,
    hurwitz_zeta,
    legendre_eval,
    project_quadrature,
    reconstruct,
    theorem1_bound,
)

__version__ = "0.1.0"
