"""Round-robin differential phase-shift QKD: protocol simulation and key-rate analysis."""
from .config import RunConfig, published_config, schedule
from .errors import (
    ConfigError,
    DomainError,
    InfeasibleSecurityError,
    PreconditionError,
    ProtocolError,
    RandomnessExhausted,
)
from .security import (
    RateBreakdown,
    SecurityParams,
    binary_entropy,
    final_key_length,
    key_rate,
    phase_error_bound,
    poisson_pmf,
    poisson_tail,
    privacy_amplification_cost,
    select_threshold,
)
from .session import SessionReport, emit_report, run_analytic, run_montecarlo

__version__ = "0.1.0"
