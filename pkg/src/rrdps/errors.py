"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of a function."""


class PreconditionError(ValueError):
    """Arguments are individually valid but jointly violate a precondition."""


class ProtocolError(RuntimeError):
    """Messages exchanged between the parties are inconsistent."""


class RandomnessExhausted(RuntimeError):
    """A finite bit stream ran out before the caller got what it needed."""


class ConfigError(ValueError):
    """A run configuration is malformed or self-contradictory."""


class InfeasibleSecurityError(ValueError):
    """Security-analysis inputs violate a bound (Q outside [0, 1], e_bit > 1/2, ...)."""
