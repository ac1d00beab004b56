"""Run configuration, plain-text config files and the per-second duty-cycle plan."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigError
from .photonics import ChannelModel

__all__ = [
    "RunConfig",
    "SchedulePlan",
    "schedule",
    "load_config",
    "parse_config_text",
    "published_config",
    "MODES",
    "CALIBRATION_MODES",
    "PUBLISHED_TOTAL_ROUNDS",
    "PUBLISHED_SIFTED",
    "PUBLISHED_E_BIT",
    "PUBLISHED_DURATION_S",
]

MODES = ("analytic", "montecarlo", "paper-repro")
CALIBRATION_MODES = ("measured", "ideal")

PUBLISHED_TOTAL_ROUNDS = 103_679_400
PUBLISHED_SIFTED = 675_937
PUBLISHED_E_BIT = 0.089
PUBLISHED_DURATION_S = 15_709


@dataclass
class RunConfig:
    """All knobs of a session. Field names map to kebab-case CLI flags and config keys."""

    L: int = 128
    mu: float = 0.8
    total_loss_db: float = 18.0
    excess_loss_db: float = 0.0
    efficiency: float = 1.0
    dark_rate_cps: float = 200.0
    visibility: Union[float, tuple] = 0.96
    gate_fraction: float = 1.0
    slot_ns: float = 2.0
    round_rate_hz: float = 10_000.0
    locking_window_ms: float = 340.0
    qkd_window_ms: float = 660.0
    settle_us: float = 90.0
    total_rounds: Optional[int] = None
    duration_s: Optional[float] = None
    seed: Optional[int] = None
    mode: str = "analytic"
    # measured inputs for analytic / paper-repro runs
    q: Optional[float] = None
    sifted: Optional[int] = None
    e_bit: Optional[float] = None
    # phase lock
    calibration: str = "measured"
    drift_sigma: float = 0.08
    drift_rate: float = 0.01
    lock_flux: float = 60e6
    lock_efficiency: float = 0.1
    phase_steps: int = 4
    refine_step: float = 0.02
    refine_steps: int = 5

    def __post_init__(self) -> None:
        if isinstance(self.visibility, (list, np.ndarray)):
            self.visibility = tuple(float(v) for v in self.visibility)

    def validate(self) -> "RunConfig":
        problems = []
        if int(self.L) != self.L or self.L < 2:
            problems.append(f"L must be an integer >= 2 (got {self.L})")
        if not self.mu > 0:
            problems.append(f"mu must be > 0 (got {self.mu})")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES} (got {self.mode!r})")
        if self.calibration not in CALIBRATION_MODES:
            problems.append(f"calibration must be one of {CALIBRATION_MODES} (got {self.calibration!r})")
        for name in ("total_loss_db", "excess_loss_db", "dark_rate_cps", "round_rate_hz",
                     "locking_window_ms", "qkd_window_ms", "settle_us", "drift_sigma",
                     "lock_flux", "refine_step"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0 (got {getattr(self, name)})")
        if not math.isclose(self.locking_window_ms + self.qkd_window_ms, 1000.0, abs_tol=1e-9):
            problems.append(
                f"locking_window_ms + qkd_window_ms must equal 1000 "
                f"(got {self.locking_window_ms} + {self.qkd_window_ms})"
            )
        if self.round_rate_hz > 0 and _settle_too_long(self.settle_us, self.round_rate_hz):
            problems.append(
                f"settle_us={self.settle_us} does not fit in the {1e6 / self.round_rate_hz:g} us round period"
            )
        if self.round_rate_hz > 0 and (self.settle_us * 1e-6 + self.L * self.slot_ns * 1e-9) > 1.0 / self.round_rate_hz:
            problems.append("settle time plus pulse-train duration exceeds the round period")
        if self.phase_steps < 3:
            problems.append(f"phase_steps must be >= 3 (got {self.phase_steps})")
        if not 0 < self.efficiency <= 1 or not 0 < self.lock_efficiency <= 1:
            problems.append("efficiencies must lie in (0, 1]")
        v = np.asarray(self.visibility, dtype=float)
        if np.any((v < 0) | (v > 1)):
            problems.append("visibility must lie in [0, 1]")
        if v.ndim and v.size not in (self.L - 1, self.L):
            problems.append(f"visibility table needs L-1 or L entries (got {v.size})")
        if self.total_rounds is not None and self.total_rounds < 0:
            problems.append("total_rounds must be >= 0")
        if self.duration_s is not None and self.duration_s < 0:
            problems.append("duration_s must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def channel(self) -> ChannelModel:
        return ChannelModel(
            total_loss_db=self.total_loss_db,
            excess_loss_db=self.excess_loss_db,
            efficiency=self.efficiency,
            visibility=self.visibility,
            dark_rate_cps=self.dark_rate_cps,
            slot_duration=self.slot_ns * 1e-9,
            gate_fraction=self.gate_fraction,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def resolve_rounds(self, plan: Optional["SchedulePlan"] = None) -> int:
        """Rounds to run: ``total_rounds`` if set, else ``duration_s`` worth of the schedule."""
        if self.total_rounds is not None:
            return int(self.total_rounds)
        if self.duration_s is not None:
            plan = plan or schedule(self)
            return plan.rounds_in(self.duration_s)
        raise ConfigError("set total_rounds or duration_s")


def published_config(**overrides) -> RunConfig:
    """Inputs of the published experiment, taken as measured values."""
    cfg = RunConfig(
        L=128,
        mu=0.8,
        mode="paper-repro",
        total_rounds=PUBLISHED_TOTAL_ROUNDS,
        sifted=PUBLISHED_SIFTED,
        e_bit=PUBLISHED_E_BIT,
        duration_s=PUBLISHED_DURATION_S,
    )
    return cfg.replace(**overrides) if overrides else cfg


@dataclass(frozen=True)
class SchedulePlan:
    """One simulated second: a locking window followed by a key window of round triggers.

    ``trigger_times`` are offsets within the second at which Alice's train
    is fired, i.e. each round start plus the gate settle time.
    """

    locking_s: float
    qkd_s: float
    period_s: float
    settle_s: float
    rounds_per_second: int
    trigger_times: np.ndarray = field(repr=False)

    @property
    def busy_qkd_s(self) -> float:
        return self.rounds_per_second * self.period_s

    @property
    def idle_s(self) -> float:
        return 1.0 - self.locking_s - self.busy_qkd_s

    def rounds_in(self, seconds: float) -> int:
        whole = int(math.floor(seconds))
        frac = seconds - whole
        partial = int(np.count_nonzero(self.trigger_times < frac)) if frac > 0 else 0
        return whole * self.rounds_per_second + partial

    def seconds_for(self, rounds: int) -> float:
        """Simulated wall-clock time needed for ``rounds`` rounds (whole seconds, rounded up)."""
        if self.rounds_per_second == 0:
            return math.inf if rounds else 0.0
        return float(math.ceil(rounds / self.rounds_per_second))


def _settle_too_long(settle_us: float, round_rate_hz: float) -> bool:
    # compare in microseconds; 100 * 1e-6 < 1e-4 in binary floating point
    return settle_us >= 1e6 / round_rate_hz - 1e-9


def schedule(config: RunConfig) -> SchedulePlan:
    """Per-second timing plan of the lock/key duty cycle.

    Raises:
        ConfigError: if the settle time does not fit inside a round period.
    """
    if config.round_rate_hz <= 0:
        raise ConfigError("round_rate_hz must be > 0")
    period = 1.0 / config.round_rate_hz
    settle = config.settle_us * 1e-6
    if _settle_too_long(config.settle_us, config.round_rate_hz):
        raise ConfigError(f"settle time {config.settle_us} us must be shorter than the {period * 1e6:g} us round period")
    locking = config.locking_window_ms * 1e-3
    qkd = config.qkd_window_ms * 1e-3
    # tolerance guards 0.66 * 10000 = 6599.999...
    n = int(math.floor(qkd / period + 1e-9))
    triggers = locking + np.arange(n) * period + settle
    return SchedulePlan(locking, qkd, period, settle, n, triggers)


_INT_KEYS = {"L", "total_rounds", "seed", "sifted", "phase_steps", "refine_steps"}
_STR_KEYS = {"mode", "calibration"}


def coerce_value(name: str, raw: str):
    if name not in {f.name for f in fields(RunConfig)}:
        raise ConfigError(f"unknown config key {name!r}")
    raw = raw.strip().replace("_", "") if name not in _STR_KEYS else raw.strip()
    if raw.lower() in ("none", ""):
        return None
    try:
        if name in _STR_KEYS:
            return raw
        if name == "visibility":
            parts = [float(x) for x in raw.replace(";", ",").split(",") if x.strip()]
            return parts[0] if len(parts) == 1 else tuple(parts)
        if name in _INT_KEYS:
            value = float(raw)
            if value != int(value):
                raise ValueError("not an integer")
            return int(value)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from None


def normalize_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    return "L" if key.lower() == "l" else key


def parse_config_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) on top of ``base``."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        name = normalize_key(key)
        values[name] = coerce_value(name, raw)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path: Union[str, Path], base: Optional[RunConfig] = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text, base)
