"""End-to-end sessions: analytic evaluation, Monte Carlo simulation and report files."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import BinaryIO, Optional, Sequence, Union

import numpy as np

from . import codec
from .config import RunConfig, SchedulePlan, schedule
from .errors import ConfigError, InfeasibleSecurityError
from .phaselock import CalibrationTable, DriftModel, PhaseDrift, calibrate_all
from .photonics import (
    analytic_gain_and_error,
    apply_loss,
    build_train,
    extract_valid,
    first_valid_clicks,
    interferometer_output,
    interferometer_output_batch,
    per_delay_gain_and_error,
    sample_click_matrix,
    sample_clicks,
)
from .protocol import Alice, Bob, BitStream, SessionLedger, SiftedRecord, draw_delays
from .security import SecurityParams, final_key_length, key_rate

__all__ = [
    "SCHEMA_VERSION",
    "SessionReport",
    "run_analytic",
    "run_montecarlo",
    "run_reference",
    "report_from_ledger",
    "emit_report",
    "read_summary",
    "sweep",
    "SWEEPABLE",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"

# cap on doubles per batch of the (rounds, 2, 2L-1) detector array
_BATCH_ELEMENTS = 1 << 21


@dataclass
class SessionReport:
    mode: str
    L: int
    mu: float
    rounds_sent: int
    sifted: int
    errors: int
    Q: float
    e_bit: float
    n_th: int
    q_nth: float
    qh_pa: float
    ec_cost: float
    rate_per_round: float
    final_key_length: int
    key_rate_bps: float
    duration_s: float
    insecure: bool
    sifted_per_delay: list = field(default_factory=list)
    errors_per_delay: list = field(default_factory=list)
    e_bit_per_delay: list = field(default_factory=list)
    seed: Optional[int] = None
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SessionReport":
        known = {f.name for f in fields(cls)}
        missing = known - set(data) - {"seed", "schema_version"}
        if missing:
            raise ValueError(f"summary is missing fields: {sorted(missing)}")
        if data.get("schema_version", SCHEMA_VERSION).split(".")[0] != SCHEMA_VERSION.split(".")[0]:
            raise ValueError(f"unsupported schema version {data['schema_version']!r}")
        return cls(**{k: v for k, v in data.items() if k in known})

    def summary_lines(self) -> list[str]:
        return [
            f"mode               {self.mode}",
            f"total rounds       {self.rounds_sent:,}",
            f"sifted key         {self.sifted:,}",
            f"Q                  {self.Q:.6g}",
            f"nu (mu)            {self.mu:g}",
            f"e_bit              {self.e_bit:.4%}",
            f"L                  {self.L}",
            f"n_th               {self.n_th}",
            f"QH_PA              {self.qh_pa:.6g}",
            f"rate per round     {self.rate_per_round:.6g}" + ("  (INSECURE)" if self.insecure else ""),
            f"final key length   {self.final_key_length:,}",
            f"duration           {self.duration_s:g} s",
            f"key rate           {self.key_rate_bps:.4g} bps",
        ]


def _security_params(L: int, mu: float, Q: float, e_bit: float) -> SecurityParams:
    try:
        return SecurityParams(L=L, mu=mu, Q=Q, e_bit=e_bit)
    except InfeasibleSecurityError as exc:
        raise InfeasibleSecurityError(f"infeasible security parameters: {exc}") from None


def _assemble(
    config: RunConfig,
    plan: SchedulePlan,
    rounds: int,
    sifted: int,
    errors: int,
    Q: float,
    e_bit: float,
    sifted_per_delay: Sequence[int],
    errors_per_delay: Sequence[int],
    e_bit_per_delay: Sequence[float],
) -> SessionReport:
    params = _security_params(config.L, config.mu, Q, e_bit)
    rate = key_rate(params, trains_per_second=plan.rounds_per_second)
    final = final_key_length(rate.rate_per_round, rounds)
    if config.duration_s is not None and config.mode != "montecarlo":
        duration = float(config.duration_s)
    elif plan.rounds_per_second:
        duration = rounds / plan.rounds_per_second
    else:
        duration = 0.0
    return SessionReport(
        mode=config.mode,
        L=config.L,
        mu=config.mu,
        rounds_sent=rounds,
        sifted=sifted,
        errors=errors,
        Q=Q,
        e_bit=e_bit,
        n_th=rate.n_th,
        q_nth=rate.q_nth,
        qh_pa=rate.h_pa,
        ec_cost=rate.ec_cost,
        rate_per_round=rate.rate_per_round,
        final_key_length=final,
        key_rate_bps=final / duration if duration > 0 else 0.0,
        duration_s=duration,
        insecure=rate.insecure,
        sifted_per_delay=[int(x) for x in sifted_per_delay],
        errors_per_delay=[int(x) for x in errors_per_delay],
        e_bit_per_delay=[float(x) for x in e_bit_per_delay],
        seed=config.seed,
    )


def run_analytic(config: RunConfig) -> SessionReport:
    """Key rate from measured (Q, e_bit) or from the closed-form channel model.

    If the config carries ``sifted`` (or ``q``) and ``e_bit`` those are used
    directly, as for reproducing a published run. Otherwise the gain and
    error rate follow from the channel model assuming perfect phase lock.

    Raises:
        InfeasibleSecurityError: if Q or e_bit fall outside their bounds.
    """
    config.validate()
    plan = schedule(config)
    rounds = config.resolve_rounds(plan)
    L = config.L
    zeros = [0] * L
    if config.sifted is not None or config.q is not None:
        if config.e_bit is None:
            raise ConfigError("measured mode needs e_bit alongside q or sifted")
        if config.sifted is not None:
            if rounds <= 0:
                raise ConfigError("sifted count given but no rounds")
            Q = config.sifted / rounds
            sifted = int(config.sifted)
        else:
            Q = float(config.q)
            sifted = int(round(Q * rounds))
        e_bit = float(config.e_bit)
        per_delay_e = [0.0] * L
    elif config.mode == "paper-repro":
        raise ConfigError("paper-repro mode needs measured q (or sifted) and e_bit")
    else:
        channel = config.channel()
        Q, e_bit = analytic_gain_and_error(L, config.mu, channel)
        q_d, err_d = per_delay_gain_and_error(L, config.mu, channel)
        ratio = np.divide(err_d, q_d, out=np.zeros_like(q_d), where=q_d > 0)
        per_delay_e = [0.0] + ratio.tolist()
        sifted = int(round(Q * rounds))
    errors = int(round(e_bit * sifted))
    return _assemble(config, plan, rounds, sifted, errors, Q, e_bit, zeros, zeros, per_delay_e)


def report_from_ledger(config: RunConfig, ledger: SessionLedger, plan: Optional[SchedulePlan] = None) -> SessionReport:
    plan = plan or schedule(config)
    return _assemble(
        config,
        plan,
        ledger.rounds_sent,
        ledger.total_sifted,
        ledger.total_errors,
        ledger.gain,
        ledger.error_rate,
        ledger.sifted,
        ledger.errors,
        ledger.error_rates(),
    )


def _streams(seed: int, second: int) -> list[np.random.Generator]:
    ss = np.random.SeedSequence(seed, spawn_key=(second,))
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def run_montecarlo(
    config: RunConfig,
    dump: Optional[BinaryIO] = None,
    table: Optional[CalibrationTable] = None,
) -> SessionReport:
    """Simulate every round of a session, second by second.

    Each simulated second starts with a locking window that recalibrates all
    delays, followed by the key window's round triggers. Randomness for
    second ``k`` comes from streams derived from ``(seed, k)``, so a run is
    reproduced exactly from its seed. Sifted records are written to ``dump`` in the
    binary framing of :mod:`rrdps.codec` when given.
    """
    config.validate()
    if config.seed is None:
        raise ConfigError("montecarlo mode requires a seed")
    plan = schedule(config)
    rounds = config.resolve_rounds(plan)
    L = config.L
    channel = config.channel()
    vis = channel.visibility_table(L)
    m = config.mu / L * channel.transmittance
    drift = PhaseDrift(
        DriftModel(config.drift_sigma, config.drift_rate),
        L,
        np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2**32 - 1,))),
    )
    table = table if table is not None else CalibrationTable(L)
    ledger = SessionLedger(L)
    batch = max(1, _BATCH_ELEMENTS // (2 * (2 * L - 1)))

    done = 0
    second = 0
    while done < rounds and plan.rounds_per_second > 0:
        alice_rng, bob_rng, chan_rng, cal_rng = _streams(config.seed, second)
        calibrate_all(
            table, drift, float(second), cal_rng,
            window=plan.locking_s, flux=config.lock_flux, efficiency=config.lock_efficiency,
            visibility=vis, n_steps=config.phase_steps, refine_step=config.refine_step,
            refine_n=config.refine_steps, ideal=config.calibration == "ideal",
        )
        n_this = min(plan.rounds_per_second, rounds - done)
        for start in range(0, n_this, batch):
            n = min(batch, n_this - start)
            t = second + plan.trigger_times[start : start + n]
            w = drift.advance(t)
            bits = alice_rng.integers(0, 2, size=(n, L), dtype=np.uint8)
            c, d = draw_delays(L, n, bob_rng)
            delta = drift.phase(d, w, t) - table.phases[d]
            out = interferometer_output_batch(
                np.full((n, L), m), np.pi * bits, d, vis[d], delta
            )
            clicks = sample_click_matrix(out, d, L, channel.dark_mean, channel.efficiency, chan_rng)
            valid, slot, det = first_valid_clicks(clicks, d, L, chan_rng)
            rows = np.flatnonzero(valid)
            dv, sv = d[rows], slot[rows]
            lo, hi = sv - dv, sv
            alice_bit = bits[rows, lo] ^ bits[rows, hi]
            bob_bit = det[rows]
            ledger.update_batch(dv, alice_bit, bob_bit)
            ledger.add_rounds(n)
            if dump is not None:
                base = done + start
                for k in range(rows.size):
                    i, j = (lo[k], hi[k]) if c[rows[k]] == 0 else (hi[k], lo[k])
                    rec = SiftedRecord(int(base + rows[k]), int(i), int(j), int(alice_bit[k]), int(bob_bit[k]), int(dv[k]))
                    dump.write(codec.encode_sifted(rec))
        done += n_this
        second += 1
        if second % 600 == 0:
            log.info("simulated %d s, %d/%d rounds", second, done, rounds)
    return report_from_ledger(config, ledger, plan)


def run_reference(
    config: RunConfig,
    n_rounds: int,
    seed: int,
    delta: float = 0.0,
    clicks_out: Optional[BinaryIO] = None,
) -> tuple[SessionLedger, list[SiftedRecord]]:
    """Round-by-round pipeline through the Alice/Bob state machines.

    Slow but literal: every round builds a train, passes it through the
    channel and interferometer, samples clicks and runs the announcement and
    sifting exchange. Uses a fixed residual phase ``delta`` instead of the
    drift/lock loop. Meant for small runs and for cross-checking
    :func:`run_montecarlo`.
    """
    config.validate()
    L = config.L
    channel = config.channel()
    vis = channel.visibility_table(L)
    ss = np.random.SeedSequence(seed)
    a_rng, b_rng, c_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    alice = Alice(L, BitStream(rng=a_rng))
    bob = Bob(L, BitStream(rng=b_rng))
    ledger = SessionLedger(L)
    records = []
    for _ in range(n_rounds):
        train_record = alice.prepare()
        rid = train_record.round_id
        choice = bob.choose(rid)
        optical = apply_loss(build_train(train_record, config.mu), channel.transmittance)
        d0, d1 = interferometer_output(optical, choice.d, float(vis[choice.d]), delta)
        clicks = sample_clicks(d0, d1, channel.dark_rate_cps * channel.gate_fraction,
                               channel.efficiency, channel.slot_duration, c_rng, round_id=rid)
        if clicks_out is not None:
            clicks_out.write(codec.encode_clicks(rid, list(clicks.clicks)))
        ledger.add_rounds(1)
        ann = bob.detect(rid, extract_valid(clicks, choice.d, L, c_rng))
        if ann is not None:
            rec = bob.record(ann, alice.sift(ann))
            ledger.update(rec)
            records.append(rec)
        alice.forget(rid)
    return ledger, records


def emit_report(
    report: SessionReport,
    outdir: Union[str, Path],
    stem: str = "session",
    figures: bool = True,
) -> dict[str, Path]:
    """Write the JSON summary, the per-delay CSV table and (optionally) a figure.

    Returns:
        Mapping of artefact kind to the path written.
    """
    outdir = Path(outdir)
    paths = {
        "summary": outdir / f"{stem}_summary.json",
        "table": outdir / f"{stem}_per_delay.csv",
    }
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        paths["summary"].write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        with paths["table"].open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["d", "sifted", "errors", "e_bit"])
            L = report.L
            sp = report.sifted_per_delay or [0] * L
            ep = report.errors_per_delay or [0] * L
            eb = report.e_bit_per_delay or [0.0] * L
            for d in range(1, L):
                writer.writerow([d, sp[d], ep[d], repr(float(eb[d]))])
    except OSError as exc:
        raise OSError(f"could not write report to {outdir}: {exc}") from exc
    if figures:
        from .plotting import plot_error_by_delay

        paths["figure"] = plot_error_by_delay(report, outdir / f"{stem}_e_bit_per_delay.png")
    return paths


def read_summary(path: Union[str, Path]) -> SessionReport:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"could not read summary {path}: {exc}") from exc
    return SessionReport.from_dict(data)


SWEEPABLE = (
    "L", "mu", "total_loss_db", "excess_loss_db", "dark_rate_cps",
    "visibility", "efficiency", "e_bit", "q",
)


def sweep(config: RunConfig, param: str, values: Sequence[float]) -> list[dict]:
    """Analytic key rate as one parameter varies; infeasible points are kept and flagged."""
    if param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}; choose one of {', '.join(SWEEPABLE)}")
    if config.total_rounds is None and config.duration_s is None:
        config = config.replace(duration_s=1.0)
    rows = []
    for value in values:
        v = int(round(value)) if param == "L" else float(value)
        row = {"param": param, "value": v}
        try:
            rep = run_analytic(config.replace(**{param: v}))
        except InfeasibleSecurityError as exc:
            row.update(Q=float("nan"), e_bit=float("nan"), n_th=0, qh_pa=float("nan"),
                       rate_per_round=float("nan"), rate_bps=float("nan"), final_key_length=0,
                       insecure=True, note=str(exc))
        else:
            rps = schedule(config).rounds_per_second
            row.update(Q=rep.Q, e_bit=rep.e_bit, n_th=rep.n_th, qh_pa=rep.qh_pa,
                       rate_per_round=rep.rate_per_round, rate_bps=rep.rate_per_round * rps,
                       final_key_length=rep.final_key_length, insecure=rep.insecure, note="")
        rows.append(row)
    return rows
