"""Patient data model, CSV ingestion, and a seeded synthetic cohort generator.

The cohort layer is intentionally thin: time-stamped observations per patient
plus exactly one outcome row per patient. Everything downstream (windowing,
score discretization, survival fits) consumes this structure and nothing else.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

OBSERVATIONS_HEADER = ("patient_id", "variable", "offset_minutes", "value")
OUTCOMES_HEADER = ("patient_id", "event_hours", "death_flag")

FIRST_DAY_MINUTES = 1440

# Day used to anchor the synthetic generator's prevalence calibration.
PREVALENCE_REFERENCE_DAY = 5

DEFAULT_REQUIRED_VARIABLES = ("heart_rate", "blood_pressure", "gcs")


class CohortError(ValueError):
    """Invalid cohort content (bad values, broken invariants)."""


class ParseError(CohortError):
    """Malformed CSV input; carries the 1-based line number."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True, slots=True)
class RawObservation:
    patient_id: str
    variable: str
    offset_minutes: int
    value: float

    def __post_init__(self):
        if self.offset_minutes < 0:
            raise CohortError(f"offset_minutes must be >= 0, got {self.offset_minutes}")
        if not math.isfinite(self.value):
            raise CohortError(f"non-finite value for {self.patient_id}/{self.variable}")

    @property
    def beyond_first_day(self) -> bool:
        """True for samples at or past minute 1440; they never feed the model."""
        return self.offset_minutes >= FIRST_DAY_MINUTES


@dataclass(frozen=True, slots=True)
class PatientOutcome:
    patient_id: str
    event_hours: float
    death_flag: bool

    def __post_init__(self):
        if not (math.isfinite(self.event_hours) and self.event_hours > 0):
            raise CohortError(
                f"event_hours must be finite and > 0, got {self.event_hours} "
                f"for {self.patient_id}"
            )


@dataclass
class RawCohort:
    """Observations and outcomes keyed by patient, with matching key sets."""

    patients: dict[str, list[RawObservation]]
    outcomes: dict[str, PatientOutcome]

    def __post_init__(self):
        obs_ids = set(self.patients)
        out_ids = set(self.outcomes)
        if obs_ids != out_ids:
            missing = sorted(obs_ids ^ out_ids)[:5]
            raise CohortError(
                f"observations and outcomes cover different patients (e.g. {missing})"
            )
        for pid, obs in self.patients.items():
            offsets = [o.offset_minutes for o in obs]
            if offsets != sorted(offsets):
                raise CohortError(f"observations for {pid} are not sorted by offset")

    @property
    def patient_ids(self) -> list[str]:
        return list(self.patients)

    @property
    def n_patients(self) -> int:
        return len(self.patients)

    def subset(self, ids) -> "RawCohort":
        ids = list(ids)
        return RawCohort(
            patients={pid: self.patients[pid] for pid in ids},
            outcomes={pid: self.outcomes[pid] for pid in ids},
        )


def _text_reader(stream):
    if isinstance(stream, (str, bytes)):
        raise TypeError("expected a file-like object, not a path or raw string")
    raw = stream.read()
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    return csv.reader(io.StringIO(raw, newline=""))


def ingest_observations(stream) -> dict[str, list[RawObservation]]:
    """Parse an observations CSV into per-patient, offset-sorted lists.

    The stream must be UTF-8 CSV with header patient_id,variable,offset_minutes,value.
    Rows at or beyond minute 1440 are kept; `RawObservation.beyond_first_day`
    flags them for downstream stages.
    """
    reader = _text_reader(stream)
    header = next(reader, None)
    if header is None:
        raise CohortError("no observations")
    if tuple(header) != OBSERVATIONS_HEADER:
        raise ParseError(1, f"expected header {','.join(OBSERVATIONS_HEADER)}")

    per_patient: dict[str, list[RawObservation]] = {}
    n_rows = 0
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if tuple(row) == OBSERVATIONS_HEADER:
            raise ParseError(line_no, "duplicate header row")
        if len(row) != 4:
            raise ParseError(line_no, f"expected 4 fields, got {len(row)}")
        pid, variable, offset_s, value_s = row
        try:
            offset = int(offset_s)
        except ValueError:
            raise ParseError(line_no, f"non-integer offset_minutes {offset_s!r}") from None
        try:
            value = float(value_s)
        except ValueError:
            raise ParseError(line_no, f"non-numeric value {value_s!r}") from None
        try:
            obs = RawObservation(pid, variable, offset, value)
        except CohortError as exc:
            raise ParseError(line_no, str(exc)) from None
        per_patient.setdefault(pid, []).append(obs)
        n_rows += 1

    if n_rows == 0:
        raise CohortError("no observations")
    for pid in per_patient:
        per_patient[pid].sort(key=lambda o: o.offset_minutes)
    return per_patient


def ingest_outcomes(stream) -> dict[str, PatientOutcome]:
    """Parse an outcomes CSV; exactly one row per patient_id."""
    reader = _text_reader(stream)
    header = next(reader, None)
    if header is None:
        raise CohortError("no outcomes")
    if tuple(header) != OUTCOMES_HEADER:
        raise ParseError(1, f"expected header {','.join(OUTCOMES_HEADER)}")

    outcomes: dict[str, PatientOutcome] = {}
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ParseError(line_no, f"expected 3 fields, got {len(row)}")
        pid, hours_s, flag_s = row
        if pid in outcomes:
            raise ParseError(line_no, f"duplicate patient_id {pid!r}")
        try:
            hours = float(hours_s)
        except ValueError:
            raise ParseError(line_no, f"non-numeric event_hours {hours_s!r}") from None
        if flag_s not in ("0", "1"):
            raise ParseError(line_no, f"death_flag must be 0 or 1, got {flag_s!r}")
        try:
            outcomes[pid] = PatientOutcome(pid, hours, flag_s == "1")
        except CohortError as exc:
            raise ParseError(line_no, str(exc)) from None

    if not outcomes:
        raise CohortError("no outcomes")
    return outcomes


def load_cohort(observations_path, outcomes_path) -> RawCohort:
    with open(observations_path, "rb") as f:
        patients = ingest_observations(f)
    with open(outcomes_path, "rb") as f:
        outcomes = ingest_outcomes(f)
    return RawCohort(patients=patients, outcomes=outcomes)


def write_observations(cohort: RawCohort, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(OBSERVATIONS_HEADER)
        for pid in cohort.patients:
            for obs in cohort.patients[pid]:
                writer.writerow([pid, obs.variable, obs.offset_minutes, repr(obs.value)])


def write_outcomes(cohort: RawCohort, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(OUTCOMES_HEADER)
        for pid in cohort.outcomes:
            out = cohort.outcomes[pid]
            writer.writerow([pid, repr(out.event_hours), int(out.death_flag)])


def filter_cohort(
    cohort: RawCohort,
    required_variables=DEFAULT_REQUIRED_VARIABLES,
    window_hours: int = 12,
    min_stay_hours: float = 24.0,
) -> RawCohort:
    """Keep patients with >= 24 h of follow-up and complete required coverage.

    A patient qualifies when event_hours >= min_stay_hours and every required
    variable has at least one sample in every window of the first day.
    """
    n_windows = 24 // window_hours
    kept: list[str] = []
    for pid, obs in cohort.patients.items():
        if cohort.outcomes[pid].event_hours < min_stay_hours:
            continue
        seen = {(v, t): False for v in required_variables for t in range(n_windows)}
        for o in obs:
            if o.variable in required_variables and o.offset_minutes < 60 * window_hours * n_windows:
                seen[(o.variable, o.offset_minutes // (60 * window_hours))] = True
        if all(seen.values()):
            kept.append(pid)
    return cohort.subset(kept)


# --------------------------------------------------------------------------
# Synthetic cohort generation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_patients: int
    n_variables: int
    prevalence_target: float
    missing_rate: float
    sampling_rate_per_hour: float
    seed: int

    def __post_init__(self):
        if self.n_patients < 1:
            raise CohortError("n_patients must be positive")
        if self.n_variables < 1:
            raise CohortError("n_variables must be positive")
        if not 0.0 < self.prevalence_target < 1.0:
            raise CohortError("prevalence_target must lie in (0, 1)")
        if not 0.0 <= self.missing_rate < 1.0:
            raise CohortError("missing_rate must lie in [0, 1)")
        if self.sampling_rate_per_hour <= 0:
            raise CohortError("sampling_rate_per_hour must be positive")
        if not 0 <= self.seed < 2**64:
            raise CohortError("seed must fit in 64 unsigned bits")

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SynthConfig":
        expected = {
            "n_patients", "n_variables", "prevalence_target",
            "missing_rate", "sampling_rate_per_hour", "seed",
        }
        keys = set(obj)
        if keys != expected:
            extra = sorted(keys - expected)
            missing = sorted(expected - keys)
            raise CohortError(
                f"synthetic config must have exactly {sorted(expected)}; "
                f"missing {missing}, unexpected {extra}"
            )
        return cls(
            n_patients=int(obj["n_patients"]),
            n_variables=int(obj["n_variables"]),
            prevalence_target=float(obj["prevalence_target"]),
            missing_rate=float(obj["missing_rate"]),
            sampling_rate_per_hour=float(obj["sampling_rate_per_hour"]),
            seed=int(obj["seed"]),
        )


# Per-variable emission models: baseline, scale, noise sd, severity loading.
# Signs follow clinical direction (sicker = faster heart rate, lower pressure,
# lower GCS, higher temperature); baselines sit close to a score-bin boundary
# so severity shifts actually register in the discretized scores.
_VALUE_MODELS = {
    "heart_rate": (107.0, 16.0, 4.0, 0.92),
    "blood_pressure": (112.0, -15.0, 5.0, 0.82),
    "gcs": (14.2, -2.6, 0.5, 0.45),
    "temperature": (37.4, 1.0, 0.25, 0.88),
}
_EXTRA_VALUE_MODEL = (50.0, 10.0, 3.0, 0.5)

_SEVERITY_SLOPE = 2.0          # log-hazard per unit risk, hazard in 1/h
_TRAJECTORY_SD = 1.0           # sd of the per-patient deterioration slope
_TRAJECTORY_RISK_WEIGHT = 2.2  # the direction of travel outweighs the level
_AGE_RISK_WEIGHT = 0.18        # age joins acute severity in the hazard
_DISCHARGE_MIN_HOURS = 24.0
_DISCHARGE_SCALE_HOURS = 72.0  # mean extra stay beyond the first day


def synthetic_variable_names(n_variables: int) -> list[str]:
    canonical = ["heart_rate", "blood_pressure", "gcs", "temperature", "age"]
    names = canonical[:n_variables]
    names += [f"var_{i + 1}" for i in range(len(names), n_variables)]
    return names


def _death_by_probability(log_rate: float, tau_hours: float) -> float:
    # P(death before discharge and before tau) with discharge ~ 24h + Exp(scale)
    lam = math.exp(log_rate)
    mu = 1.0 / _DISCHARGE_SCALE_HOURS
    t0 = min(tau_hours, _DISCHARGE_MIN_HOURS)
    p = -math.expm1(-lam * t0)
    if tau_hours > _DISCHARGE_MIN_HOURS:
        span = tau_hours - _DISCHARGE_MIN_HOURS
        p += (lam / (lam + mu)) * math.exp(-lam * _DISCHARGE_MIN_HOURS) * -math.expm1(
            -(lam + mu) * span
        )
    return p


def _calibrate_intercept(prevalence_target: float, tau_hours: float) -> float:
    """Bisect the log-hazard intercept so the expected death fraction by tau
    matches the target, integrating over severity ~ N(0, 1)."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(101)
    weights = weights / math.sqrt(2.0 * math.pi)

    def expected_fraction(b0):
        return float(
            sum(
                w * _death_by_probability(b0 + _SEVERITY_SLOPE * x, tau_hours)
                for x, w in zip(nodes, weights)
            )
        )

    lo, hi = -20.0, 5.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expected_fraction(mid) < prevalence_target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic_cohort(config: SynthConfig) -> RawCohort:
    """Generate a cohort that follows the model's own generative assumptions.

    Per patient: a latent severity vector drives both the observed physiology
    (with an upward drift across the first day for high-risk patients) and an
    exponential death time whose rate is the exponent of a linear function of
    severity. Discharge is drawn independently; event_hours records whichever
    comes first. Deterministic for a fixed config, independent of thread count.

    Parameters
    ----------
    config : SynthConfig
        Cohort size, variable count, target death fraction by day 5,
        missing-sample probability, sampling rate, and RNG seed.
    """
    rng = np.random.default_rng(config.seed)
    variables = synthetic_variable_names(config.n_variables)
    has_age = "age" in variables
    intercept = _calibrate_intercept(
        config.prevalence_target, 24.0 * PREVALENCE_REFERENCE_DAY
    )
    interval = 60.0 / config.sampling_rate_per_hour
    n_samples = max(1, int(math.floor(FIRST_DAY_MINUTES / interval)))
    width = len(str(config.n_patients))

    patients: dict[str, list[RawObservation]] = {}
    outcomes: dict[str, PatientOutcome] = {}
    for i in range(config.n_patients):
        pid = f"p{i + 1:0{width}d}"
        # Severity follows a linear trajectory over the first day, and the
        # hazard weights the direction of travel above the level: a patient
        # deteriorating toward a given state is in more danger than one
        # improving through it.
        severity = float(rng.standard_normal())
        slope = float(rng.standard_normal()) * _TRAJECTORY_SD
        z = rng.standard_normal(config.n_variables)
        course = (severity + _TRAJECTORY_RISK_WEIGHT * slope) / math.sqrt(
            1.0 + (_TRAJECTORY_RISK_WEIGHT * _TRAJECTORY_SD) ** 2
        )

        # Standard-normal risk: clinical course plus an age contribution.
        if has_age:
            w = math.sqrt(1.0 - _AGE_RISK_WEIGHT**2)
            risk = w * course + _AGE_RISK_WEIGHT * z[variables.index("age")]
        else:
            risk = course
        rate = math.exp(intercept + _SEVERITY_SLOPE * risk)
        t_death = rng.exponential(1.0 / rate)
        t_discharge = _DISCHARGE_MIN_HOURS + rng.exponential(_DISCHARGE_SCALE_HOURS)
        died = bool(t_death <= t_discharge)
        event_hours = float(min(t_death, t_discharge))

        records = []
        for j, var in enumerate(variables):
            if var == "age":
                value = float(np.clip(round(62.0 + 14.0 * z[j]), 18.0, 100.0))
                if rng.random() >= config.missing_rate:
                    records.append((0, var, value))
                continue
            offsets = np.arange(n_samples) * interval + rng.uniform(0.0, interval, n_samples)
            frac = offsets / FIRST_DAY_MINUTES
            base, scale, noise, loading = _VALUE_MODELS.get(var, _EXTRA_VALUE_MODEL)
            latent = (
                loading * (severity + slope * frac)
                + math.sqrt(1.0 - loading**2) * z[j]
            )
            values = base + scale * latent + rng.normal(0.0, noise, n_samples)
            if var == "gcs":
                values = np.clip(np.rint(values), 3.0, 15.0)
            keep = rng.random(n_samples) >= config.missing_rate
            for off, val in zip(offsets[keep], values[keep]):
                records.append((int(off), var, float(val)))

        records.sort(key=lambda r: r[0])
        patients[pid] = [RawObservation(pid, var, off, val) for off, var, val in records]
        outcomes[pid] = PatientOutcome(pid, event_hours, died)

    return RawCohort(patients=patients, outcomes=outcomes)


def death_fraction_by(cohort: RawCohort, day: int = PREVALENCE_REFERENCE_DAY) -> float:
    """Fraction of patients dead by midnight of the given day since admission."""
    horizon = 24.0 * day
    flags = [
        out.death_flag and out.event_hours <= horizon for out in cohort.outcomes.values()
    ]
    return float(np.mean(flags)) if flags else 0.0
