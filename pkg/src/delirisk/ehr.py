"""Structured EHR data model and delimited-table ingestion.

All tables are comma-separated UTF-8 with a required header row. Event
times are stored as float hours since ICU admission; stay boundaries are
ISO-8601 timestamps. Malformed rows are rejected with a reason and an
exact line number, never silently dropped or clamped.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional, TextIO, Union

SEXES = ("female", "male", "unknown")
RACES = ("black", "white", "other")
COMORBIDITIES = ("chf", "copd", "cva", "malignancy", "hiv", "renal_disease", "liver_disease")
ASSESSMENT_KINDS = ("CAM", "RASS", "GCS")

ASSESSMENT_RANGES = {"CAM": (0, 1), "RASS": (-5, 4), "GCS": (3, 15)}

STAYS_COLUMNS = ["stay_id", "patient_id", "admit_time", "discharge_time", "death_time", "stay_index"]
STATIC_COLUMNS = ["stay_id", "age_years", "sex", "bmi", "race", "cci"] + list(COMORBIDITIES)
OBSERVATIONS_COLUMNS = ["stay_id", "variable_id", "offset_hours", "value"]
MEDICATIONS_COLUMNS = ["stay_id", "drug_id", "offset_hours", "dose", "unit"]
ASSESSMENTS_COLUMNS = ["stay_id", "kind", "offset_hours", "value"]
FEATURES_COLUMNS = ["variable_id", "display_name", "category", "canonical_priority"]

FEATURE_CATEGORIES = ("vital", "lab", "medication", "assessment", "static")


class SchemaError(Exception):
    """Header row does not match the documented table schema."""


class DataError(Exception):
    """Dataset-level defect that makes downstream stages undecidable."""


@dataclass(frozen=True)
class IcuStayRecord:
    stay_id: str
    patient_id: str
    admit_time: datetime
    discharge_time: datetime
    death_time: Optional[datetime]
    stay_index: int

    @property
    def los_hours(self) -> float:
        return (self.discharge_time - self.admit_time).total_seconds() / 3600.0

    @property
    def death_offset_hours(self) -> Optional[float]:
        if self.death_time is None:
            return None
        return (self.death_time - self.admit_time).total_seconds() / 3600.0


@dataclass(frozen=True)
class StaticProfile:
    stay_id: str
    age_years: float
    sex: str
    bmi: Optional[float]
    race: str
    cci: int
    comorbidities: frozenset


@dataclass(frozen=True)
class ObservationEvent:
    stay_id: str
    variable_id: str
    offset_hours: float
    value: float


@dataclass(frozen=True)
class MedicationEvent:
    stay_id: str
    drug_id: str
    offset_hours: float
    dose: float
    unit: str


@dataclass(frozen=True)
class AssessmentEvent:
    stay_id: str
    kind: str
    offset_hours: float
    value: int


@dataclass(frozen=True)
class FeatureEntry:
    variable_id: str
    display_name: str
    category: str
    canonical_priority: int


class FeatureDictionary:
    """Ordered feature registry; priority order fixes report section order."""

    def __init__(self, entries: Iterable[FeatureEntry]):
        self.entries = list(entries)
        self._by_id = {e.variable_id: e for e in self.entries}
        if len(self._by_id) != len(self.entries):
            raise DataError("duplicate variable_id in feature dictionary")
        priorities = [e.canonical_priority for e in self.entries]
        if len(set(priorities)) != len(priorities):
            raise DataError("canonical_priority must be a total order")

    def __contains__(self, variable_id: str) -> bool:
        return variable_id in self._by_id

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, variable_id: str) -> FeatureEntry:
        return self._by_id[variable_id]

    def ordered(self) -> list:
        return sorted(self.entries, key=lambda e: e.canonical_priority)

    def temporal_entries(self) -> list:
        return [e for e in self.ordered() if e.category in ("vital", "lab", "assessment", "medication")]


@dataclass
class RowCount:
    total: int = 0
    accepted: int = 0
    rejected: int = 0


@dataclass
class ValidationReport:
    row_counts: dict = field(default_factory=dict)
    rejected_rows: list = field(default_factory=list)  # (table, line number, reason)
    findings: list = field(default_factory=list)  # cross-table (kind, detail)

    def reject(self, table: str, line: int, reason: str) -> None:
        self.rejected_rows.append((table, line, reason))
        self.row_counts[table].rejected += 1

    def accept(self, table: str) -> None:
        self.row_counts[table].accepted += 1

    def merged(self, other: "ValidationReport") -> "ValidationReport":
        out = ValidationReport(dict(self.row_counts), list(self.rejected_rows), list(self.findings))
        out.row_counts.update(other.row_counts)
        out.rejected_rows.extend(other.rejected_rows)
        out.findings.extend(other.findings)
        return out


# the ~34 features explicitly named by the clinical source material, plus
# static demographics; medication list is configurable per dataset
DEFAULT_FEATURES = [
    ("age", "age", "static", 0),
    ("sex", "sex", "static", 1),
    ("race", "race", "static", 2),
    ("bmi", "bmi", "static", 3),
    ("cci", "cci", "static", 4),
    ("comorbidities", "comorbidities", "static", 5),
    ("heart_rate", "heart rate", "vital", 10),
    ("sbp", "systolic blood pressure", "vital", 11),
    ("dbp", "diastolic blood pressure", "vital", 12),
    ("spo2", "oxygen saturation", "vital", 13),
    ("etco2", "end tidal co2", "vital", 14),
    ("resp_rate", "respiratory rate", "vital", 15),
    ("temperature", "temperature", "vital", 16),
    ("tidal_volume", "tidal volume", "vital", 17),
    ("peep", "peep", "vital", 18),
    ("creatinine", "creatinine", "lab", 20),
    ("lactic_acid", "lactic acid", "lab", 21),
    ("crp", "c reactive protein", "lab", 22),
    ("anion_gap", "anion gap", "lab", 23),
    ("bnp", "bnp", "lab", 24),
    ("urine_sg", "urine specific gravity", "lab", 25),
    ("hemoglobin", "hemoglobin", "lab", 26),
    ("glucose", "glucose", "lab", 27),
    ("sodium", "sodium", "lab", 28),
    ("calcium", "calcium", "lab", 29),
    ("magnesium", "magnesium", "lab", 30),
    ("gcs", "gcs", "assessment", 40),
    ("rass", "rass", "assessment", 41),
    ("cam", "cam", "assessment", 42),
    ("propofol", "propofol", "medication", 50),
    ("fentanyl", "fentanyl", "medication", 51),
    ("midazolam", "midazolam", "medication", 52),
    ("norepinephrine", "norepinephrine", "medication", 53),
    ("vancomycin", "vancomycin", "medication", 54),
]


def default_dictionary() -> FeatureDictionary:
    return FeatureDictionary(FeatureEntry(*row) for row in DEFAULT_FEATURES)


def _open_stream(source: Union[str, Path, TextIO]) -> TextIO:
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8", newline="")
    return source


def _read_rows(source, table: str, columns: list):
    """Yield (line_number, row dict); raises SchemaError on a bad header."""
    stream = _open_stream(source)
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{table}: empty file, expected header {columns}")
    if header != columns:
        raise SchemaError(f"{table}: header {header} does not match schema {columns}")
    for line_no, row in enumerate(reader, start=2):
        yield line_no, row


def _parse_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError("non-finite")
    return value


def _parse_time(text: str) -> datetime:
    return datetime.fromisoformat(text)


def ingest_stays(source) -> tuple:
    """Parse stays.csv into IcuStayRecord rows plus a ValidationReport."""
    report = ValidationReport(row_counts={"stays": RowCount()})
    records = []
    seen_stay_ids = set()
    seen_patient_index = set()
    for line_no, row in _read_rows(source, "stays", STAYS_COLUMNS):
        report.row_counts["stays"].total += 1
        if len(row) != len(STAYS_COLUMNS):
            report.reject("stays", line_no, "bad_field_count")
            continue
        stay_id, patient_id, admit_s, discharge_s, death_s, index_s = row
        if not stay_id or not patient_id:
            report.reject("stays", line_no, "missing_id")
            continue
        try:
            admit = _parse_time(admit_s)
            discharge = _parse_time(discharge_s)
            death = _parse_time(death_s) if death_s else None
        except ValueError:
            report.reject("stays", line_no, "bad_time_format")
            continue
        try:
            stay_index = int(index_s)
        except ValueError:
            report.reject("stays", line_no, "bad_stay_index")
            continue
        if stay_index < 1:
            report.reject("stays", line_no, "bad_stay_index")
            continue
        if discharge <= admit:
            report.reject("stays", line_no, "discharge_before_admit")
            continue
        if death is not None and death < admit:
            report.reject("stays", line_no, "death_before_admit")
            continue
        if stay_id in seen_stay_ids:
            report.reject("stays", line_no, "duplicate_stay_id")
            continue
        if (patient_id, stay_index) in seen_patient_index:
            report.reject("stays", line_no, "duplicate_patient_stay_index")
            continue
        seen_stay_ids.add(stay_id)
        seen_patient_index.add((patient_id, stay_index))
        records.append(IcuStayRecord(stay_id, patient_id, admit, discharge, death, stay_index))
        report.accept("stays")
    return records, report


def ingest_profiles(source) -> tuple:
    """Parse static.csv into StaticProfile rows plus a ValidationReport."""
    report = ValidationReport(row_counts={"static": RowCount()})
    profiles = []
    for line_no, row in _read_rows(source, "static", STATIC_COLUMNS):
        report.row_counts["static"].total += 1
        if len(row) != len(STATIC_COLUMNS):
            report.reject("static", line_no, "bad_field_count")
            continue
        stay_id, age_s, sex, bmi_s, race, cci_s = row[:6]
        flags = row[6:]
        try:
            age = _parse_float(age_s)
        except ValueError:
            report.reject("static", line_no, "bad_age")
            continue
        if age < 0:
            report.reject("static", line_no, "bad_age")
            continue
        if sex not in SEXES:
            report.reject("static", line_no, "bad_sex")
            continue
        try:
            bmi = _parse_float(bmi_s) if bmi_s else None
        except ValueError:
            report.reject("static", line_no, "bad_bmi")
            continue
        if bmi is not None and bmi <= 0:
            report.reject("static", line_no, "bad_bmi")
            continue
        if race not in RACES:
            report.reject("static", line_no, "bad_race")
            continue
        try:
            cci = int(cci_s)
        except ValueError:
            report.reject("static", line_no, "bad_cci")
            continue
        if cci < 0:
            report.reject("static", line_no, "bad_cci")
            continue
        if any(f not in ("0", "1") for f in flags):
            report.reject("static", line_no, "bad_flag")
            continue
        active = frozenset(name for name, f in zip(COMORBIDITIES, flags) if f == "1")
        profiles.append(StaticProfile(stay_id, age, sex, bmi, race, cci, active))
        report.accept("static")
    return profiles, report


def ingest_events(source, kind: str, dictionary: FeatureDictionary) -> tuple:
    """Parse one event table; events come back sorted by (stay_id, offset)."""
    if kind == "observation":
        return _ingest_observations(source, dictionary)
    if kind == "medication":
        return _ingest_medications(source, dictionary)
    if kind == "assessment":
        return _ingest_assessments(source)
    raise ValueError(f"unknown event kind {kind!r}")


def _ingest_observations(source, dictionary) -> tuple:
    report = ValidationReport(row_counts={"observations": RowCount()})
    events = []
    for line_no, row in _read_rows(source, "observations", OBSERVATIONS_COLUMNS):
        report.row_counts["observations"].total += 1
        if len(row) != len(OBSERVATIONS_COLUMNS):
            report.reject("observations", line_no, "bad_field_count")
            continue
        stay_id, variable_id, offset_s, value_s = row
        if variable_id not in dictionary:
            report.reject("observations", line_no, "unknown_variable")
            continue
        try:
            offset = _parse_float(offset_s)
        except ValueError:
            report.reject("observations", line_no, "bad_offset")
            continue
        if offset < 0:
            report.reject("observations", line_no, "negative_offset")
            continue
        try:
            value = _parse_float(value_s)
        except ValueError:
            report.reject("observations", line_no, "bad_value")
            continue
        events.append(ObservationEvent(stay_id, variable_id, offset, value))
        report.accept("observations")
    events.sort(key=lambda e: (e.stay_id, e.offset_hours))
    return events, report


def _ingest_medications(source, dictionary) -> tuple:
    report = ValidationReport(row_counts={"medications": RowCount()})
    events = []
    for line_no, row in _read_rows(source, "medications", MEDICATIONS_COLUMNS):
        report.row_counts["medications"].total += 1
        if len(row) != len(MEDICATIONS_COLUMNS):
            report.reject("medications", line_no, "bad_field_count")
            continue
        stay_id, drug_id, offset_s, dose_s, unit = row
        if drug_id not in dictionary:
            report.reject("medications", line_no, "unknown_variable")
            continue
        try:
            offset = _parse_float(offset_s)
        except ValueError:
            report.reject("medications", line_no, "bad_offset")
            continue
        if offset < 0:
            report.reject("medications", line_no, "negative_offset")
            continue
        try:
            dose = _parse_float(dose_s)
        except ValueError:
            report.reject("medications", line_no, "bad_dose")
            continue
        if dose < 0:
            report.reject("medications", line_no, "negative_dose")
            continue
        events.append(MedicationEvent(stay_id, drug_id, offset, dose, unit))
        report.accept("medications")
    events.sort(key=lambda e: (e.stay_id, e.offset_hours))
    return events, report


def _ingest_assessments(source) -> tuple:
    report = ValidationReport(row_counts={"assessments": RowCount()})
    events = []
    for line_no, row in _read_rows(source, "assessments", ASSESSMENTS_COLUMNS):
        report.row_counts["assessments"].total += 1
        if len(row) != len(ASSESSMENTS_COLUMNS):
            report.reject("assessments", line_no, "bad_field_count")
            continue
        stay_id, kind, offset_s, value_s = row
        if kind not in ASSESSMENT_KINDS:
            report.reject("assessments", line_no, "bad_kind")
            continue
        try:
            offset = _parse_float(offset_s)
        except ValueError:
            report.reject("assessments", line_no, "bad_offset")
            continue
        if offset < 0:
            report.reject("assessments", line_no, "negative_offset")
            continue
        try:
            value_f = _parse_float(value_s)
        except ValueError:
            report.reject("assessments", line_no, "bad_value")
            continue
        if value_f != int(value_f):
            report.reject("assessments", line_no, "bad_value")
            continue
        value = int(value_f)
        lo, hi = ASSESSMENT_RANGES[kind]
        if not lo <= value <= hi:
            report.reject("assessments", line_no, f"{kind.lower()}_out_of_range")
            continue
        events.append(AssessmentEvent(stay_id, kind, offset, value))
        report.accept("assessments")
    events.sort(key=lambda e: (e.stay_id, e.offset_hours))
    return events, report


def validate_dataset(stays, events, profiles) -> ValidationReport:
    """Cross-table referential checks; every finding reported, none fatal."""
    report = ValidationReport()
    known = {s.stay_id for s in stays}
    for ev in events:
        if ev.stay_id not in known:
            report.findings.append(("orphan_event", ev.stay_id))
    seen = set()
    for p in profiles:
        if p.stay_id not in known:
            report.findings.append(("orphan_profile", p.stay_id))
        if p.stay_id in seen:
            report.findings.append(("duplicate_profile", p.stay_id))
        seen.add(p.stay_id)
    return report


def load_features(source) -> FeatureDictionary:
    entries = []
    for line_no, row in _read_rows(source, "features", FEATURES_COLUMNS):
        if len(row) != len(FEATURES_COLUMNS):
            raise SchemaError(f"features: line {line_no}: bad field count")
        variable_id, display_name, category, priority_s = row
        if category not in FEATURE_CATEGORIES:
            raise SchemaError(f"features: line {line_no}: unknown category {category!r}")
        entries.append(FeatureEntry(variable_id, display_name, category, int(priority_s)))
    return FeatureDictionary(entries)


def _format_time(t: Optional[datetime]) -> str:
    return t.isoformat() if t is not None else ""


def _float_str(value: float) -> str:
    """Shortest round-trip decimal form, deterministic across platforms."""
    return repr(float(value))


def write_stays_csv(path, stays) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STAYS_COLUMNS)
        for s in stays:
            w.writerow([s.stay_id, s.patient_id, _format_time(s.admit_time),
                        _format_time(s.discharge_time), _format_time(s.death_time), s.stay_index])


def write_profiles_csv(path, profiles) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATIC_COLUMNS)
        for p in profiles:
            flags = ["1" if c in p.comorbidities else "0" for c in COMORBIDITIES]
            bmi = _float_str(p.bmi) if p.bmi is not None else ""
            w.writerow([p.stay_id, _float_str(p.age_years), p.sex, bmi, p.race, p.cci] + flags)


def write_observations_csv(path, events) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OBSERVATIONS_COLUMNS)
        for e in events:
            w.writerow([e.stay_id, e.variable_id, _float_str(e.offset_hours), _float_str(e.value)])


def write_medications_csv(path, events) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MEDICATIONS_COLUMNS)
        for e in events:
            w.writerow([e.stay_id, e.drug_id, _float_str(e.offset_hours), _float_str(e.dose), e.unit])


def write_assessments_csv(path, events) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ASSESSMENTS_COLUMNS)
        for e in events:
            w.writerow([e.stay_id, e.kind, _float_str(e.offset_hours), e.value])


def write_features_csv(path, dictionary: FeatureDictionary) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FEATURES_COLUMNS)
        for e in dictionary.entries:
            w.writerow([e.variable_id, e.display_name, e.category, e.canonical_priority])
