"""Cohort selection, 12-hour-interval delirium labeling, and data splits.

Interval k covers hours [12k, 12k+12) from ICU admission; an event whose
offset falls exactly on a boundary belongs to the later interval. An
interval qualifies for delirium when its lowest RASS reading is >= -3 and
it holds at least one positive CAM; the outcome considers intervals at
index 2 and above (after the first 24 hours). Coma is the artifact rule:
an interval with at least one RASS reading, all of them <= -4.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass
from typing import Iterable, Optional

from .ehr import AssessmentEvent, DataError, IcuStayRecord

EXCLUSION_REASONS = (
    "under_18",
    "not_first_admission",
    "los_under_24h",
    "death_within_48h",
    "delirium_or_coma_first_24h",
    "no_ehr_first_24h",
)

INTERVAL_HOURS = 12.0
OUTCOME_FIRST_INTERVAL = 2  # first interval after the 24-hour feature window


@dataclass(frozen=True)
class IntervalSummary:
    interval_index: int
    rass_min: Optional[int]
    rass_max: Optional[int]
    rass_count: int
    cam_positive_count: int


@dataclass(frozen=True)
class LabelRecord:
    stay_id: str
    delirium: bool
    onset_interval: Optional[int]
    coma_intervals: tuple
    first24h_delirium: bool
    first24h_coma: bool


@dataclass(frozen=True)
class CohortDecision:
    stay_id: str
    included: bool
    exclusion_reason: Optional[str]


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: frozenset
    tune_ids: frozenset
    internal_validation_ids: frozenset
    seed: int


def interval_of(offset_hours: float) -> int:
    return int(math.floor(offset_hours / INTERVAL_HOURS))


def summarize_intervals(stay: IcuStayRecord, assessments: Iterable[AssessmentEvent]) -> list:
    """One IntervalSummary per 12-hour bin from admission to discharge.

    The final partial bin is included. A grid of ceil(LOS/12) bins covers
    every offset < LOS; an assessment at exactly LOS on a 12-hour multiple
    extends the grid by one interval rather than being dropped.
    """
    n_bins = max(1, math.ceil(stay.los_hours / INTERVAL_HOURS))
    per_bin = {}
    for ev in assessments:
        k = interval_of(ev.offset_hours)
        n_bins = max(n_bins, k + 1)
        per_bin.setdefault(k, []).append(ev)
    out = []
    for k in range(n_bins):
        rass = [ev.value for ev in per_bin.get(k, []) if ev.kind == "RASS"]
        cam_pos = sum(1 for ev in per_bin.get(k, []) if ev.kind == "CAM" and ev.value == 1)
        out.append(IntervalSummary(
            interval_index=k,
            rass_min=min(rass) if rass else None,
            rass_max=max(rass) if rass else None,
            rass_count=len(rass),
            cam_positive_count=cam_pos,
        ))
    return out


def interval_qualifies(interval: IntervalSummary) -> bool:
    """Delirium rule for a single interval: min RASS >= -3 and a positive CAM."""
    return (interval.rass_min is not None
            and interval.rass_min >= -3
            and interval.cam_positive_count >= 1)


def detect_coma(interval: IntervalSummary) -> bool:
    return interval.rass_count >= 1 and interval.rass_max is not None and interval.rass_max <= -4


def label_delirium(stay_id: str, intervals: list) -> LabelRecord:
    """Derive the outcome label and first-24h flags from interval summaries."""
    onset = None
    for iv in intervals:
        if iv.interval_index >= OUTCOME_FIRST_INTERVAL and interval_qualifies(iv):
            onset = iv.interval_index
            break
    coma = tuple(iv.interval_index for iv in intervals if detect_coma(iv))
    first24 = [iv for iv in intervals if iv.interval_index < OUTCOME_FIRST_INTERVAL]
    return LabelRecord(
        stay_id=stay_id,
        delirium=onset is not None,
        onset_interval=onset,
        coma_intervals=coma,
        first24h_delirium=any(interval_qualifies(iv) for iv in first24),
        first24h_coma=any(detect_coma(iv) for iv in first24),
    )


def label_stay(stay: IcuStayRecord, assessments: Iterable[AssessmentEvent]) -> LabelRecord:
    return label_delirium(stay.stay_id, summarize_intervals(stay, assessments))


def select_cohort(stays, labels, ehr_presence, profiles) -> list:
    """Apply the exclusion rules in fixed order; first matching rule wins.

    `labels` maps stay_id -> LabelRecord, `ehr_presence` is the set of
    stay_ids with any event before hour 24, `profiles` maps stay_id ->
    StaticProfile. A stay without a profile is a fatal data error: rule 1
    (age under 18) cannot be decided.
    """
    decisions = []
    for stay in stays:
        profile = profiles.get(stay.stay_id)
        if profile is None:
            raise DataError(f"stay {stay.stay_id} has no static profile; age unknown")
        label = labels[stay.stay_id]
        reason = None
        death_offset = stay.death_offset_hours
        if profile.age_years < 18:
            reason = "under_18"
        elif stay.stay_index != 1:
            reason = "not_first_admission"
        elif stay.los_hours < 24:
            reason = "los_under_24h"
        elif death_offset is not None and death_offset < 48:
            reason = "death_within_48h"
        elif label.first24h_delirium or label.first24h_coma:
            reason = "delirium_or_coma_first_24h"
        elif stay.stay_id not in ehr_presence:
            reason = "no_ehr_first_24h"
        decisions.append(CohortDecision(stay.stay_id, reason is None, reason))
    return decisions


def split_dataset(patient_ids, seed: int) -> DatasetSplit:
    """Deterministic 80/10/10 patient split; rounding remainder to train."""
    ids = sorted(set(patient_ids))
    if len(ids) < 10:
        raise DataError(f"need at least 10 patients to split, got {len(ids)}")
    rng = random.Random(seed)
    rng.shuffle(ids)
    n = len(ids)
    n_tune = n // 10
    n_val = n // 10
    tune = frozenset(ids[:n_tune])
    val = frozenset(ids[n_tune:n_tune + n_val])
    train = frozenset(ids[n_tune + n_val:])
    return DatasetSplit(train, tune, val, seed)


def ehr_presence_index(observations, medications, assessments) -> set:
    """Stay ids with any structured event strictly before hour 24."""
    present = set()
    for events in (observations, medications, assessments):
        for ev in events:
            if ev.offset_hours < 24:
                present.add(ev.stay_id)
    return present


def write_decisions_csv(path, decisions) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stay_id", "included", "exclusion_reason"])
        for d in decisions:
            w.writerow([d.stay_id, int(d.included), d.exclusion_reason or ""])


def write_labels_csv(path, labels) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stay_id", "delirium", "onset_interval", "first24h_delirium", "first24h_coma"])
        for rec in labels:
            onset = rec.onset_interval if rec.onset_interval is not None else ""
            w.writerow([rec.stay_id, int(rec.delirium), onset,
                        int(rec.first24h_delirium), int(rec.first24h_coma)])


def read_labels_csv(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            onset = int(row["onset_interval"]) if row["onset_interval"] else None
            out[row["stay_id"]] = LabelRecord(
                stay_id=row["stay_id"],
                delirium=bool(int(row["delirium"])),
                onset_interval=onset,
                coma_intervals=(),
                first24h_delirium=bool(int(row["first24h_delirium"])),
                first24h_coma=bool(int(row["first24h_coma"])),
            )
    return out


def write_split_csv(path, split: DatasetSplit) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "partition"])
        rows = ([(p, "train") for p in sorted(split.train_ids)]
                + [(p, "tune") for p in sorted(split.tune_ids)]
                + [(p, "validation") for p in sorted(split.internal_validation_ids)])
        for patient_id, part in rows:
            w.writerow([patient_id, part])


def read_split_csv(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["patient_id"]] = row["partition"]
    return out
