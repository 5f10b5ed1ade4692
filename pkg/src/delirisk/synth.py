"""Synthetic ICU cohort generator with planted, recoverable ground truth.

Each stay draws a static profile, per-variable latent levels, and
first-24h readings around those levels. Delirium risk is logistic-linear
in standardized latent levels of the configured signal features; labels
are drawn after calibrating the intercept to the target incidence.
Labeled stays then receive a planted post-24h interval with a positive
CAM and RASS >= -3, and no other interval can qualify, so the interval
labeler recovers the generated labels exactly. Exclusion-rule plants are
appended as extra stays that each trip exactly one cohort rule.

Values are drawn on coarse per-variable grids so the rendered numbers
form a compact, repeating token vocabulary.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .ehr import (
    COMORBIDITIES,
    AssessmentEvent,
    FeatureDictionary,
    IcuStayRecord,
    MedicationEvent,
    ObservationEvent,
    StaticProfile,
    default_dictionary,
)

BASE_ADMIT = datetime(2024, 1, 1, 8, 0)

# variable_id -> (population mean, between-stay sd, within-stay sd, value grid)
VARIABLE_MODELS = {
    "heart_rate": (85.0, 15.0, 4.0, 1.0),
    "sbp": (120.0, 18.0, 6.0, 1.0),
    "dbp": (70.0, 12.0, 4.0, 1.0),
    "spo2": (96.0, 2.5, 1.0, 1.0),
    "etco2": (38.0, 5.0, 2.0, 1.0),
    "resp_rate": (18.0, 4.0, 1.5, 1.0),
    "temperature": (37.0, 0.6, 0.2, 0.1),
    "tidal_volume": (450.0, 80.0, 20.0, 10.0),
    "peep": (6.0, 2.5, 0.8, 1.0),
    # coarse grids on the default signal features: each rendered number
    # token then recurs across many reports, which a closed-vocabulary
    # encoder needs in order to attach risk to values
    "creatinine": (1.6, 0.8, 0.1, 0.25),
    "lactic_acid": (2.4, 1.2, 0.15, 0.5),
    "crp": (40.0, 30.0, 5.0, 1.0),
    "anion_gap": (10.0, 3.0, 1.0, 1.0),
    "bnp": (400.0, 250.0, 30.0, 10.0),
    "urine_sg": (1.015, 0.007, 0.002, 0.001),
    "hemoglobin": (11.0, 2.0, 0.4, 0.1),
    "glucose": (130.0, 35.0, 10.0, 1.0),
    "sodium": (139.0, 4.0, 1.5, 1.0),
    "calcium": (9.0, 0.7, 0.2, 0.1),
    "magnesium": (2.0, 0.3, 0.08, 0.1),
}
GENERIC_VARIABLE_MODEL = (50.0, 10.0, 2.0, 0.1)

# drug_id -> (dose scale, grid, unit, probability administered)
DRUG_MODELS = {
    "propofol": (100.0, 10.0, "mg", 0.45),
    "fentanyl": (100.0, 25.0, "mcg", 0.40),
    "midazolam": (4.0, 1.0, "mg", 0.30),
    "norepinephrine": (8.0, 2.0, "mg", 0.25),
    "vancomycin": (1000.0, 250.0, "mg", 0.35),
}
GENERIC_DRUG_MODEL = (10.0, 1.0, "mg", 0.3)

AGE_MEAN, AGE_SD = 62.0, 15.0

DEFAULT_SIGNAL = (("lactic_acid", 3.0), ("creatinine", 2.3), ("age", 1.5))


@dataclass
class SynthConfig:
    n_stays: int = 2000
    seed: int = 0
    delirium_rate_target: float = 0.05
    signal_features: tuple = DEFAULT_SIGNAL
    noise_scale: float = 0.35
    missing_rate: float = 0.08
    exclusion_plant: dict = field(default_factory=dict)
    max_onset_interval: int = 13  # keep onsets within the first week

    def __post_init__(self):
        if not 0.0 < self.delirium_rate_target < 1.0:
            raise ValueError("delirium_rate_target must be in (0, 1)")
        bad = set(self.exclusion_plant) - {
            "under_18", "not_first_admission", "los_under_24h",
            "death_within_48h", "delirium_or_coma_first_24h", "no_ehr_first_24h"}
        if bad:
            raise ValueError(f"unknown exclusion plant rules: {sorted(bad)}")


@dataclass
class SynthTruth:
    latent_risk: dict  # stay_id -> probability
    label: dict  # stay_id -> bool
    onset_interval: dict  # stay_id -> int or None
    planted_importance: list  # (variable_id, importance) descending


@dataclass
class SynthDataset:
    stays: list
    profiles: list
    observations: list
    medications: list
    assessments: list
    truth: SynthTruth
    dictionary: FeatureDictionary


def _rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _snap(value: float, grid: float) -> float:
    return round(round(value / grid) * grid, 6)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _calibrate_intercept(signals, target: float) -> float:
    """Bisect the logistic intercept until the mean risk hits the target."""
    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        mean = sum(_sigmoid(mid + s) for s in signals) / len(signals)
        if mean < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class _StayDraft:
    index: int
    stay_id: str
    patient_id: str
    age: float
    sex: str
    race: str
    bmi: float
    cci: int
    comorbidities: frozenset
    los_hours: float
    levels: dict  # variable_id -> latent level (grid-snapped)
    signal: float  # sum of coefficient * standardized level (+ noise)
    label_uniform: float
    onset_choice_uniform: float


def _draw_stay(i: int, cfg: SynthConfig, dictionary: FeatureDictionary) -> _StayDraft:
    rng = _rng(cfg.seed, i, 0)
    age = float(np.clip(round(rng.normal(AGE_MEAN, AGE_SD)), 18, 95))
    sex = ["female", "male"][int(rng.random() < 0.52)]
    race = ["black", "white", "other"][int(rng.choice(3, p=[0.15, 0.75, 0.10]))]
    bmi = _snap(float(np.clip(rng.normal(27.5, 5.0), 15.0, 55.0)), 0.1)
    cci = int(np.clip(rng.poisson(2.0), 0, 15))
    comorb = frozenset(c for c in COMORBIDITIES if rng.random() < 0.15)
    los = float(np.clip(np.exp(rng.normal(np.log(72.0), 0.5)), 30.0, 504.0))
    los = round(los, 2)

    levels = {}
    for entry in dictionary.ordered():
        if entry.category not in ("vital", "lab"):
            continue
        mu, bsd, _, grid = VARIABLE_MODELS.get(entry.variable_id, GENERIC_VARIABLE_MODEL)
        levels[entry.variable_id] = _snap(rng.normal(mu, bsd), grid)

    coeffs = dict(cfg.signal_features)
    signal = 0.0
    for var, coef in coeffs.items():
        if var == "age":
            signal += coef * (age - AGE_MEAN) / AGE_SD
        elif var in levels:
            mu, bsd, _, _ = VARIABLE_MODELS.get(var, GENERIC_VARIABLE_MODEL)
            signal += coef * (levels[var] - mu) / bsd
    signal += float(rng.normal(0.0, cfg.noise_scale))
    return _StayDraft(
        index=i, stay_id=f"s{i:05d}", patient_id=f"p{i:05d}",
        age=age, sex=sex, race=race, bmi=bmi, cci=cci, comorbidities=comorb,
        los_hours=los, levels=levels, signal=signal,
        label_uniform=float(rng.random()), onset_choice_uniform=float(rng.random()),
    )


def _stay_events(draft: _StayDraft, cfg: SynthConfig, dictionary: FeatureDictionary,
                 delirious: bool, onset: int):
    """Emit events for one stay; the post-24h CAM/RASS pattern encodes the label."""
    rng = _rng(cfg.seed, draft.index, 1)
    sid = draft.stay_id
    obs, meds, assess = [], [], []

    for entry in dictionary.ordered():
        if entry.category not in ("vital", "lab"):
            continue
        if rng.random() < cfg.missing_rate:
            continue
        mu, _, wsd, grid = VARIABLE_MODELS.get(entry.variable_id, GENERIC_VARIABLE_MODEL)
        level = draft.levels[entry.variable_id]
        n_read = 3 + int(rng.poisson(3.0)) if entry.category == "vital" else 1 + int(rng.poisson(1.5))
        offsets = np.sort(rng.uniform(0.2, 23.8, size=n_read))
        for off in offsets:
            value = _snap(level + rng.normal(0.0, wsd), grid)
            obs.append(ObservationEvent(sid, entry.variable_id, round(float(off), 2), value))
        if draft.los_hours > 30 and rng.random() < 0.5:
            off = rng.uniform(24.5, min(draft.los_hours - 0.5, 72.0))
            value = _snap(level + rng.normal(0.0, wsd), grid)
            obs.append(ObservationEvent(sid, entry.variable_id, round(float(off), 2), value))

    for entry in dictionary.ordered():
        if entry.category != "medication":
            continue
        scale, grid, unit, p_admin = DRUG_MODELS.get(entry.variable_id, GENERIC_DRUG_MODEL)
        if rng.random() >= p_admin:
            continue
        for _ in range(1 + int(rng.integers(0, 3))):
            dose = max(grid, _snap(rng.normal(scale, scale / 3.0), grid))
            off = round(float(rng.uniform(0.2, 23.8)), 2)
            meds.append(MedicationEvent(sid, entry.variable_id, off, dose, unit))

    # first 24h assessments: CAM always negative, RASS arousable, so no
    # stay trips the first-24h delirium/coma exclusion by accident
    if "gcs" in dictionary:
        for _ in range(2):
            assess.append(AssessmentEvent(sid, "GCS", round(float(rng.uniform(0.5, 23.5)), 2),
                                          int(rng.integers(12, 16))))
    for _ in range(3):
        assess.append(AssessmentEvent(sid, "RASS", round(float(rng.uniform(0.5, 23.5)), 2),
                                      int(rng.integers(-2, 2))))
    for _ in range(2):
        assess.append(AssessmentEvent(sid, "CAM", round(float(rng.uniform(0.5, 23.5)), 2), 0))

    n_full = int(draft.los_hours // 12)
    for k in range(2, n_full):
        base = 12.0 * k
        for _ in range(1 + int(rng.integers(0, 2))):
            assess.append(AssessmentEvent(sid, "RASS", round(float(rng.uniform(base + 0.2, base + 11.8)), 2),
                                          int(rng.integers(-2, 2))))
        cam_value = 1 if (delirious and k == onset) else 0
        assess.append(AssessmentEvent(sid, "CAM", round(float(rng.uniform(base + 0.2, base + 11.8)), 2),
                                      cam_value))
    return obs, meds, assess


def _make_stay_record(stay_id, patient_id, index, los_hours, death_offset=None,
                      stay_index=1) -> IcuStayRecord:
    admit = BASE_ADMIT + timedelta(hours=7 * index)
    discharge = admit + timedelta(hours=los_hours)
    death = admit + timedelta(hours=death_offset) if death_offset is not None else None
    return IcuStayRecord(stay_id, patient_id, admit, discharge, death, stay_index)


def _plant_exclusions(cfg: SynthConfig, dictionary: FeatureDictionary, start_index: int):
    stays, profiles, obs, meds, assess = [], [], [], [], []
    idx = start_index
    for reason in sorted(cfg.exclusion_plant):
        for j in range(cfg.exclusion_plant[reason]):
            rng = _rng(cfg.seed, idx, 2)
            sid = f"x{reason[:12]}{j:03d}"
            pid = f"px{idx:05d}"
            age, los, death, stay_index = 45.0, 72.0, None, 1
            if reason == "under_18":
                age = 17.0
            elif reason == "not_first_admission":
                stay_index = 2
            elif reason == "los_under_24h":
                los = 18.0
            elif reason == "death_within_48h":
                los, death = 40.0, 40.0
            stays.append(_make_stay_record(sid, pid, idx, los, death, stay_index))
            profiles.append(StaticProfile(sid, age, "female", 26.0, "white", 1, frozenset()))
            if reason == "no_ehr_first_24h":
                obs.append(ObservationEvent(sid, "heart_rate", 30.0, 80.0))
            else:
                value = _snap(float(rng.normal(85, 10)), 1.0)
                obs.append(ObservationEvent(sid, "heart_rate", 2.0, value))
                assess.append(AssessmentEvent(sid, "RASS", 3.0, 0))
                if reason == "delirium_or_coma_first_24h":
                    assess.append(AssessmentEvent(sid, "CAM", 5.0, 1))
                else:
                    assess.append(AssessmentEvent(sid, "CAM", 5.0, 0))
            idx += 1
    return stays, profiles, obs, meds, assess


def planted_truth(cfg: SynthConfig, dictionary=None) -> list:
    """Descending (variable_id, importance) ranking; importance is the
    coefficient magnitude since signals enter standardized."""
    dictionary = dictionary or default_dictionary()
    coeffs = dict(cfg.signal_features)
    rows = []
    for entry in dictionary.ordered():
        rows.append((entry.variable_id, abs(coeffs.get(entry.variable_id, 0.0))))
    for var, coef in coeffs.items():
        if var not in dictionary:
            rows.append((var, abs(coef)))
    rows.sort(key=lambda r: (-r[1], r[0]))
    return rows


def generate_cohort(cfg: SynthConfig, dictionary=None) -> SynthDataset:
    dictionary = dictionary or default_dictionary()
    drafts = [_draw_stay(i, cfg, dictionary) for i in range(cfg.n_stays)]
    intercept = _calibrate_intercept([d.signal for d in drafts], cfg.delirium_rate_target)

    risks = {}
    labels = {}
    onsets = {}
    target = cfg.delirium_rate_target
    for retry in range(20):
        rng_labels = _rng(cfg.seed, 999_000 + retry)
        uniforms = rng_labels.random(len(drafts))
        labels = {}
        for d, u in zip(drafts, uniforms):
            risks[d.stay_id] = _sigmoid(intercept + d.signal)
            labels[d.stay_id] = bool(u < risks[d.stay_id])
        realized = sum(labels.values()) / max(1, len(drafts))
        if abs(realized - target) <= 0.2 * target:
            break
    else:
        raise RuntimeError(
            f"could not calibrate incidence to {target} after 20 retries (got {realized})")

    stays, profiles = [], []
    all_obs, all_meds, all_assess = [], [], []
    for d in drafts:
        delirious = labels[d.stay_id]
        if delirious:
            # interval must fit fully inside the stay
            min_los = 12.0 * (2 + 1) + 4.0
            if d.los_hours < min_los:
                d.los_hours = min_los
            max_onset = min(cfg.max_onset_interval, int(d.los_hours // 12) - 1)
            max_onset = max(max_onset, 2)
            onset = 2 + int(d.onset_choice_uniform * (max_onset - 2 + 1))
            onset = min(onset, max_onset)
        else:
            onset = None
        onsets[d.stay_id] = onset
        stays.append(_make_stay_record(d.stay_id, d.patient_id, d.index, d.los_hours))
        profiles.append(StaticProfile(d.stay_id, d.age, d.sex, d.bmi, d.race, d.cci,
                                      d.comorbidities))
        obs, meds, assess = _stay_events(d, cfg, dictionary, delirious, onset if delirious else -1)
        all_obs.extend(obs)
        all_meds.extend(meds)
        all_assess.extend(assess)

    p_stays, p_profiles, p_obs, p_meds, p_assess = _plant_exclusions(
        cfg, dictionary, start_index=cfg.n_stays)
    stays.extend(p_stays)
    profiles.extend(p_profiles)
    all_obs.extend(p_obs)
    all_meds.extend(p_meds)
    all_assess.extend(p_assess)

    all_obs.sort(key=lambda e: (e.stay_id, e.offset_hours))
    all_meds.sort(key=lambda e: (e.stay_id, e.offset_hours))
    all_assess.sort(key=lambda e: (e.stay_id, e.offset_hours))

    truth = SynthTruth(latent_risk=risks, label=labels, onset_interval=onsets,
                       planted_importance=planted_truth(cfg, dictionary))
    return SynthDataset(stays=stays, profiles=profiles, observations=all_obs,
                        medications=all_meds, assessments=all_assess,
                        truth=truth, dictionary=dictionary)


def write_truth_csv(path, truth: SynthTruth) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stay_id", "latent_risk", "label", "onset_interval"])
        for sid in sorted(truth.latent_risk):
            onset = truth.onset_interval.get(sid)
            w.writerow([sid, repr(truth.latent_risk[sid]), int(truth.label[sid]),
                        onset if onset is not None else ""])


def write_planted_importance_csv(path, ranking) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable_id", "importance"])
        for var, imp in ranking:
            w.writerow([var, repr(imp)])
