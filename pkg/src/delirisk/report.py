"""First-24h feature summaries and deterministic text report rendering.

Reports are lowercase "name: value" sections joined by " [SEP] " with a
leading "[CLS] ". Static sections come first, then temporal sections in
dictionary priority order. Vitals, labs and assessments render as
"min X max Y" over first-24h readings; medications as the total first-24h
dose. Unmeasured variables render "na", never-administered drugs "none",
so absence stays visible to the model and section labels align across
samples. Tokenization is whitespace over a closed vocabulary; reports
that exceed the context budget drop whole low-priority sections.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional

from .ehr import COMORBIDITIES, FeatureDictionary, StaticProfile

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]

SUMMARY_WINDOW_HOURS = 24.0


class ReportError(Exception):
    """Report cannot be produced under the configured context budget."""


@dataclass(frozen=True)
class FeatureSummary:
    stay_id: str
    ranges: dict  # variable_id -> (min, max) over offsets < 24h
    doses: dict  # drug_id -> (total dose over offsets < 24h, unit)


@dataclass(frozen=True)
class TextReport:
    stay_id: str
    sections: tuple  # ordered (feature_label, body) pairs
    serialized: str


@dataclass
class Vocabulary:
    token_to_id: dict
    id_to_token: list
    counts: dict
    min_frequency: int

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)


@dataclass(frozen=True)
class TokenizedReport:
    stay_id: str
    token_ids: tuple
    section_spans: tuple  # (feature_label, start, end) over non-special tokens
    dropped_sections: tuple  # labels removed to fit the context budget


def numeric_format(value: float) -> str:
    """Round to 3 significant digits, plain decimal, no trailing '.0'."""
    if not math.isfinite(value):
        raise ValueError(f"non-finite value {value!r}")
    s = f"{value:.3g}"
    if "e" in s or "E" in s:
        s = f"{float(s):.10f}"
        s = s.rstrip("0").rstrip(".")
    elif s.endswith(".0"):
        s = s[:-2]
    return s


def summarize_features(observations, medications, assessments, dictionary: FeatureDictionary,
                       stay_id: str) -> FeatureSummary:
    """Min/max per observed variable and total dose per drug, first 24h only."""
    ranges = {}
    for ev in observations:
        if ev.offset_hours >= SUMMARY_WINDOW_HOURS or ev.variable_id not in dictionary:
            continue
        lo, hi = ranges.get(ev.variable_id, (ev.value, ev.value))
        ranges[ev.variable_id] = (min(lo, ev.value), max(hi, ev.value))
    for ev in assessments:
        if ev.offset_hours >= SUMMARY_WINDOW_HOURS:
            continue
        key = ev.kind.lower()
        if key not in dictionary:
            continue
        lo, hi = ranges.get(key, (ev.value, ev.value))
        ranges[key] = (min(lo, ev.value), max(hi, ev.value))
    doses = {}
    for ev in medications:
        if ev.offset_hours >= SUMMARY_WINDOW_HOURS or ev.drug_id not in dictionary:
            continue
        total, unit = doses.get(ev.drug_id, (0.0, ev.unit))
        doses[ev.drug_id] = (total + ev.dose, unit)
    return FeatureSummary(stay_id=stay_id, ranges=ranges, doses=doses)


def _static_sections(profile: StaticProfile) -> list:
    comorb = " ".join(c for c in COMORBIDITIES if c in profile.comorbidities) or "none"
    bmi = numeric_format(profile.bmi) if profile.bmi is not None else "na"
    return [
        ("age", f"age: {numeric_format(profile.age_years)}"),
        ("sex", f"sex: {profile.sex}"),
        ("race", f"race: {profile.race}"),
        ("bmi", f"bmi: {bmi}"),
        ("cci", f"cci: {numeric_format(profile.cci)}"),
        ("comorbidities", f"comorbidities: {comorb}"),
    ]


def render_report(profile: StaticProfile, summary: FeatureSummary,
                  dictionary: FeatureDictionary) -> TextReport:
    """Byte-deterministic report; pure function of its three inputs."""
    sections = _static_sections(profile)
    for entry in dictionary.temporal_entries():
        label = entry.display_name.lower()
        if entry.category == "medication":
            if entry.variable_id in summary.doses:
                total, unit = summary.doses[entry.variable_id]
                body = f"{label}: total dose {numeric_format(total)} {unit}"
            else:
                body = f"{label}: none"
        else:
            if entry.variable_id in summary.ranges:
                lo, hi = summary.ranges[entry.variable_id]
                body = f"{label}: min {numeric_format(lo)} max {numeric_format(hi)}"
            else:
                body = f"{label}: na"
        sections.append((label, body))
    serialized = "[CLS] " + " [SEP] ".join(body for _, body in sections)
    return TextReport(stay_id=summary.stay_id, sections=tuple(sections), serialized=serialized)


def parse_report_sections(serialized: str) -> list:
    """Recover section bodies by splitting on [SEP]; inverse of rendering."""
    parts = [p.strip() for p in serialized.split("[SEP]")]
    if parts and parts[0].startswith("[CLS]"):
        parts[0] = parts[0][len("[CLS]"):].strip()
    return parts


def build_vocab(corpus: Iterable[str], min_frequency: int = 1) -> Vocabulary:
    """Closed whitespace vocabulary: specials first, then tokens with
    count >= min_frequency by descending count, ties lexicographic."""
    counts = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        for token in text.split():
            if token not in SPECIAL_TOKENS:
                counts[token] += 1
    if n_docs == 0:
        raise ValueError("empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_frequency),
                  key=lambda t: (-counts[t], t))
    id_to_token = list(SPECIAL_TOKENS) + kept
    token_to_id = {t: i for i, t in enumerate(id_to_token)}
    return Vocabulary(token_to_id=token_to_id, id_to_token=id_to_token,
                      counts=dict(counts), min_frequency=min_frequency)


STATIC_LABELS = ("age", "sex", "race", "bmi", "cci", "comorbidities")


def _section_priorities(report: TextReport, dictionary: FeatureDictionary) -> list:
    """Priority per section, lower = kept longer. Static sections lead."""
    by_label = {e.display_name.lower(): e.canonical_priority for e in dictionary.entries}
    fallback = max(by_label.values(), default=0) + 1
    priorities = []
    for label, _ in report.sections:
        if label in STATIC_LABELS:
            priorities.append(STATIC_LABELS.index(label) - len(STATIC_LABELS))
        else:
            priorities.append(by_label.get(label, fallback))
    return priorities


def tokenize(report: TextReport, vocab: Vocabulary, max_seq_len: int,
             dictionary: FeatureDictionary) -> TokenizedReport:
    """Encode a report; drop whole lowest-priority sections to fit."""
    priorities = _section_priorities(report, dictionary)
    keep = list(range(len(report.sections)))
    dropped = []

    def total_len(indices):
        body_tokens = sum(len(report.sections[i][1].split()) for i in indices)
        return 1 + body_tokens + max(0, len(indices) - 1)  # [CLS] + bodies + [SEP]s

    while total_len(keep) > max_seq_len:
        if not keep:
            break
        worst = max(keep, key=lambda i: priorities[i])
        keep.remove(worst)
        dropped.append(report.sections[worst][0])
    if not keep or total_len(keep) > max_seq_len:
        raise ReportError(
            f"report {report.stay_id} cannot fit max_seq_len={max_seq_len} even after drops")

    ids = [CLS]
    spans = []
    for pos, i in enumerate(keep):
        label, body = report.sections[i]
        start = len(ids)
        ids.extend(vocab.encode(t) for t in body.split())
        spans.append((label, start, len(ids)))
        if pos != len(keep) - 1:
            ids.append(SEP)
    return TokenizedReport(stay_id=report.stay_id, token_ids=tuple(ids),
                           section_spans=tuple(spans), dropped_sections=tuple(dropped))


def write_reports_jsonl(path, reports: Iterable[TextReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps({"stay_id": r.stay_id, "serialized": r.serialized,
                                 "sections": [[l, b] for l, b in r.sections]},
                                sort_keys=True) + "\n")


def read_reports_jsonl(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            out.append(TextReport(stay_id=rec["stay_id"],
                                  sections=tuple((l, b) for l, b in rec["sections"]),
                                  serialized=rec["serialized"]))
    return out


def write_vocab_csv(path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token", "id", "count"])
        for i, token in enumerate(vocab.id_to_token):
            w.writerow([token, i, vocab.counts.get(token, 0)])


def read_vocab_csv(path) -> Vocabulary:
    id_to_token = []
    counts = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            assert int(row["id"]) == len(id_to_token), "vocab ids must be dense"
            id_to_token.append(row["token"])
            counts[row["token"]] = int(row["count"])
    token_to_id = {t: i for i, t in enumerate(id_to_token)}
    return Vocabulary(token_to_id=token_to_id, id_to_token=id_to_token,
                      counts=counts, min_frequency=0)
