"""Section-level Shapley attribution of the report classifier.

The [SEP]-delimited sections of a report are the players; the value of a
coalition is the classifier output with every other section's tokens
replaced by [MASK] (positions preserved). Exact enumeration is used up to
an exact-mode threshold; above it, uniformly random permutations estimate
each section's average marginal contribution. Per-permutation marginals
telescope, so the efficiency identity holds in both modes. Per-feature
importance is the mean absolute value across samples.
"""

from __future__ import annotations

import csv
import html
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .ehr import FeatureDictionary
from .report import MASK, STATIC_LABELS, TextReport, TokenizedReport

EXACT_SECTION_LIMIT = 12


@dataclass(frozen=True)
class SectionAttribution:
    stay_id: str
    base_value: float
    full_value: float
    per_section: tuple  # (feature_label, phi)
    mode: str
    permutations_used: Optional[int]
    dropped_sections: tuple = ()


@dataclass(frozen=True)
class AttributionReport:
    rows: tuple  # (feature_label, mean_abs_phi, rank, n_samples)
    n_samples: int
    missing_counts: dict  # feature_label -> samples where the section was absent


def mask_sections(tok: TokenizedReport, keep_set) -> np.ndarray:
    """Replace tokens of sections outside keep_set with [MASK]; specials
    and sequence length untouched."""
    n = len(tok.section_spans)
    keep = set(keep_set)
    for i in keep:
        if not 0 <= i < n:
            raise IndexError(f"section index {i} out of range for {n} sections")
    ids = np.asarray(tok.token_ids, dtype=np.int64).copy()
    for i, (_, start, end) in enumerate(tok.section_spans):
        if i not in keep:
            ids[start:end] = MASK
    return ids


def model_value_fn(model, tok: TokenizedReport, chunk_size: int = 256) -> Callable:
    """Batch value function v(S) = classifier output on the masked report."""
    from .model import forward_classify

    length = len(tok.token_ids)
    mask = np.ones((1, length), dtype=bool)

    def value_batch(id_arrays) -> np.ndarray:
        out = np.empty(len(id_arrays), dtype=np.float64)
        for start in range(0, len(id_arrays), chunk_size):
            chunk = id_arrays[start:start + chunk_size]
            ids = np.stack(chunk)
            probs = forward_classify(model, ids, np.repeat(mask, len(chunk), axis=0))
            if not np.all(np.isfinite(probs)):
                raise ValueError("non-finite model output during attribution")
            out[start:start + len(chunk)] = probs
        return out

    return value_batch


def _bit_members(bits: int, n: int) -> list:
    return [i for i in range(n) if bits >> i & 1]


class _Memo:
    """Coalition-value cache keyed by membership bitmask."""

    def __init__(self, tok: TokenizedReport, value_batch: Callable):
        self.tok = tok
        self.n = len(tok.section_spans)
        self.value_batch = value_batch
        self.values = {}

    def ensure(self, bitmasks) -> None:
        missing = sorted(set(b for b in bitmasks if b not in self.values))
        if not missing:
            return
        arrays = [mask_sections(self.tok, _bit_members(b, self.n)) for b in missing]
        for b, v in zip(missing, self.value_batch(arrays)):
            self.values[b] = float(v)

    def __getitem__(self, bits: int) -> float:
        return self.values[bits]


def _shapley_exact(memo: _Memo) -> np.ndarray:
    n = memo.n
    memo.ensure(range(1 << n))
    weights = [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
               for s in range(n)]
    phi = np.zeros(n, dtype=np.float64)
    for subset in range(1 << n):
        size = bin(subset).count("1")
        for i in range(n):
            if subset >> i & 1:
                continue
            phi[i] += weights[size] * (memo[subset | (1 << i)] - memo[subset])
    return phi


def _shapley_monte_carlo(memo: _Memo, permutations: int, seed: int) -> np.ndarray:
    n = memo.n
    rng = np.random.default_rng(seed)
    phi = np.zeros(n, dtype=np.float64)
    for _ in range(permutations):
        perm = rng.permutation(n)
        prefixes = [0]
        bits = 0
        for i in perm:
            bits |= 1 << int(i)
            prefixes.append(bits)
        memo.ensure(prefixes)
        for step, i in enumerate(perm):
            phi[int(i)] += memo[prefixes[step + 1]] - memo[prefixes[step]]
    return phi / permutations


def shapley_sections(tok: TokenizedReport, value_batch: Callable, mode: str = "auto",
                     permutations: int = 200, seed: int = 0,
                     exact_limit: int = EXACT_SECTION_LIMIT) -> SectionAttribution:
    """Shapley value per section; exact enumeration for small reports,
    permutation sampling otherwise. Deterministic given seed."""
    n = len(tok.section_spans)
    if n < 1:
        raise ValueError("report has no sections to attribute")
    if mode == "auto":
        mode = "exact" if n <= exact_limit else "monte_carlo"
    if mode not in ("exact", "monte_carlo"):
        raise ValueError(f"unknown attribution mode {mode!r}")

    memo = _Memo(tok, value_batch)
    full = (1 << n) - 1
    memo.ensure([0, full])
    if mode == "exact":
        phi = _shapley_exact(memo)
        used = None
    else:
        phi = _shapley_monte_carlo(memo, permutations, seed)
        used = permutations
    labels = [label for label, _, _ in tok.section_spans]
    return SectionAttribution(
        stay_id=tok.stay_id,
        base_value=memo[0],
        full_value=memo[full],
        per_section=tuple(zip(labels, phi.tolist())),
        mode=mode,
        permutations_used=used,
        dropped_sections=tok.dropped_sections,
    )


def aggregate_importance(attributions, dictionary: FeatureDictionary) -> AttributionReport:
    """Mean |phi| per feature across samples; sections absent from a sample
    (dropped for length) contribute 0 and are flagged in missing_counts."""
    if not attributions:
        raise ValueError("need at least one attribution")
    labels = list(STATIC_LABELS) + [e.display_name.lower()
                                    for e in dictionary.temporal_entries()]
    labels = list(dict.fromkeys(labels))
    totals = {label: 0.0 for label in labels}
    missing = {label: 0 for label in labels}
    for attr in attributions:
        seen = {}
        for label, phi in attr.per_section:
            seen[label] = abs(phi)
        for label in labels:
            if label in seen:
                totals[label] += seen[label]
            else:
                missing[label] += 1
    n = len(attributions)
    ranked = sorted(labels, key=lambda l: (-totals[l] / n, l))
    rows = tuple((label, totals[label] / n, rank + 1, n) for rank, label in enumerate(ranked))
    return AttributionReport(rows=rows, n_samples=n,
                             missing_counts={k: v for k, v in missing.items() if v})


def export_text_plot(report: TextReport, attribution: SectionAttribution) -> tuple:
    """Annotated report: red background for sections pushing the score up,
    blue for down, intensity scaled by |phi| / max |phi|. Returns the
    markup string and (section, phi) rows for the companion CSV."""
    phis = {label: phi for label, phi in attribution.per_section}
    max_abs = max((abs(p) for p in phis.values()), default=0.0)
    parts = [
        "<html><body>",
        f"<p>stay {html.escape(report.stay_id)} &mdash; "
        f"score {attribution.full_value:.3f} (baseline {attribution.base_value:.3f})</p>",
        "<p>",
    ]
    for label, body in report.sections:
        phi = phis.get(label)
        if phi is None or max_abs == 0.0:
            style = ""
        else:
            intensity = abs(phi) / max_abs
            color = (255, 0, 0) if phi > 0 else (0, 0, 255)
            style = (f' style="background-color: rgba({color[0]},{color[1]},'
                     f'{color[2]},{intensity:.3f})"')
        parts.append(f'<span{style}>{html.escape(body)}</span> ')
    parts.append("</p></body></html>")
    rows = [(label, phi) for label, phi in attribution.per_section]
    return "".join(parts), rows


def write_attribution_csv(path, attributions) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stay_id", "feature_label", "phi", "mode", "permutations"])
        for attr in attributions:
            perms = attr.permutations_used if attr.permutations_used is not None else ""
            for label, phi in attr.per_section:
                w.writerow([attr.stay_id, label, repr(phi), attr.mode, perms])


def write_importance_csv(path, report: AttributionReport) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature_label", "mean_abs_phi", "rank", "n_samples"])
        for label, mean_abs, rank, n in report.rows:
            w.writerow([label, repr(mean_abs), rank, n])


def read_importance_csv(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((row["feature_label"], float(row["mean_abs_phi"]),
                         int(row["rank"]), int(row["n_samples"])))
    return rows
