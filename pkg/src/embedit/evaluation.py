"""Edit metrics in hidden-state space against a frozen reference encoder.

The classifier is a cosine comparison on EOS-pooled states: a test prompt's
pooled state (from the edited encoder) is labeled by whichever reference
pooled state it is closer to. Ties go to the source label, so an edit is
never credited on an exact tie. Strict specificity is the bitwise check: a
negative prompt that avoids every edited token id must produce hidden states
identical to the reference's.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .encoder import EncoderBundle
from .errors import DatasetError, DegenerateInputError, DegenerateVectorError

SOURCE = "source"
DESTINATION = "destination"


def _words(text: str) -> list[str]:
    return text.lower().split()


def contains_phrase(prompt: str, phrase: str) -> bool:
    """True when the phrase's words occur contiguously in the prompt's words."""
    p = _words(prompt)
    ph = _words(phrase)
    if not ph or len(ph) > len(p):
        return False
    return any(p[i:i + len(ph)] == ph for i in range(len(p) - len(ph) + 1))


@dataclass(frozen=True)
class EditEntry:
    """One edit plus its positive (paraphrase) and negative (unrelated) tests."""

    source: str
    destination: str
    target_word: str
    positives: tuple[tuple[str, str], ...] = ()
    negatives: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        for sv, _ in self.positives:
            if not contains_phrase(sv, self.target_word):
                raise DatasetError(
                    f"entry {self.target_word!r}: positive {sv!r} lacks the target word"
                )
        for sn, _ in self.negatives:
            if contains_phrase(sn, self.target_word):
                raise DatasetError(
                    f"entry {self.target_word!r}: negative {sn!r} contains the target word"
                )

    @classmethod
    def from_json(cls, obj: dict) -> "EditEntry":
        try:
            return cls(
                source=obj["source"],
                destination=obj["destination"],
                target_word=obj["target_word"],
                positives=tuple((a, b) for a, b in obj.get("positives", [])),
                negatives=tuple((a, b) for a, b in obj.get("negatives", [])),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"bad edit entry: {e}") from e

    def to_json(self) -> dict:
        return {
            "source": self.source,
            "destination": self.destination,
            "target_word": self.target_word,
            "positives": [list(p) for p in self.positives],
            "negatives": [list(n) for n in self.negatives],
        }


@dataclass(frozen=True)
class GenderEntry:
    profession: str
    validation: str
    tests: tuple[str, ...]
    female_ref: str
    male_ref: str

    def __post_init__(self):
        for t in self.tests:
            if not contains_phrase(t, self.profession):
                raise DatasetError(
                    f"gender entry {self.profession!r}: test {t!r} lacks the profession"
                )

    @classmethod
    def from_json(cls, obj: dict) -> "GenderEntry":
        try:
            return cls(
                profession=obj["profession"],
                validation=obj["validation"],
                tests=tuple(obj["tests"]),
                female_ref=obj["female_ref"],
                male_ref=obj["male_ref"],
            )
        except (KeyError, TypeError) as e:
            raise DatasetError(f"bad gender entry: {e}") from e

    def to_json(self) -> dict:
        return {
            "profession": self.profession,
            "validation": self.validation,
            "tests": list(self.tests),
            "female_ref": self.female_ref,
            "male_ref": self.male_ref,
        }


def load_edit_entries(path: str | Path) -> list[EditEntry]:
    """Read a JSONL file, one EditEntry per line."""
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(EditEntry.from_json(json.loads(line)))
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {line_no}: invalid JSON: {e}") from e
    return entries


def load_gender_entries(path: str | Path) -> list[GenderEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(GenderEntry.from_json(json.loads(line)))
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {line_no}: invalid JSON: {e}") from e
    return entries


def _vec(v) -> np.ndarray:
    return v.array if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    nb = float(np.linalg.norm(b))
    if nb == 0.0:
        return 0.0
    na = float(np.linalg.norm(a))
    return float(a @ b) / (na * nb)


def classify(pooled_test, pooled_src_ref, pooled_dst_ref) -> str:
    """Label a pooled state by cosine proximity to the two reference states.

    Returns DESTINATION only when strictly closer to the destination
    reference; exact ties fall back to SOURCE.
    """
    t = _vec(pooled_test)
    s = _vec(pooled_src_ref)
    d = _vec(pooled_dst_ref)
    if t.shape != s.shape or t.shape != d.shape:
        raise DegenerateInputError(
            f"vector widths differ: {t.shape}, {s.shape}, {d.shape}"
        )
    if np.linalg.norm(s) == 0.0 and np.linalg.norm(d) == 0.0:
        raise DegenerateInputError("both reference vectors are zero")
    if np.linalg.norm(t) == 0.0:
        raise DegenerateVectorError("test vector has zero norm")
    return DESTINATION if _cosine(t, d) > _cosine(t, s) else SOURCE


@dataclass
class MetricReport:
    efficacy: float
    efficacy_se: float
    generality: float
    generality_se: float
    specificity: float
    specificity_se: float
    strict_specificity: float
    counts: dict[str, tuple[int, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "efficacy": self.efficacy,
            "efficacy_se": self.efficacy_se,
            "generality": self.generality,
            "generality_se": self.generality_se,
            "specificity": self.specificity,
            "specificity_se": self.specificity_se,
            "strict_specificity": self.strict_specificity,
            "counts": {k: list(v) for k, v in self.counts.items()},
        }


def _pct(outcomes: list[bool]) -> tuple[float, float]:
    """Percentage of successes and its standard error (population std / sqrt n)."""
    if not outcomes:
        return 0.0, 0.0
    arr = 100.0 * np.array(outcomes, dtype=np.float64)
    return float(arr.mean()), float(arr.std() / np.sqrt(len(arr)))


def evaluate_edit(
    entry: EditEntry,
    edited: EncoderBundle,
    reference: EncoderBundle,
) -> MetricReport:
    """Score one entry. The reference bundle must be the pre-edit encoder.

    Efficacy: the edited source prompt classifies as the destination.
    Generality: same test per positive pair. Specificity: each negative must
    still classify as its own source. Strict specificity: each negative's
    hidden states must match the reference's bitwise.
    """
    def edited_pooled(prompt):
        return edited.encode_prompt(prompt).pooled

    def ref_pooled(prompt):
        return reference.encode_prompt(prompt).pooled

    eff = [
        classify(edited_pooled(entry.source), ref_pooled(entry.source),
                 ref_pooled(entry.destination)) == DESTINATION
    ]
    gen = [
        classify(edited_pooled(sv), ref_pooled(sv), ref_pooled(dv)) == DESTINATION
        for sv, dv in entry.positives
    ]
    spec = [
        classify(edited_pooled(sn), ref_pooled(sn), ref_pooled(dn)) == SOURCE
        for sn, dn in entry.negatives
    ]
    strict = [
        edited.encode_prompt(sn).sequence.array.tobytes()
        == reference.encode_prompt(sn).sequence.array.tobytes()
        for sn, _ in entry.negatives
    ]

    e_pct, e_se = _pct(eff)
    g_pct, g_se = _pct(gen)
    s_pct, s_se = _pct(spec)
    strict_pct, _ = _pct(strict)
    return MetricReport(
        efficacy=e_pct, efficacy_se=e_se,
        generality=g_pct, generality_se=g_se,
        specificity=s_pct, specificity_se=s_se,
        strict_specificity=strict_pct,
        counts={
            "efficacy": (sum(eff), len(eff)),
            "generality": (sum(gen), len(gen)),
            "specificity": (sum(spec), len(spec)),
            "strict_specificity": (sum(strict), len(strict)),
        },
    )


def aggregate_reports(reports: list[MetricReport]) -> MetricReport:
    """Dataset-level report: mean over entries, standard error over entries.

    An entry with no prompts in some bucket (for example, every negative was
    removed by the sequential filter) does not contribute to that bucket's
    mean.
    """
    if not reports:
        raise DatasetError("no reports to aggregate")

    def mean_se(key: str, values: list[float]) -> tuple[float, float]:
        scored = [
            v for v, r in zip(values, reports) if r.counts.get(key, (0, 1))[1] > 0
        ]
        if not scored:
            return 0.0, 0.0
        arr = np.array(scored)
        return float(arr.mean()), float(arr.std() / np.sqrt(len(arr)))

    e, e_se = mean_se("efficacy", [r.efficacy for r in reports])
    g, g_se = mean_se("generality", [r.generality for r in reports])
    s, s_se = mean_se("specificity", [r.specificity for r in reports])
    strict, _ = mean_se("strict_specificity", [r.strict_specificity for r in reports])
    counts: dict[str, tuple[int, int]] = {}
    for key in ("efficacy", "generality", "specificity", "strict_specificity"):
        succ = sum(r.counts.get(key, (0, 0))[0] for r in reports)
        tot = sum(r.counts.get(key, (0, 0))[1] for r in reports)
        counts[key] = (succ, tot)
    return MetricReport(
        efficacy=e, efficacy_se=e_se,
        generality=g, generality_se=g_se,
        specificity=s, specificity_se=s_se,
        strict_specificity=strict,
        counts=counts,
    )


def filter_sequential_dataset(
    entries: list[EditEntry],
    excluded_targets: tuple[str, ...] = (),
) -> list[EditEntry]:
    """Prepare entries for sequential editing.

    Entries whose target is on the exclusion list are dropped entirely.
    Then, any negative whose source prompt contains another kept entry's
    target word is removed: once that other target is edited too, the prompt
    is no longer a valid unchanged-ness test. Idempotent.
    """
    excluded = {t.lower() for t in excluded_targets}
    kept = [e for e in entries if e.target_word.lower() not in excluded]
    targets = [e.target_word for e in kept]
    out = []
    for k, entry in enumerate(kept):
        others = [t for j, t in enumerate(targets) if j != k]
        negatives = tuple(
            (sn, dn)
            for sn, dn in entry.negatives
            if not any(contains_phrase(sn, t) for t in others)
        )
        out.append(EditEntry(
            source=entry.source,
            destination=entry.destination,
            target_word=entry.target_word,
            positives=entry.positives,
            negatives=negatives,
        ))
    return out


def female_percentage(
    entry: GenderEntry,
    edited: EncoderBundle,
    reference: EncoderBundle,
    samples_per_prompt: int = 1,
) -> float:
    """Percentage of test prompts whose edited pooled state classifies as the
    female reference. Deterministic, so samples_per_prompt > 1 repeats the
    same outcome unless the caller perturbs the encoder between calls.
    """
    if samples_per_prompt < 1:
        raise ValueError("samples_per_prompt must be >= 1")
    f_ref = reference.encode_prompt(entry.female_ref).pooled
    m_ref = reference.encode_prompt(entry.male_ref).pooled
    female = 0
    total = 0
    for prompt in entry.tests:
        pooled = edited.encode_prompt(prompt).pooled
        for _ in range(samples_per_prompt):
            total += 1
            if classify(pooled, m_ref, f_ref) == DESTINATION:
                female += 1
    if total == 0:
        raise DatasetError(f"gender entry {entry.profession!r} has no test prompts")
    return 100.0 * female / total


def gender_delta(f_values: list[float]) -> float:
    """Mean over professions of |F_p - 50| / 50."""
    if not f_values:
        raise DatasetError("no F_p values")
    arr = np.array(f_values, dtype=np.float64)
    return float(np.mean(np.abs(arr - 50.0) / 50.0))
