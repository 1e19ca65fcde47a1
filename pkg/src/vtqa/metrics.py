"""Scoring: edit distance, ANLS, VQA accuracy, and token-length accounting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def levenshtein(a: str, b: str) -> int:
    """Minimal edit distance under unit-cost insert/delete/substitute."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[len(b)]


def anls(pred: str, references: Sequence[str], tau: float = 0.5) -> float:
    """Thresholded normalized Levenshtein similarity, best over references.

    Similarity is 1 - NL when NL < tau and 0 otherwise, with
    NL = distance / max(len). Two empty strings score 1 by convention.
    """
    if not references:
        raise ValueError("references must be nonempty")
    pred = _normalize(pred)
    best = 0.0
    for ref in references:
        ref = _normalize(ref)
        longest = max(len(pred), len(ref))
        nl = levenshtein(pred, ref) / longest if longest else 0.0
        sim = 1.0 - nl if nl < tau else 0.0
        best = max(best, sim)
    return best


def vqa_accuracy(pred: str, references: Sequence[str]) -> float:
    """Exact match against a single reference; min(matches / 3, 1) when the
    references are a multi-annotator list."""
    if not references:
        raise ValueError("references must be nonempty")
    pred = _normalize(pred)
    refs = [_normalize(r) for r in references]
    if len(refs) == 1:
        return float(pred == refs[0])
    return min(sum(r == pred for r in refs) / 3.0, 1.0)


@dataclass
class EvalRecord:
    question_id: str
    prediction: str
    references: list[str]

    def __post_init__(self):
        if not self.references:
            raise ValueError("references must be nonempty")
        self.prediction = _normalize(self.prediction)
        self.references = [_normalize(r) for r in self.references]


def score_records(records: Sequence[EvalRecord], tau: float = 0.5) -> dict[str, float]:
    """Corpus-level accuracy and ANLS (means over questions)."""
    if not records:
        raise ValueError("no records to score")
    acc = sum(vqa_accuracy(r.prediction, r.references) for r in records) / len(records)
    sim = sum(anls(r.prediction, r.references, tau) for r in records) / len(records)
    return {"accuracy": acc, "anls": sim}


@dataclass
class TokenLengthReport:
    """Instance-token footprint of the QA encoder input, with aggregation
    versus one pseudo-instance per raw frame-level observation."""

    with_counts: list[int]
    without_counts: list[int]

    @property
    def mean_with(self) -> float:
        return sum(self.with_counts) / len(self.with_counts)

    @property
    def mean_without(self) -> float:
        return sum(self.without_counts) / len(self.without_counts)

    @property
    def ratio(self) -> float:
        return self.mean_without / self.mean_with if self.mean_with > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "token_mean_with": self.mean_with,
            "token_mean_without": self.mean_without,
            "token_ratio": self.ratio,
        }


def token_length_report(samples, vocab, gather_predictions: Mapping | None = None) -> TokenLengthReport:
    """Count encoder tokens attributable to instances, per sample.

    with-mode presents each unique instance once (text from
    `gather_predictions` keyed by (sample_id, instance_index in appearance
    order), falling back to the canonical transcription). without-mode
    presents every per-frame observation as if it were an instance. The
    instance cap is bypassed: this measures footprint, not a trained model.
    """
    from .corpus import appearance_order
    from .trace import TraceModelConfig

    with_counts: list[int] = []
    without_counts: list[int] = []
    for sample in samples:
        order = appearance_order(sample.instances)
        with_items = []
        for idx, inst in enumerate(order):
            text = inst.canonical_text
            if gather_predictions is not None:
                text = gather_predictions.get((sample.id, idx), text)
            with_items.append((text, inst.trajectory()))
        without_items = []
        for inst in order:
            for obs in inst.observations:
                without_items.append(
                    (obs.ocr_text or " ", [(obs.frame, obs.box.cx, obs.box.cy)])
                )
        config = TraceModelConfig(max_instances=max(len(without_items), len(with_items), 1))
        with_counts.append(_instance_token_count(with_items, config, vocab))
        without_counts.append(_instance_token_count(without_items, config, vocab))
    return TokenLengthReport(with_counts=with_counts, without_counts=without_counts)


def _instance_token_count(items, config, vocab) -> int:
    from .trace import build_encoder_input

    if not items:
        return 0
    enc = build_encoder_input("q", items, config, vocab)
    return sum(1 for inst in enc.instance_of_token if inst is not None)
