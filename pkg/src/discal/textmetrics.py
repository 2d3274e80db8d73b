"""Exact summary-quality metrics and calibrated candidate ranking.

All metrics operate on token-id sequences from the shared tokenizer. N-grams
are contiguous windows of token ids; there is no stemming or stopword
handling, so values are exact and deterministic but not comparable to any
particular ROUGE toolkit.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

TokenSequence = Sequence[int]


def _ngram_counts(tokens: TokenSequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n_f1(candidate: TokenSequence, reference: TokenSequence, n: int) -> float:
    """F1 of clipped n-gram overlap; 0 when either side has fewer than n tokens."""
    if n < 1:
        raise ValueError("n must be a positive integer")
    if len(candidate) < n or len(reference) < n:
        return 0.0
    cand_counts = _ngram_counts(candidate, n)
    ref_counts = _ngram_counts(reference, n)
    overlap = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
    if overlap == 0:
        return 0.0
    precision = overlap / (len(candidate) - n + 1)
    recall = overlap / (len(reference) - n + 1)
    return 2.0 * precision * recall / (precision + recall)


def lcs_length(a: TokenSequence, b: TokenSequence) -> int:
    """Longest common subsequence length, O(|a|*|b|) dynamic programming."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                curr.append(prev[j - 1] + 1)
            else:
                curr.append(max(prev[j], curr[-1]))
        prev = curr
    return prev[-1]


def rouge_l_f1(candidate: TokenSequence, reference: TokenSequence) -> float:
    """F1 from the whole-sequence LCS length; 0 when either side is empty."""
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return 2.0 * precision * recall / (precision + recall)


def novel_ngram_ratio(summary: TokenSequence, document: TokenSequence, n: int) -> float:
    """Fraction of summary n-gram positions not occurring contiguously in the document.

    A summary shorter than n tokens scores 0, not 1, so degenerate short
    outputs are never rewarded as abstractive.
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    if len(summary) < n:
        return 0.0
    document_grams = {tuple(document[i : i + n]) for i in range(len(document) - n + 1)}
    positions = len(summary) - n + 1
    novel = sum(1 for i in range(positions) if tuple(summary[i : i + n]) not in document_grams)
    return novel / positions


def informativeness(candidate: TokenSequence, gold: TokenSequence) -> float:
    """Mean of ROUGE-1, ROUGE-2, and ROUGE-L F1 against the gold summary."""
    if not gold:
        raise ValueError("gold summary must be nonempty")
    return (
        rouge_n_f1(candidate, gold, 1)
        + rouge_n_f1(candidate, gold, 2)
        + rouge_l_f1(candidate, gold)
    ) / 3.0


def abstractiveness(candidate: TokenSequence, document: TokenSequence) -> float:
    """Mean of novel 1-gram, 3-gram, and 5-gram ratios against the document."""
    if not document:
        raise ValueError("document must be nonempty")
    return sum(novel_ngram_ratio(candidate, document, n) for n in (1, 3, 5)) / 3.0


@dataclass
class ScoredSummary:
    summary: list[int]
    s_info: float
    s_abs: float
    s_calib: float
    rank: int
    student_logprob: float | None = None


@dataclass
class RankedSummaryList:
    """Candidates ordered ascending by s_calib; the last entry is the best."""

    entries: list[ScoredSummary]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def best(self) -> ScoredSummary:
        return self.entries[-1]


def _normalized(scores: list[float]) -> list[float]:
    total = sum(scores)
    if total == 0.0:
        return [1.0 / len(scores)] * len(scores)
    return [s / total for s in scores]


def rank_candidates(
    candidates: Sequence[TokenSequence],
    info_scores: Sequence[float],
    abs_scores: Sequence[float],
    lam: float,
) -> RankedSummaryList:
    """Combine pre-computed raw scores into calibration scores and rank.

    Each score family is normalized by its sum over the candidate set (uniform
    1/n when the sum is zero), then blended: s_calib = (1-lam)*info + lam*abs.
    Ties sort by original candidate index, earlier index ranking worse.
    """
    if not candidates:
        raise ValueError("candidate list must be nonempty")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must be in [0, 1]")
    if len(info_scores) != len(candidates) or len(abs_scores) != len(candidates):
        raise ValueError("score lists must match the candidate list length")
    norm_info = _normalized(list(info_scores))
    norm_abs = _normalized(list(abs_scores))
    calib = [(1.0 - lam) * i + lam * a for i, a in zip(norm_info, norm_abs)]
    order = sorted(range(len(candidates)), key=lambda idx: (calib[idx], idx))
    entries = [
        ScoredSummary(
            summary=list(candidates[idx]),
            s_info=info_scores[idx],
            s_abs=abs_scores[idx],
            s_calib=calib[idx],
            rank=position,
        )
        for position, idx in enumerate(order, start=1)
    ]
    return RankedSummaryList(entries=entries)


def calibration_scores(
    candidates: Sequence[TokenSequence],
    gold: TokenSequence,
    document: TokenSequence,
    lam: float,
) -> RankedSummaryList:
    """Score and rank candidate summaries by calibrated quality."""
    if not candidates:
        raise ValueError("candidate list must be nonempty")
    if not gold or not document:
        raise ValueError("gold and document must be nonempty")
    info = [informativeness(c, gold) for c in candidates]
    abst = [abstractiveness(c, document) for c in candidates]
    return rank_candidates(candidates, info, abst, lam)
