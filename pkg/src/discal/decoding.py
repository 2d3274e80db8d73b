"""Beam search, Hamming-diversity beam search, and pseudo-summary generation.

The searcher runs every group to the full horizon and collects every
end-marker candidate, so with a wide enough beam its result is exactly the
best sequence under the final scoring formula (enumeration-equivalent), not
just heuristically close. Diversity penalties bias token selection only;
stored cumulative log-probabilities are always recomputable from the model.

Any object with a ``vocab_size`` attribute and a
``next_logprobs(document, prefixes, scale) -> (len(prefixes), vocab_size)``
method can be decoded; Seq2SeqModel instances get a fast path that encodes
the document once.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import torch
from torch.nn import functional as F

from .corpus import BOS_ID, EOS_ID, PAD_ID
from .seq2seq import AttentionScale, Seq2SeqModel, UNIT_SCALE, sample_attention_scale

TokenSequence = Sequence[int]


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 6
    num_groups: int = 1
    diversity_strength: float = 0.5
    length_penalty: float = 1.0
    min_length: int = 4
    max_length: int = 24

    def validate(self) -> None:
        if self.beam_size < 1 or self.num_groups < 1:
            raise ValueError("beam_size and num_groups must be positive")
        if self.beam_size % self.num_groups != 0:
            raise ValueError("beam_size must be divisible by num_groups")
        if self.diversity_strength < 0:
            raise ValueError("diversity_strength must be non-negative")
        if self.min_length < 1:
            raise ValueError("min_length must be positive")
        if self.min_length > self.max_length:
            raise ValueError("min_length must not exceed max_length")


@dataclass
class BeamHypothesis:
    """tokens include the end marker when the hypothesis finished naturally."""

    tokens: list[int]
    cumulative_logprob: float
    finished: bool
    forced_finish: bool = False

    def score(self, length_penalty: float) -> float:
        return self.cumulative_logprob / len(self.tokens) ** length_penalty


@dataclass
class PseudoSummarySet:
    summaries: list[list[int]]
    scale_used: AttentionScale
    document_id: str = ""
    degenerate: bool = False


def _make_stepper(model, document: TokenSequence, scale: AttentionScale):
    """Returns (step_fn, vocab_size); step_fn maps equal-length prefixes to
    next-token log-probabilities of shape (len(prefixes), vocab_size)."""
    if isinstance(model, Seq2SeqModel):
        model.eval()
        src = torch.tensor([list(document)], dtype=torch.long)
        with torch.no_grad():
            memory = model.encode(src, None, scale)

        def step(prefixes: list[list[int]]) -> torch.Tensor:
            tgt = torch.tensor([[BOS_ID] + p for p in prefixes], dtype=torch.long)
            with torch.no_grad():
                logits = model.decode_logits(memory.expand(len(prefixes), -1, -1), None, tgt, scale)
            return F.log_softmax(logits[:, -1, :], dim=-1)

        return step, model.config.vocab_size

    def step(prefixes: list[list[int]]) -> torch.Tensor:
        return model.next_logprobs(document, prefixes, scale)

    return step, model.vocab_size


@dataclass
class _Group:
    width: int
    active: list[tuple[list[int], float]] = field(default_factory=list)
    finished: list[BeamHypothesis] = field(default_factory=list)


def _search(model, document: TokenSequence, config: DecodeConfig, scale: AttentionScale) -> list[_Group]:
    config.validate()
    if isinstance(model, Seq2SeqModel) and config.max_length + 1 > model.config.max_positions:
        raise ValueError("max_length exceeds the model's max_positions budget")
    step_fn, vocab_size = _make_stepper(model, document, scale)
    width = config.beam_size // config.num_groups
    groups = [_Group(width=width, active=[([], 0.0)]) for _ in range(config.num_groups)]

    for step in range(config.max_length):
        all_prefixes = [tokens for group in groups for tokens, _ in group.active]
        if not all_prefixes:
            break
        logprobs = step_fn(all_prefixes)
        if logprobs.shape != (len(all_prefixes), vocab_size):
            raise ValueError("model returned log-probabilities of the wrong shape")
        logprobs = logprobs.to(torch.float64)

        step_counts: Counter[int] = Counter()
        row = 0
        for group_index, group in enumerate(groups):
            rows = logprobs[row : row + len(group.active)]
            row += len(group.active)
            if not group.active:
                continue
            cums = torch.tensor([c for _, c in group.active], dtype=torch.float64)
            selection = rows + cums[:, None]
            selection[:, PAD_ID] = float("-inf")
            selection[:, BOS_ID] = float("-inf")
            if step < config.min_length:
                selection[:, EOS_ID] = float("-inf")
            if group_index > 0 and config.diversity_strength > 0:
                for token, count in step_counts.items():
                    selection[:, token] -= config.diversity_strength * count

            # The end marker competes for the width slots; selecting it
            # finalizes that hypothesis and consumes its slot, so a width-1
            # beam reduces exactly to greedy decoding.
            flat = selection.view(-1)
            keep = min(group.width, int(torch.isfinite(flat).sum().item()))
            top = torch.topk(flat, keep)
            new_active = []
            for flat_index in top.indices.tolist():
                beam_index, token = divmod(flat_index, vocab_size)
                tokens, cum = group.active[beam_index]
                cum = cum + rows[beam_index, token].item()
                if token == EOS_ID:
                    group.finished.append(
                        BeamHypothesis(tokens=tokens + [EOS_ID], cumulative_logprob=cum, finished=True)
                    )
                else:
                    new_active.append((tokens + [token], cum))
                step_counts[token] += 1
            group.active = new_active

    # Anything still active hits the horizon; it finishes without the marker.
    for group in groups:
        for tokens, cum in group.active:
            group.finished.append(
                BeamHypothesis(tokens=tokens, cumulative_logprob=cum, finished=True, forced_finish=True)
            )
        group.active = []
    return groups


def _best_of(group: _Group, length_penalty: float) -> list[BeamHypothesis]:
    """Ranked hypotheses for one group; natural finishes outrank forced ones."""
    natural = [h for h in group.finished if not h.forced_finish]
    pool = natural if natural else group.finished
    return sorted(pool, key=lambda h: -h.score(length_penalty))


def beam_search(
    model,
    document: TokenSequence,
    config: DecodeConfig,
    scale: AttentionScale = UNIT_SCALE,
) -> list[BeamHypothesis]:
    """Standard beam search; hypotheses come back best first."""
    if config.num_groups != 1:
        raise ValueError("beam_search requires num_groups = 1")
    groups = _search(model, document, config, scale)
    ranked = _best_of(groups[0], config.length_penalty)
    return ranked[: config.beam_size]


def strip_end_marker(tokens: Sequence[int]) -> list[int]:
    out = list(tokens)
    if out and out[-1] == EOS_ID:
        out.pop()
    return out


def diverse_beam_search(
    model,
    document: TokenSequence,
    config: DecodeConfig,
    scale: AttentionScale = UNIT_SCALE,
    document_id: str = "",
) -> PseudoSummarySet:
    """One summary per group, produced under Hamming-diversity selection."""
    groups = _search(model, document, config, scale)
    summaries = []
    for group in groups:
        best = _best_of(group, config.length_penalty)[0]
        summaries.append(strip_end_marker(best.tokens))
    return PseudoSummarySet(summaries=summaries, scale_used=scale, document_id=document_id)


def generate_pseudo_summaries(
    teacher,
    document: TokenSequence,
    n: int,
    gamma: float,
    config: DecodeConfig,
    rng,
    document_id: str = "",
) -> PseudoSummarySet:
    """Draw one attention scale from U(1, gamma) and emit n diverse summaries.

    Exact duplicates are removed (keeping first emission order); a result with
    fewer than two distinct summaries is flagged degenerate so the distiller
    can skip its ranking loss.
    """
    if n < 1:
        raise ValueError("n must be positive")
    scale = sample_attention_scale(gamma, rng)
    group_config = replace(config, num_groups=n, beam_size=max(config.beam_size, n))
    if group_config.beam_size % n != 0:
        group_config = replace(group_config, beam_size=n * ((group_config.beam_size + n - 1) // n))
    result = diverse_beam_search(teacher, document, group_config, scale, document_id)
    unique: list[list[int]] = []
    for summary in result.summaries:
        if summary not in unique:
            unique.append(summary)
    return PseudoSummarySet(
        summaries=unique,
        scale_used=scale,
        document_id=document_id,
        degenerate=len(unique) < 2,
    )
