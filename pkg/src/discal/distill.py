"""Training objectives, teacher training, distillation methods, evaluation.

Five training regimes share one loop: supervised fine-tuning on gold
summaries, sequence-level distillation on a single teacher beam, the same
under a fixed attention temperature, calibrated distillation over ranked
diverse pseudo summaries regenerated every step, and self-calibrated
distillation where the student's own snapshot plays the teacher.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import torch
from torch.nn import functional as F

from .corpus import BOS_ID, EOS_ID, PAD_ID, CorpusExample
from .decoding import DecodeConfig, PseudoSummarySet, beam_search, generate_pseudo_summaries, strip_end_marker
from .rng import derive_rng, derive_seed
from .seq2seq import (
    AttentionScale,
    GradientSet,
    Seq2SeqModel,
    UNIT_SCALE,
    adam_step,
    backward,
    init_adam_state,
    init_student_from_teacher,
)
from .textmetrics import (
    RankedSummaryList,
    calibration_scores,
    novel_ngram_ratio,
    rouge_l_f1,
    rouge_n_f1,
)

logger = logging.getLogger(__name__)

TokenSequence = Sequence[int]

SFT = "sft"
SEQ_DISTIL = "seq_distil"
PLATE = "plate"
DISCAL = "discal"
DISCAL_SELF = "discal_self"
_METHOD_NAMES = (SFT, SEQ_DISTIL, PLATE, DISCAL, DISCAL_SELF)


@dataclass(frozen=True)
class MethodKind:
    """A distillation method; PLATE carries its fixed attention temperature."""

    name: str
    plate_temperature: float | None = None

    def __post_init__(self) -> None:
        if self.name not in _METHOD_NAMES:
            raise ValueError(f"unknown method {self.name!r}; expected one of {_METHOD_NAMES}")
        if self.name == PLATE:
            if self.plate_temperature is None or self.plate_temperature < 1.0:
                raise ValueError("plate requires a fixed temperature k >= 1")
        elif self.plate_temperature is not None:
            raise ValueError(f"{self.name} does not take a temperature")


def plate(temperature: float) -> MethodKind:
    return MethodKind(PLATE, plate_temperature=temperature)


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 0.2
    gamma: float = 2.0
    # eta below ~1 lets the ranking loss overwhelm the NLL anchor at this
    # model scale and the student degenerates; 5.0 holds fluency
    eta: float = 5.0
    n: int = 6
    margin_m: float = 0.001
    alpha: float = 1.0
    label_smoothing: float = 0.1
    steps: int = 600
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 13
    literal_hinge: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.gamma < 1.0:
            raise ValueError("gamma must be >= 1")
        if self.eta < 0.0:
            raise ValueError("eta must be non-negative")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.margin_m < 0.0:
            raise ValueError("margin_m must be non-negative")
        if self.alpha < 0.0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")


def _padded_batch_logprobs(
    model: Seq2SeqModel,
    documents: list[list[int]],
    targets: list[list[int]],
    scale: AttentionScale = UNIT_SCALE,
) -> torch.Tensor:
    """Log-probability rows for each (document, target) pair, padded.

    Row t of example i is the distribution for position t given the begin
    marker and target[:t]. Shape (batch, max_target_len + 1, vocab)."""
    batch = len(documents)
    src_len = max(len(d) for d in documents)
    tgt_len = max(len(t) for t in targets) + 1
    src = torch.full((batch, src_len), PAD_ID, dtype=torch.long)
    src_pad = torch.ones(batch, src_len, dtype=torch.bool)
    dec_in = torch.full((batch, tgt_len), PAD_ID, dtype=torch.long)
    for i, (document, target) in enumerate(zip(documents, targets)):
        src[i, : len(document)] = torch.tensor(document, dtype=torch.long)
        src_pad[i, : len(document)] = False
        dec_in[i, 0] = BOS_ID
        if target:
            dec_in[i, 1 : len(target) + 1] = torch.tensor(target, dtype=torch.long)
    logits = model.forward_batch(src, src_pad, dec_in, scale)
    return F.log_softmax(logits, dim=-1)


def _nll_from_rows(logprobs: torch.Tensor, target: list[int], smoothing: float) -> torch.Tensor:
    """Mean smoothed cross-entropy over the target tokens plus the end marker."""
    scored = list(target) + [EOS_ID]
    rows = logprobs[: len(scored)]
    gold = rows[torch.arange(len(scored)), torch.tensor(scored, dtype=torch.long)]
    loss = -gold
    if smoothing > 0.0:
        loss = (1.0 - smoothing) * loss - smoothing * rows.mean(dim=-1)
    return loss.mean()


def nll_loss(
    model: Seq2SeqModel,
    document: TokenSequence,
    target: TokenSequence,
    smoothing: float = 0.0,
) -> torch.Tensor:
    """Mean negative log-likelihood of the target sequence and its end marker."""
    if not target:
        raise ValueError("target must be nonempty")
    logprobs = _padded_batch_logprobs(model, [list(document)], [list(target)])
    return _nll_from_rows(logprobs[0], list(target), smoothing)


def batch_nll_loss(
    model: Seq2SeqModel,
    pairs: list[tuple[list[int], list[int]]],
    smoothing: float,
) -> torch.Tensor:
    documents = [d for d, _ in pairs]
    targets = [t for _, t in pairs]
    logprobs = _padded_batch_logprobs(model, documents, targets)
    losses = [_nll_from_rows(logprobs[i], targets[i], smoothing) for i in range(len(pairs))]
    return torch.stack(losses).mean()


def _candidate_logprob_rows(
    model: Seq2SeqModel,
    document: TokenSequence,
    candidates: list[list[int]],
) -> torch.Tensor:
    """One shared encode of the document, decoded against every candidate."""
    n = len(candidates)
    src = torch.tensor([list(document)], dtype=torch.long)
    memory = model.encode(src, None, UNIT_SCALE)
    tgt_len = max(len(c) for c in candidates) + 1
    dec_in = torch.full((n, tgt_len), PAD_ID, dtype=torch.long)
    dec_in[:, 0] = BOS_ID
    for i, candidate in enumerate(candidates):
        if candidate:
            dec_in[i, 1 : len(candidate) + 1] = torch.tensor(candidate, dtype=torch.long)
    logits = model.decode_logits(memory.expand(n, -1, -1), None, dec_in, UNIT_SCALE)
    return F.log_softmax(logits, dim=-1)


def _f_from_rows(logprobs: torch.Tensor, candidate: list[int], alpha: float) -> torch.Tensor:
    rows = logprobs[: len(candidate)]
    chosen = rows[torch.arange(len(candidate)), torch.tensor(candidate, dtype=torch.long)]
    return chosen.sum() / (len(candidate) ** alpha)


def length_normalized_logprob(
    model: Seq2SeqModel,
    document: TokenSequence,
    candidate: TokenSequence,
    alpha: float,
) -> torch.Tensor:
    """f(candidate) = sum of content-token log-probs / |candidate|^alpha, at k = 1."""
    if not candidate:
        raise ValueError("candidate must be nonempty")
    logprobs = _candidate_logprob_rows(model, document, [list(candidate)])
    return _f_from_rows(logprobs[0], list(candidate), alpha)


@dataclass
class CalibrationOutcome:
    """Scalar ranking loss plus the f values it consumed (ascending rank order)."""

    loss: torch.Tensor
    skipped: bool
    f_values: list[float] = field(default_factory=list)


def calibration_loss(
    model: Seq2SeqModel,
    document: TokenSequence,
    ranked: RankedSummaryList,
    margin_m: float,
    alpha: float,
    literal_hinge: bool = False,
) -> CalibrationOutcome:
    """Margin pairwise ranking loss over a calibration-ranked candidate list.

    For every pair with ascending positions i < j (entry j the better one),
    the hinge demands f(entry_j) exceed f(entry_i) by (j - i) * margin_m.
    ``literal_hinge`` flips the inequality to the printed form of the loss,
    which penalizes the better candidate instead; it exists for comparison.
    Sets are skipped (zero loss) when fewer than two entries remain.
    """
    entries = ranked.entries
    if len(entries) < 2:
        return CalibrationOutcome(loss=torch.zeros((), dtype=torch.float64), skipped=True)
    candidates = [list(e.summary) for e in entries]
    logprobs = _candidate_logprob_rows(model, document, candidates)
    f_values = [_f_from_rows(logprobs[i], candidates[i], alpha) for i in range(len(candidates))]
    for entry, f_value in zip(entries, f_values):
        entry.student_logprob = float(f_value.detach())
    total = None
    for i in range(len(entries)):
        for j in range(i + 1, len(entries)):
            margin = (j - i) * margin_m
            if literal_hinge:
                hinge = torch.clamp(f_values[j] - f_values[i] + margin, min=0.0)
            else:
                hinge = torch.clamp(f_values[i] - f_values[j] + margin, min=0.0)
            total = hinge if total is None else total + hinge
    return CalibrationOutcome(
        loss=total,
        skipped=False,
        f_values=[float(f.detach()) for f in f_values],
    )


@dataclass
class DiscalDiagnostics:
    ranked: RankedSummaryList | None
    nll: float
    calibration: float
    skipped: bool
    best_summary: list[int] = field(default_factory=list)


def discal_loss(
    model: Seq2SeqModel,
    document: TokenSequence,
    gold: TokenSequence,
    pseudo: PseudoSummarySet,
    config: DistillConfig,
) -> tuple[torch.Tensor, DiscalDiagnostics]:
    """eta * NLL on the best-ranked pseudo summary plus the ranking loss.

    The gold summary is consulted only inside calibration scoring; the NLL
    target is always a pseudo summary. A degenerate set falls back to
    eta * NLL on its single summary.
    """
    if not pseudo.summaries:
        raise ValueError("pseudo summary set is empty")
    if pseudo.degenerate or len(pseudo.summaries) < 2:
        target = pseudo.summaries[0]
        nll = nll_loss(model, document, target, config.label_smoothing)
        loss = config.eta * nll
        return loss, DiscalDiagnostics(
            ranked=None, nll=float(nll.detach()), calibration=0.0, skipped=True,
            best_summary=list(target),
        )
    ranked = calibration_scores(pseudo.summaries, gold, document, config.lam)
    best = ranked.best().summary
    nll = nll_loss(model, document, best, config.label_smoothing)
    outcome = calibration_loss(
        model, document, ranked, config.margin_m, config.alpha, config.literal_hinge
    )
    loss = config.eta * nll + outcome.loss
    return loss, DiscalDiagnostics(
        ranked=ranked,
        nll=float(nll.detach()),
        calibration=float(outcome.loss.detach()),
        skipped=False,
        best_summary=list(best),
    )


LogFn = Callable[[int, dict], None]


def _run_optimizer_loop(
    model: Seq2SeqModel,
    step_loss: Callable[[int], tuple[torch.Tensor, dict]],
    config: DistillConfig,
    log_fn: LogFn | None,
) -> Seq2SeqModel:
    state = init_adam_state(model)
    torch.manual_seed(derive_seed(config.seed, "dropout"))
    for step in range(config.steps):
        loss, metrics = step_loss(step)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {step}")
        grads: GradientSet = backward(model, loss)
        adam_step(model, grads, state, config.learning_rate, config.weight_decay)
        metrics = {"loss": float(loss.detach()), **metrics}
        if log_fn is not None:
            log_fn(step, metrics)
        if step % 100 == 0 or step == config.steps - 1:
            logger.debug("step %d loss %.4f", step, metrics["loss"])
    model.eval()
    return model


def _sample_batch(examples: list[CorpusExample], config: DistillConfig, label: str, step: int) -> list[CorpusExample]:
    rng = derive_rng(config.seed, label, step)
    if len(examples) <= config.batch_size:
        return list(examples)
    indices = rng.sample(range(len(examples)), config.batch_size)
    return [examples[i] for i in indices]


def train_teacher(
    corpus: list[CorpusExample],
    model_config,
    train_config: DistillConfig,
    log_fn: LogFn | None = None,
) -> Seq2SeqModel:
    """Train a fresh model on gold summaries with smoothed NLL."""
    if not corpus:
        raise ValueError("training corpus is empty")
    train_config.validate()
    model = Seq2SeqModel(model_config, seed=derive_seed(train_config.seed, "teacher-init"))
    model.train()

    def step_loss(step: int) -> tuple[torch.Tensor, dict]:
        batch = _sample_batch(corpus, train_config, "teacher-batch", step)
        pairs = [(ex.document, ex.gold) for ex in batch]
        return batch_nll_loss(model, pairs, train_config.label_smoothing), {}

    return _run_optimizer_loop(model, step_loss, train_config, log_fn)


def _decode_workers() -> int:
    raw = os.environ.get("DISCAL_THREADS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ValueError(f"DISCAL_THREADS must be an integer, got {raw!r}")
    if workers < 1:
        raise ValueError("DISCAL_THREADS must be at least 1")
    return workers


def _generate_for_batch(
    generator_model: Seq2SeqModel,
    batch: list[CorpusExample],
    config: DistillConfig,
    decode_config: DecodeConfig,
    epoch: int,
) -> list[PseudoSummarySet]:
    def one(ex: CorpusExample) -> PseudoSummarySet:
        rng = derive_rng(config.seed, "pseudo", epoch, ex.id)
        return generate_pseudo_summaries(
            generator_model, ex.document, config.n, config.gamma, decode_config, rng, ex.id
        )

    workers = _decode_workers()
    if workers == 1 or len(batch) == 1:
        return [one(ex) for ex in batch]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, batch))


def _single_beam_config(decode_config: DecodeConfig) -> DecodeConfig:
    return replace(decode_config, num_groups=1, beam_size=4, diversity_strength=0.0)


def default_pseudo_decode_config(n: int) -> DecodeConfig:
    return DecodeConfig(
        beam_size=n,
        num_groups=n,
        diversity_strength=0.5,
        length_penalty=0.0,
        min_length=4,
        max_length=24,
    )


def distill(
    teacher: Seq2SeqModel,
    student_init_indices: Sequence[int],
    corpus: list[CorpusExample],
    method: MethodKind,
    config: DistillConfig,
    decode_config: DecodeConfig | None = None,
    log_fn: LogFn | None = None,
    self_snapshot_every: int = 100,
    regenerate_every: int = 1,
) -> Seq2SeqModel:
    """Initialize a student from the teacher and train it under one method."""
    if not corpus:
        raise ValueError("training corpus is empty")
    config.validate()
    if regenerate_every < 1:
        raise ValueError("regenerate_every must be positive")
    if method.name == DISCAL_SELF and config.lam != 0.0:
        config = replace(config, lam=0.0)
        logger.info("self-distillation pins lam to 0")
    pseudo_config = decode_config or default_pseudo_decode_config(config.n)
    student = init_student_from_teacher(teacher, list(student_init_indices))
    student.train()
    teacher.eval()

    if method.name == SFT:

        def step_loss(step: int) -> tuple[torch.Tensor, dict]:
            batch = _sample_batch(corpus, config, "student-batch", step)
            pairs = [(ex.document, ex.gold) for ex in batch]
            return batch_nll_loss(student, pairs, config.label_smoothing), {}

        return _run_optimizer_loop(student, step_loss, config, log_fn)

    if method.name in (SEQ_DISTIL, PLATE):
        scale = UNIT_SCALE if method.name == SEQ_DISTIL else AttentionScale(method.plate_temperature)
        beam_config = _single_beam_config(pseudo_config)
        cache: dict[str, list[int]] = {}

        def pseudo_target(ex: CorpusExample) -> list[int]:
            if ex.id not in cache:
                best = beam_search(teacher, ex.document, beam_config, scale)[0]
                cache[ex.id] = strip_end_marker(best.tokens)
            return cache[ex.id]

        def step_loss(step: int) -> tuple[torch.Tensor, dict]:
            batch = _sample_batch(corpus, config, "student-batch", step)
            pairs = [(ex.document, pseudo_target(ex)) for ex in batch]
            return batch_nll_loss(student, pairs, config.label_smoothing), {}

        return _run_optimizer_loop(student, step_loss, config, log_fn)

    if method.name in (DISCAL, DISCAL_SELF):
        snapshot = copy.deepcopy(student).eval() if method.name == DISCAL_SELF else None

        def step_loss(step: int) -> tuple[torch.Tensor, dict]:
            nonlocal snapshot
            if method.name == DISCAL_SELF and step > 0 and step % self_snapshot_every == 0:
                snapshot = copy.deepcopy(student).eval()
            generator_model = snapshot if snapshot is not None else teacher
            batch = _sample_batch(corpus, config, "student-batch", step)
            epoch = step // regenerate_every
            pseudo_sets = _generate_for_batch(generator_model, batch, config, pseudo_config, epoch)
            losses = []
            best_calibs = []
            skipped = 0
            for ex, pseudo in zip(batch, pseudo_sets):
                loss, diag = discal_loss(student, ex.document, ex.gold, pseudo, config)
                losses.append(loss)
                if diag.skipped:
                    skipped += 1
                else:
                    best_calibs.append(diag.ranked.best().s_calib)
            if skipped:
                logger.debug("step %d: %d degenerate pseudo sets", step, skipped)
            metrics = {
                "degenerate": skipped,
                "mean_best_s_calib": sum(best_calibs) / len(best_calibs) if best_calibs else 0.0,
            }
            return torch.stack(losses).mean(), metrics

        return _run_optimizer_loop(student, step_loss, config, log_fn)

    raise ValueError(f"unhandled method {method.name!r}")


@dataclass
class EvalReport:
    method: str
    seed: int
    config: dict
    aggregates: dict[str, float]
    examples: list[dict]


METRIC_KEYS = ("rouge1", "rouge2", "rougeL", "novel1", "novel3", "novel5")


def corpus_digest(corpus: list[CorpusExample]) -> str:
    hasher = hashlib.sha256()
    for ex in corpus:
        hasher.update(ex.id.encode("utf-8"))
        hasher.update(bytes(str(ex.document), "utf-8"))
        hasher.update(bytes(str(ex.gold), "utf-8"))
    return hasher.hexdigest()


def evaluate(
    model: Seq2SeqModel,
    test_corpus: list[CorpusExample],
    decode_config: DecodeConfig,
    method: str = "",
    seed: int = 0,
) -> EvalReport:
    """Beam-decode every document at k = 1 and aggregate the six metrics."""
    if not test_corpus:
        raise ValueError("test corpus is empty")
    examples = []
    sums = {key: 0.0 for key in METRIC_KEYS}
    scored = 0
    for ex in test_corpus:
        try:
            best = beam_search(model, ex.document, decode_config, UNIT_SCALE)[0]
        except (ValueError, RuntimeError) as exc:
            examples.append({"id": ex.id, "error": str(exc)})
            continue
        candidate = strip_end_marker(best.tokens)
        record = {
            "id": ex.id,
            "rouge1": 100.0 * rouge_n_f1(candidate, ex.gold, 1),
            "rouge2": 100.0 * rouge_n_f1(candidate, ex.gold, 2),
            "rougeL": 100.0 * rouge_l_f1(candidate, ex.gold),
            "novel1": 100.0 * novel_ngram_ratio(candidate, ex.document, 1),
            "novel3": 100.0 * novel_ngram_ratio(candidate, ex.document, 3),
            "novel5": 100.0 * novel_ngram_ratio(candidate, ex.document, 5),
            "prediction_tokens": len(candidate),
        }
        examples.append(record)
        for key in METRIC_KEYS:
            sums[key] += record[key]
        scored += 1
    if scored == 0:
        raise RuntimeError("every document failed to decode")
    aggregates = {key: sums[key] / scored for key in METRIC_KEYS}
    model_config = getattr(model, "config", None)
    config_echo = {
        "decode": asdict(decode_config),
        "model": asdict(model_config) if model_config is not None else {},
        "corpus_digest": corpus_digest(test_corpus),
    }
    return EvalReport(
        method=method, seed=seed, config=config_echo, aggregates=aggregates, examples=examples
    )


def report_to_json(report: EvalReport) -> str:
    """Fixed key order, metric percentages rounded to two decimals."""
    payload = {
        "method": report.method,
        "seed": report.seed,
        "config": report.config,
        "aggregates": {key: round(report.aggregates[key], 2) for key in METRIC_KEYS},
        "examples": [
            {
                key: (round(value, 2) if isinstance(value, float) else value)
                for key, value in record.items()
            }
            for record in report.examples
        ],
    }
    return json.dumps(payload, ensure_ascii=False, indent=2) + "\n"


def report_from_json(text: str) -> EvalReport:
    payload = json.loads(text)
    return EvalReport(
        method=payload["method"],
        seed=payload["seed"],
        config=payload["config"],
        aggregates=dict(payload["aggregates"]),
        examples=list(payload["examples"]),
    )
