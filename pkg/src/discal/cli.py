"""Command-line driver: data generation, training, distillation, evaluation.

One JSON config file carries the synth/model/distill/decode sections; a single
--seed flag overrides every stream. Exit codes: 0 success, 1 validation
problem, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import replace
from pathlib import Path

from .corpus import (
    SynthConfig,
    Vocabulary,
    encode_corpus,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
)
from .decoding import DecodeConfig
from .distill import (
    DISCAL,
    DISCAL_SELF,
    DistillConfig,
    MethodKind,
    SEQ_DISTIL,
    SFT,
    default_pseudo_decode_config,
    distill,
    evaluate,
    plate,
    report_from_json,
    report_to_json,
    train_teacher,
)
from .distill import METRIC_KEYS
from .seq2seq import (
    CheckpointError,
    ModelConfig,
    default_decoder_indices,
    load_checkpoint,
    save_checkpoint,
)

_METHOD_FLAGS = {
    "sft": SFT,
    "seq": SEQ_DISTIL,
    "plate": "plate",
    "discal": DISCAL,
    "discal-self": DISCAL_SELF,
}


class CliError(Exception):
    """Carries the process exit code alongside the message."""

    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


@dataclasses.dataclass
class RunConfig:
    synth: SynthConfig
    model: dict
    distill: DistillConfig
    decode: DecodeConfig
    pseudo_decode: dict

    @classmethod
    def from_file(cls, path: str | None) -> "RunConfig":
        sections = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as handle:
                    sections = json.load(handle)
            except FileNotFoundError:
                raise CliError(f"config file not found: {path}")
            except json.JSONDecodeError as exc:
                raise CliError(f"config file {path} is not valid JSON: {exc}")
            if not isinstance(sections, dict):
                raise CliError(f"config file {path} must hold a JSON object")
        known = {"synth", "model", "distill", "decode", "pseudo_decode"}
        for key in sections:
            if key not in known:
                raise CliError(f"unknown config section {key!r}; expected one of {sorted(known)}")
        config = cls(
            synth=_section(SynthConfig, sections.get("synth", {}), "synth"),
            model=_check_keys(ModelConfig, sections.get("model", {}), "model"),
            distill=_section(DistillConfig, sections.get("distill", {}), "distill"),
            decode=_section(DecodeConfig, sections.get("decode", {}), "decode"),
            pseudo_decode=_check_keys(DecodeConfig, sections.get("pseudo_decode", {}), "pseudo_decode"),
        )
        try:
            config.synth.validate()
            config.distill.validate()
            config.decode.validate()
        except ValueError as exc:
            raise CliError(f"invalid config: {exc}")
        return config


def _check_keys(dataclass_type, section: dict, name: str) -> dict:
    if not isinstance(section, dict):
        raise CliError(f"config section {name!r} must be a JSON object")
    valid = {f.name for f in dataclasses.fields(dataclass_type)}
    for key in section:
        if key not in valid:
            raise CliError(f"unknown field {key!r} in config section {name!r}")
    return dict(section)


def _section(dataclass_type, section: dict, name: str):
    try:
        return dataclass_type(**_check_keys(dataclass_type, section, name))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config section {name!r}: {exc}")


def _apply_overrides(config, args, names: dict[str, str]):
    updates = {}
    for flag_dest, field_name in names.items():
        value = getattr(args, flag_dest, None)
        if value is not None:
            updates[field_name] = value
    return replace(config, **updates) if updates else config


def _require_new_path(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CliError(f"{path} already exists; pass --force to overwrite")


def _open_log(path: Path | None):
    if path is None:
        return None, None
    handle = open(path, "w", encoding="utf-8")

    def log_fn(step: int, metrics: dict) -> None:
        handle.write(json.dumps({"step": step, **metrics}) + "\n")

    return handle, log_fn


def _load_examples(path: Path, vocab: Vocabulary):
    if not path.exists():
        raise CliError(f"corpus file not found: {path}")
    return encode_corpus(load_corpus(path), vocab)


def cmd_gen_data(args) -> int:
    config = RunConfig.from_file(args.config)
    synth = config.synth if args.seed is None else replace(config.synth, seed=args.seed)
    synth.validate()
    corpus = generate_synthetic_corpus(synth)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, examples in (("train", corpus.train), ("val", corpus.val), ("test", corpus.test)):
        save_corpus(examples, out_dir / f"{split}.jsonl")
        print(f"wrote {out_dir / f'{split}.jsonl'} ({len(examples)} examples)")
    corpus.vocab.save(out_dir / "vocab.json")
    print(f"wrote {out_dir / 'vocab.json'} ({len(corpus.vocab)} tokens)")
    return 0


def _model_config(overrides: dict, vocab: Vocabulary) -> ModelConfig:
    fields = dict(overrides)
    declared = fields.pop("vocab_size", None)
    if declared is not None and declared != len(vocab):
        raise CliError(f"config vocab_size {declared} does not match vocabulary size {len(vocab)}")
    try:
        config = ModelConfig(vocab_size=len(vocab), **fields)
        config.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid model config: {exc}")
    return config


_DISTILL_FLAG_FIELDS = {
    "lam": "lam",
    "gamma": "gamma",
    "eta": "eta",
    "n": "n",
    "margin": "margin_m",
    "alpha": "alpha",
    "label_smoothing": "label_smoothing",
    "steps": "steps",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "weight_decay": "weight_decay",
    "seed": "seed",
}

_DECODE_FLAG_FIELDS = {
    "beam_size": "beam_size",
    "length_penalty": "length_penalty",
    "min_length": "min_length",
    "max_length": "max_length",
}


def cmd_train_teacher(args) -> int:
    run = RunConfig.from_file(args.config)
    train_config = _apply_overrides(run.distill, args, _DISTILL_FLAG_FIELDS)
    try:
        train_config.validate()
    except ValueError as exc:
        raise CliError(f"invalid training config: {exc}")
    out = Path(args.out)
    _require_new_path(out, args.force)
    data_dir = Path(args.data)
    vocab_path = data_dir / "vocab.json"
    if not vocab_path.exists():
        raise CliError(f"vocabulary file not found: {vocab_path}")
    vocab = Vocabulary.load(vocab_path)
    train = _load_examples(data_dir / "train.jsonl", vocab)
    model_config = _model_config(run.model, vocab)

    log_path = Path(args.log) if args.log else Path(str(out) + ".log.jsonl")
    handle, log_fn = _open_log(log_path)
    try:
        teacher = train_teacher(train, model_config, train_config, log_fn)
    finally:
        if handle is not None:
            handle.close()
    save_checkpoint(teacher, vocab, out)
    print(f"wrote {out} (loss log: {log_path})")
    return 0


def cmd_distill(args) -> int:
    run = RunConfig.from_file(args.config)
    config = _apply_overrides(run.distill, args, _DISTILL_FLAG_FIELDS)
    try:
        config.validate()
    except ValueError as exc:
        raise CliError(f"invalid distillation config: {exc}")
    method_name = _METHOD_FLAGS[args.method]
    if args.method == "plate":
        if args.temperature is None:
            raise CliError("--temperature is required with --method plate")
        method = plate(args.temperature)
    else:
        if args.temperature is not None:
            raise CliError(f"--temperature only applies to --method plate, not {args.method}")
        method = MethodKind(method_name)
    out = Path(args.out)
    _require_new_path(out, args.force)
    if not Path(args.teacher).exists():
        raise CliError(f"teacher checkpoint not found: {args.teacher}")
    teacher, vocab = load_checkpoint(args.teacher)
    train = _load_examples(Path(args.data) / "train.jsonl", vocab)

    base = default_pseudo_decode_config(config.n)
    pseudo_config = replace(base, **run.pseudo_decode) if run.pseudo_decode else base
    try:
        pseudo_config.validate()
    except ValueError as exc:
        raise CliError(f"invalid pseudo_decode config: {exc}")
    if args.student_decoder_layers < 1:
        raise CliError("--student-decoder-layers must be at least 1")
    indices = default_decoder_indices(teacher.config.decoder_layers, args.student_decoder_layers)
    log_path = Path(args.log) if args.log else Path(str(out) + ".log.jsonl")
    handle, log_fn = _open_log(log_path)
    try:
        student = distill(
            teacher,
            indices,
            train,
            method,
            config,
            decode_config=pseudo_config,
            log_fn=log_fn,
        )
    finally:
        if handle is not None:
            handle.close()
    save_checkpoint(student, vocab, out)
    print(f"wrote {out} (diagnostics log: {log_path})")
    return 0


def cmd_evaluate(args) -> int:
    run = RunConfig.from_file(args.config)
    decode = _apply_overrides(run.decode, args, _DECODE_FLAG_FIELDS)
    try:
        decode.validate()
    except ValueError as exc:
        raise CliError(f"invalid decode config: {exc}")
    model_path = Path(args.model)
    if not model_path.exists():
        raise CliError(f"model checkpoint not found: {model_path}")
    model, vocab = load_checkpoint(model_path)
    test = _load_examples(Path(args.test), vocab)
    label = args.label if args.label else model_path.stem
    report = evaluate(model, test, decode, method=label, seed=args.seed or 0)
    text = report_to_json(report)
    Path(args.report).write_text(text, encoding="utf-8")
    aggregates = "  ".join(f"{k}={report.aggregates[k]:.2f}" for k in METRIC_KEYS)
    print(f"wrote {args.report}")
    print(f"{label}: {aggregates}")
    return 0


def cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        report_path = Path(path)
        if not report_path.exists():
            raise CliError(f"report not found: {report_path}")
        try:
            reports.append(report_from_json(report_path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError) as exc:
            raise CliError(f"report {report_path} is malformed: {exc}")
    digests = {r.config.get("corpus_digest", "") for r in reports}
    if len(digests) > 1:
        print("warning: reports come from different test corpora; metrics are not comparable")
    name_width = max(len("method"), max(len(r.method) for r in reports))
    header = "method".ljust(name_width) + "".join(f"  {key:>8}" for key in METRIC_KEYS)
    print(header)
    print("-" * len(header))
    best = {
        key: max(r.aggregates[key] for r in reports) for key in METRIC_KEYS
    }
    for report in reports:
        cells = []
        for key in METRIC_KEYS:
            value = report.aggregates[key]
            mark = "*" if len(reports) > 1 and value == best[key] else " "
            cells.append(f"  {value:7.2f}{mark}")
        print(report.method.ljust(name_width) + "".join(cells))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="discal",
        description="Distill abstractive summarizers with calibrated pseudo summaries.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate the synthetic corpus splits")
    gen.add_argument("--config", help="JSON run config")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, help="override every RNG stream")
    gen.set_defaults(fn=cmd_gen_data)

    def add_train_flags(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--data", required=True, help="directory produced by gen-data")
        p.add_argument("--out", required=True, help="checkpoint output path")
        p.add_argument("--log", help="training log path (default: <out>.log.jsonl)")
        p.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--label-smoothing", dest="label_smoothing", type=float)

    teach = sub.add_parser("train-teacher", help="train the teacher on gold summaries")
    add_train_flags(teach)
    teach.set_defaults(fn=cmd_train_teacher)

    dist = sub.add_parser("distill", help="train a student under one method")
    add_train_flags(dist)
    dist.add_argument("--teacher", required=True, help="teacher checkpoint path")
    dist.add_argument("--method", required=True, choices=sorted(_METHOD_FLAGS))
    dist.add_argument("--temperature", type=float, help="fixed attention temperature for plate")
    dist.add_argument("--lambda", dest="lam", type=float, help="abstractiveness weight in [0, 1]")
    dist.add_argument("--gamma", type=float, help="upper bound of the temperature draw")
    dist.add_argument("--eta", type=float, help="weight of the NLL term")
    dist.add_argument("--n", type=int, help="pseudo summaries per document")
    dist.add_argument("--margin", type=float, help="ranking margin unit")
    dist.add_argument("--alpha", type=float, help="length-normalization exponent")
    dist.add_argument(
        "--student-decoder-layers",
        dest="student_decoder_layers",
        type=int,
        default=1,
        help="decoder layers kept in the student",
    )
    dist.set_defaults(fn=cmd_distill)

    ev = sub.add_parser("evaluate", help="decode a test split and write a metrics report")
    ev.add_argument("--config", help="JSON run config")
    ev.add_argument("--model", required=True, help="checkpoint to evaluate")
    ev.add_argument("--test", required=True, help="test JSONL path")
    ev.add_argument("--report", required=True, help="report JSON output path")
    ev.add_argument("--label", help="method label stored in the report")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--beam-size", dest="beam_size", type=int)
    ev.add_argument("--length-penalty", dest="length_penalty", type=float)
    ev.add_argument("--min-length", dest="min_length", type=int)
    ev.add_argument("--max-length", dest="max_length", type=int)
    ev.set_defaults(fn=cmd_evaluate)

    comp = sub.add_parser("compare", help="print a metric table over reports")
    comp.add_argument("reports", nargs="+", help="report JSON paths")
    comp.set_defaults(fn=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
