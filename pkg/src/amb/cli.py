"""Command-line frontend: ``amb train|eval|predict|attention|synth``.

Exit codes: 0 success, 1 runtime failure (unreadable checkpoint, bad corpus
file), 2 bad configuration or arguments, 3 training aborted on a non-finite
gradient.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from amb.config import load_config
from amb.corpus import ConfigError, CorpusError, Document, build_vocabulary, load_jsonl, tokenize
from amb.synth import SpecError, SynthSpec, counting_baseline, generate, write_corpus
from amb.trainer import (
    Checkpoint,
    NonFiniteGradientError,
    evaluate,
    export_attention,
    predict_documents,
    render_heatmap,
    train,
    write_report,
)

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NAN = 0, 1, 2, 3

log = logging.getLogger("amb")


class UsageError(Exception):
    """Raised for bad arguments or configuration; maps to exit code 2."""


def _require_file(path: str | None, what: str) -> str:
    if not path:
        raise UsageError(f"{what} path is not set")
    if not Path(path).is_file():
        raise UsageError(f"{what} file not found: {path}")
    return path


def cmd_train(args) -> int:
    try:
        config = load_config(args.config, args.override)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    data = config.data
    train_path = _require_file(data.train, "data.train")
    valid_path = _require_file(data.valid, "data.valid")
    k = config.num_classes
    train_docs = load_jsonl(train_path, k)
    valid_docs = load_jsonl(valid_path, k)
    vocab = build_vocabulary(train_docs, data.min_count)

    out = Path(args.out or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
    vocab.save(out / "vocab.txt")
    report, best = train(config, train_docs, valid_docs, vocab)
    best.save(out / "model.ckpt")
    write_report(report, out)

    summary = {"best_epoch": report.best_epoch, "best_valid_accuracy": report.best_valid_accuracy,
               "epochs_run": len(report.epochs), "checkpoint": str(out / "model.ckpt")}
    if data.test:
        summary["test"] = evaluate(best, load_jsonl(_require_file(data.test, "data.test"), k)).to_dict()
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    checkpoint = Checkpoint.load(_require_file(args.checkpoint, "checkpoint"))
    docs = load_jsonl(_require_file(args.data, "data"), checkpoint.num_classes)
    result = evaluate(checkpoint, docs)
    if args.json:
        print(json.dumps(result.to_dict()))
    else:
        print(f"accuracy {result.accuracy:.4f} ({result.total} documents)")
        print("confusion (rows: true, columns: predicted)")
        for i, row in enumerate(result.confusion):
            print(f"  {i}: " + " ".join(f"{n:6d}" for n in row))
    return EXIT_OK


def cmd_predict(args) -> int:
    checkpoint = Checkpoint.load(_require_file(args.checkpoint, "checkpoint"))
    if args.text is not None:
        sentences = tokenize(args.text)
        if not sentences:
            raise UsageError("--text contains no words")
        docs = [Document(0, sentences)]
    else:
        docs = load_jsonl(_require_file(args.jsonl, "jsonl"))
    for row in predict_documents(checkpoint, docs):
        print(json.dumps(row))
    return EXIT_OK


def cmd_attention(args) -> int:
    checkpoint = Checkpoint.load(_require_file(args.checkpoint, "checkpoint"))
    docs = load_jsonl(_require_file(args.jsonl, "jsonl"), checkpoint.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = checkpoint.model()
    for i, doc in enumerate(docs):
        record = export_attention(checkpoint, doc, model)
        (out / f"doc{i:05d}.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
        (out / f"doc{i:05d}.txt").write_text(render_heatmap(record), encoding="utf-8")
    print(json.dumps({"documents": len(docs), "out": str(out)}))
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        raw = json.loads(Path(_require_file(args.spec, "spec")).read_text(encoding="utf-8"))
        spec = SynthSpec.from_dict(raw)
        splits = generate(spec)
    except (json.JSONDecodeError, TypeError, SpecError) as exc:
        raise UsageError(f"bad synth spec: {exc}") from None
    paths = write_corpus(splits, args.out)
    baseline = {name: counting_baseline(spec, docs) for name, docs in splits.items()}
    summary = {"files": paths, "counting_baseline_accuracy": baseline}
    (Path(args.out) / "baseline.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amb", description="Adversarial multi-binary text classifier")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dot-path override, value parsed as JSON (repeatable)")
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix on a labelled corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predicted label and class probabilities")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text")
    src.add_argument("--jsonl")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attention", help="per-document attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--jsonl", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("synth", help="generate a planted-signal corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"amb: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteGradientError as exc:
        print(f"amb: training aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (CorpusError, ValueError, OSError) as exc:
        print(f"amb: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
