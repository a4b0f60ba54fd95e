"""RMSProp training loop, checkpoints, evaluation and attention export."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from amb import tensor as T
from amb.config import LossWeights, ModelDims, TrainConfig
from amb.core import AMBModel, discriminator_accuracy, predict, total_loss
from amb.corpus import (
    ConfigError,
    CorpusError,
    Document,
    Vocabulary,
    batch,
    build_vocabulary,
    pad_documents,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "amb-checkpoint/1"


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str, detail: str):
        super().__init__(f"non-finite gradient in parameter {name!r}: {detail}")
        self.param = name


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 0.001
    rho: float = 0.9
    eps: float = 1e-8
    square_avg: dict[str, np.ndarray] = field(default_factory=dict)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * np.asarray(scale, dtype=grads[name].dtype)
    return norm


def rmsprop_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
                 names: Iterable[str] | None = None) -> None:
    """s <- rho*s + (1-rho)*g^2 ; p <- p - lr*g/(sqrt(s)+eps), in place.

    Only ``names`` are updated when given.
    """
    names = list(grads) if names is None else list(names)
    for name in names:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(name, f"{bad} of {np.size(g)} entries are NaN/Inf")
        p = params[name]
        if p.shape != g.shape:
            raise T.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        s = state.square_avg.get(name)
        if s is None:
            s = np.zeros_like(p)
        s = state.rho * s + (1.0 - state.rho) * g * g
        state.square_avg[name] = s.astype(p.dtype, copy=False)
        p -= (state.lr * g / (np.sqrt(s) + state.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    header: dict
    state: dict[str, np.ndarray]

    @classmethod
    def from_model(cls, model: AMBModel, vocab: Vocabulary, config: TrainConfig, epoch: int) -> "Checkpoint":
        header = {
            "format": CHECKPOINT_FORMAT,
            "dims": dataclasses.asdict(model.dims),
            "num_classes": model.num_classes,
            "vocab_size": model.vocab_size,
            "loss_weights": dataclasses.asdict(config.effective_loss()),
            "mode": config.mode,
            "adv_through_encoder": config.adv_through_encoder,
            "epoch": epoch,
            "seed": config.seed,
            "max_sentences": config.data.max_sentences,
            "max_tokens": config.data.max_tokens,
            "min_count": config.data.min_count,
            "vocabulary": vocab.id_to_token[2:],
            "params": [{"name": n, "shape": list(a.shape)} for n, a in model.state_dict().items()],
        }
        return cls(header, {n: a.copy() for n, a in model.state_dict().items()})

    @property
    def num_classes(self) -> int:
        return self.header["num_classes"]

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.header["vocabulary"], min_count=self.header.get("min_count", 6))

    def model(self) -> AMBModel:
        model = AMBModel(self.header["vocab_size"], self.num_classes, ModelDims(**self.header["dims"]))
        model.load_state_dict(self.state)
        return model

    def save(self, path: str | Path) -> None:
        """JSON header line, then little-endian float32 blobs in header order."""
        with open(path, "wb") as fh:
            fh.write(json.dumps(self.header, ensure_ascii=False).encode("utf-8") + b"\n")
            for entry in self.header["params"]:
                fh.write(np.ascontiguousarray(self.state[entry["name"]], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        line_end = raw.index(b"\n")
        header = json.loads(raw[:line_end].decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an AMB checkpoint")
        state, offset = {}, line_end + 1
        for entry in header["params"]:
            count = int(np.prod(entry["shape"]))
            blob = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            state[entry["name"]] = blob.reshape(entry["shape"]).astype(np.float32)
            offset += 4 * count
        if offset != len(raw):
            raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after parameter blobs")
        return cls(header, state)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EpochRecord:
    epoch: int
    bin: float
    mul: float
    adv: float
    diff: float
    total: float
    valid_accuracy: float
    valid_nll: float
    disc_accuracy: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_accuracy: float = 0.0
    stopped_early: bool = False

    def loss_columns(self) -> dict[str, list[float]]:
        return {k: [getattr(r, k) for r in self.epochs] for k in ("bin", "mul", "adv", "diff", "total")}

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in dataclasses.fields(EpochRecord)]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for rec in self.epochs:
            writer.writerow([repr(getattr(rec, n)) for n in names])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)


# ---------------------------------------------------------------------------
# training and evaluation


def _run_batches(model: AMBModel, documents: Sequence[Document], max_sentences: int, max_tokens: int,
                 batch_size: int = 64):
    for b in batch(documents, batch_size, max_sentences, max_tokens):
        yield b, model.infer(b)


def train(config: TrainConfig, train_docs: Sequence[Document], valid_docs: Sequence[Document],
          vocab: Vocabulary | None = None, on_epoch=None) -> tuple[TrainReport, Checkpoint]:
    """Train with RMSProp; keep the checkpoint with the best validation accuracy.

    ``train_docs``/``valid_docs`` hold token strings; the vocabulary is built
    from the training split unless given.  ``on_epoch(record, model)`` is
    called after every epoch.
    """
    config.validate()
    if not train_docs or not valid_docs:
        raise ConfigError("training and validation splits must both be non-empty")
    k = config.num_classes
    for doc in (*train_docs, *valid_docs):
        if not 0 <= doc.label < k:
            raise CorpusError(f"label {doc.label} out of range for {k} classes")
    if vocab is None:
        vocab = build_vocabulary(train_docs, config.data.min_count)
    train_ids = vocab.encode_all(train_docs)
    valid_ids = vocab.encode_all(valid_docs)
    weights = config.effective_loss()
    opt = config.optimizer
    state = OptimizerState(lr=opt.lr, rho=opt.rho, eps=opt.eps)
    model = AMBModel(len(vocab), k, config.model, seed=config.seed)
    params = model.params
    data = {name: p.data for name, p in params.items()}

    report = TrainReport()
    best = Checkpoint.from_model(model, vocab, config, epoch=0)
    best_acc, best_nll, stale = -1.0, float("inf"), 0
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        sums = dict.fromkeys(("bin", "mul", "adv", "diff", "total"), 0.0)
        disc_hits, seen = 0.0, 0
        batches = batch(train_ids, config.batch_size, config.data.max_sentences, config.data.max_tokens,
                        shuffle_seed=config.seed * 1_000_003 + epoch)
        for b in batches:
            with T.Tape() as tape:
                out = model.forward(b, weights.lambda_adv, config.adv_through_encoder)
                loss = total_loss(out.parts, weights)
            leaf_grads = tape.backward(loss, params.values())
            grads = {name: leaf_grads[p] for name, p in params.items()}
            clip_by_global_norm(grads, opt.clip_norm)
            rmsprop_step(data, grads, state)
            n = len(b)
            for key, value in out.parts.values().items():
                sums[key] += value * n
            sums["total"] += float(loss.data) * n
            disc_hits += discriminator_accuracy(out.p_d) * n
            seen += n
        valid = evaluate_model(model, valid_ids, k, config.data.max_sentences, config.data.max_tokens)
        valid_acc = valid.accuracy
        rec = EpochRecord(epoch, *(sums[key] / seen for key in ("bin", "mul", "adv", "diff", "total")),
                          valid_accuracy=valid_acc, valid_nll=valid.nll, disc_accuracy=disc_hits / seen)
        report.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec, model)
        # wall time goes to the log only, so reports from identical runs stay byte-identical
        log.info("epoch %d total=%.4f bin=%.4f mul=%.4f adv=%.4f diff=%.4f valid=%.4f disc=%.3f (%.1fs)",
                 epoch, rec.total, rec.bin, rec.mul, rec.adv, rec.diff, valid_acc, rec.disc_accuracy,
                 time.perf_counter() - started)
        # improvement is lexicographic: higher accuracy, or equal accuracy at lower validation NLL
        if (valid_acc, -valid.nll) > (best_acc, -best_nll):
            best = Checkpoint.from_model(model, vocab, config, epoch=epoch)
            report.best_epoch, report.best_valid_accuracy = epoch, valid_acc
            best_acc, best_nll, stale = valid_acc, valid.nll, 0
        else:
            stale += 1
            if stale >= config.patience:
                report.stopped_early = epoch < config.epochs
                break
    return report, best


@dataclass
class EvalResult:
    accuracy: float
    confusion: list[list[int]]   # rows: true class, columns: predicted class
    total: int
    nll: float = 0.0             # mean multi-class negative log-likelihood

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate_model(model: AMBModel, id_docs: Sequence[Document], num_classes: int,
                   max_sentences: int = 30, max_tokens: int = 40) -> EvalResult:
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    nll = 0.0
    for b, out in _run_batches(model, id_docs, max_sentences, max_tokens):
        for truth, guess in zip(b.labels, predict(out.p_mul)):
            confusion[truth, guess] += 1
        picked = out.p_mul.data[np.arange(len(b)), b.labels].astype(np.float64)
        nll -= float(np.log(np.maximum(picked, T.LOG_CLAMP)).sum())
    total = int(confusion.sum())
    accuracy = float(np.trace(confusion)) / total if total else 0.0
    return EvalResult(accuracy, confusion.tolist(), total, nll / total if total else 0.0)


def evaluate(checkpoint: Checkpoint, documents: Sequence[Document]) -> EvalResult:
    """Accuracy and confusion matrix of the multi-class head on token documents."""
    k = checkpoint.num_classes
    for doc in documents:
        if not 0 <= doc.label < k:
            raise CorpusError(f"label {doc.label} does not fit a {k}-class checkpoint")
    vocab = checkpoint.vocabulary()
    if len(vocab) != checkpoint.header["vocab_size"]:
        raise ValueError("checkpoint vocabulary does not match its embedding size")
    return evaluate_model(checkpoint.model(), vocab.encode_all(documents), k,
                          checkpoint.header["max_sentences"], checkpoint.header["max_tokens"])


def predict_documents(checkpoint: Checkpoint, documents: Sequence[Document]) -> list[dict]:
    """Predicted label and multi-class probabilities per document."""
    vocab = checkpoint.vocabulary()
    model = checkpoint.model()
    rows = []
    for _, out in _run_batches(model, vocab.encode_all(documents), checkpoint.header["max_sentences"],
                               checkpoint.header["max_tokens"]):
        for label, probs in zip(predict(out.p_mul), out.p_mul.data):
            rows.append({"label": int(label), "probs": [float(p) for p in probs]})
    return rows


# ---------------------------------------------------------------------------
# attention export

SHADES = " .:-=+*#%@"


def export_attention(checkpoint: Checkpoint, document: Document, model: AMBModel | None = None) -> dict:
    """Per-sentence attention of every class head (rows 1..K) and of the
    shared adversarial head on each branch (rows K+1..2K)."""
    model = model or checkpoint.model()
    vocab = checkpoint.vocabulary()
    max_s, max_t = checkpoint.header["max_sentences"], checkpoint.header["max_tokens"]
    b = pad_documents([vocab.encode(document)], max_s, max_t)
    out = model.infer(b)
    n = int(b.sentence_mask[0].sum())
    class_rows = out.weights.data[:, 0, :n]
    adv_rows = out.adv_weights.data[:, 0, :n]
    k = model.num_classes
    return {
        "num_classes": k,
        "sentences": [" ".join(map(str, s[:max_t])) for s in document.sentences[:max_s]],
        "label": document.label,
        "prediction": int(predict(out.p_mul)[0]),
        "probs": [float(p) for p in out.p_mul.data[0]],
        "rows": [
            {"kind": "class", "branch": i, "weights": [float(w) for w in class_rows[i]]} for i in range(k)
        ] + [
            {"kind": "adversarial", "branch": i, "weights": [float(w) for w in adv_rows[i]]} for i in range(k)
        ],
    }


def render_heatmap(record: dict, shades: str = SHADES) -> str:
    """Text heatmap: one row per attention head, one cell per sentence.

    Cell shade is the weight quantised over ``shades``; weights are scaled by
    the largest weight in the record so the darkest shade marks the peak.
    """
    rows = record["rows"]
    peak = max((max(r["weights"]) for r in rows if r["weights"]), default=1.0) or 1.0
    levels = len(shades) - 1
    n = len(rows[0]["weights"]) if rows else 0
    lines = ["sentences  " + "".join(f"{i % 10}" * 2 for i in range(n))]
    k = record["num_classes"]
    for idx, row in enumerate(rows):
        if idx == k:
            lines.append("-" * len(lines[0]))
        tag = f"{'cls' if row['kind'] == 'class' else 'adv'}[{row['branch']}]".ljust(11)
        cells = "".join(shades[min(levels, int(round(w / peak * levels)))] * 2 for w in row["weights"])
        lines.append(tag + cells)
    return "\n".join(lines) + "\n"


def write_report(report: TrainReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")


def loss_weights_of(checkpoint: Checkpoint) -> LossWeights:
    return LossWeights(**checkpoint.header["loss_weights"])
