import json
import math

import numpy as np
import pytest

from amb.config import DataConfig, ModelDims, TrainConfig
from amb.corpus import ConfigError, CorpusError, Document
from amb.synth import SynthSpec, generate
from amb.trainer import (
    Checkpoint,
    NonFiniteGradientError,
    OptimizerState,
    clip_by_global_norm,
    evaluate,
    export_attention,
    predict_documents,
    render_heatmap,
    rmsprop_step,
    train,
    write_report,
)

SMALL = SynthSpec(num_classes=3, noise_size=60, train_size=90, valid_size=30, test_size=30,
                  sentences=(2, 4), tokens=(3, 6), seed=11)


@pytest.fixture(scope="module")
def splits():
    return generate(SMALL)


def small_config(**kw):
    base = dict(num_classes=3, model=ModelDims(8, 4, 4), epochs=3, batch_size=16,
                data=DataConfig(min_count=2), seed=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def trained(splits):
    return train(small_config(), splits["train"], splits["valid"])


class TestRMSProp:
    def test_hand_value(self):
        p = {"w": np.array([1.0])}
        rmsprop_step(p, {"w": np.array([1.0])}, OptimizerState())
        assert p["w"][0] == pytest.approx(1.0 - 0.001 / (math.sqrt(0.1) + 1e-8), abs=1e-15)

    def test_zero_gradient_leaves_parameter(self):
        p = {"w": np.array([0.3, -2.0])}
        rmsprop_step(p, {"w": np.zeros(2)}, OptimizerState())
        assert p["w"].tolist() == [0.3, -2.0]

    def test_repeated_gradient_shrinks_step(self):
        p = {"w": np.array([0.0])}
        state = OptimizerState()
        steps = []
        for _ in range(3):
            before = p["w"][0]
            rmsprop_step(p, {"w": np.array([1.0])}, state)
            steps.append(before - p["w"][0])
        assert steps[0] > steps[1] > steps[2] > 0
        assert np.all(state.square_avg["w"] >= 0)

    def test_restricted_names(self):
        p = {"a": np.array([1.0]), "b": np.array([1.0])}
        rmsprop_step(p, {"a": np.array([1.0]), "b": np.array([1.0])}, OptimizerState(), names=["b"])
        assert p["a"][0] == 1.0 and p["b"][0] < 1.0

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_names_parameter(self, bad):
        p = {"sent_fw.w_h": np.zeros(3)}
        with pytest.raises(NonFiniteGradientError, match="sent_fw.w_h"):
            rmsprop_step(p, {"sent_fw.w_h": np.array([0.0, bad, 1.0])}, OptimizerState())

    def test_clip(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_by_global_norm(grads, 1.0) == pytest.approx(5.0)
        assert grads["a"][0] == pytest.approx(0.6) and grads["b"][0] == pytest.approx(0.8)
        grads = {"a": np.array([0.3])}
        clip_by_global_norm(grads, 1.0)
        assert grads["a"][0] == 0.3


class TestTrain:
    def test_report_shape(self, trained):
        report, best = trained
        assert [r.epoch for r in report.epochs] == [1, 2, 3]
        assert 1 <= report.best_epoch <= 3
        assert best.header["epoch"] == report.best_epoch
        assert all(math.isfinite(v) for col in report.loss_columns().values() for v in col)

    def test_deterministic(self, splits, trained):
        again, best = train(small_config(), splits["train"], splits["valid"])
        assert again.loss_columns() == trained[0].loss_columns()
        assert all(np.array_equal(best.state[n], trained[1].state[n]) for n in best.state)

    def test_seed_changes_run(self, splits, trained):
        other, _ = train(small_config(seed=6), splits["train"], splits["valid"])
        assert other.loss_columns() != trained[0].loss_columns()

    def test_multiclass_only_loss_non_increasing(self, splits):
        report, _ = train(small_config(mode="mul-only", epochs=5), splits["train"], splits["valid"])
        totals = report.loss_columns()["total"]
        assert all(b <= a for a, b in zip(totals, totals[1:])), totals
        assert report.loss_columns()["total"] == report.loss_columns()["mul"]

    def test_early_stopping(self, splits):
        report, _ = train(small_config(epochs=40, patience=1, model=ModelDims(4, 2, 2)),
                          splits["train"], splits["valid"])
        assert report.stopped_early == (len(report.epochs) < 40)

    def test_empty_split(self, splits):
        with pytest.raises(ConfigError):
            train(small_config(), [], splits["valid"])

    def test_label_out_of_range(self, splits):
        with pytest.raises(CorpusError):
            train(small_config(), splits["train"] + [Document(7, [["x"]])], splits["valid"])

    def test_write_report(self, trained, tmp_path):
        write_report(trained[0], tmp_path)
        rows = (tmp_path / "report.csv").read_text().splitlines()
        assert rows[0].startswith("epoch,bin,mul,adv,diff,total")
        assert len(rows) == 4
        assert json.loads((tmp_path / "report.json").read_text())["best_epoch"] == trained[0].best_epoch


class TestCheckpoint:
    def test_roundtrip_exact(self, splits, trained, tmp_path):
        best = trained[1]
        best.save(tmp_path / "m.ckpt")
        loaded = Checkpoint.load(tmp_path / "m.ckpt")
        assert loaded.header == json.loads(json.dumps(best.header))
        assert evaluate(loaded, splits["test"]) == evaluate(best, splits["test"])
        assert predict_documents(loaded, splits["test"]) == predict_documents(best, splits["test"])

    def test_header_is_first_line(self, trained, tmp_path):
        trained[1].save(tmp_path / "m.ckpt")
        first = (tmp_path / "m.ckpt").read_bytes().split(b"\n", 1)[0]
        header = json.loads(first)
        assert header["format"] == "amb-checkpoint/1"
        assert [p["name"] for p in header["params"]][0] == "embedding"

    def test_truncated_file_rejected(self, trained, tmp_path):
        trained[1].save(tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "bad.ckpt").write_bytes(raw[:-4])
        with pytest.raises(ValueError):
            Checkpoint.load(tmp_path / "bad.ckpt")
        (tmp_path / "bad.ckpt").write_bytes(raw + b"\0\0\0\0")
        with pytest.raises(ValueError, match="trailing"):
            Checkpoint.load(tmp_path / "bad.ckpt")

    def test_evaluate_rejects_foreign_labels(self, trained):
        with pytest.raises(CorpusError):
            evaluate(trained[1], [Document(5, [["n1"]])])

    def test_confusion_counts(self, splits, trained):
        result = evaluate(trained[1], splits["test"])
        assert sum(map(sum, result.confusion)) == result.total == len(splits["test"])
        assert result.accuracy == pytest.approx(sum(result.confusion[i][i] for i in range(3)) / result.total)


class TestAttentionExport:
    def test_rows_and_rendering(self, splits, trained):
        doc = splits["test"][0]
        record = export_attention(trained[1], doc)
        assert len(record["rows"]) == 6
        assert [r["kind"] for r in record["rows"]] == ["class"] * 3 + ["adversarial"] * 3
        for row in record["rows"]:
            assert len(row["weights"]) == len(doc.sentences)
            assert sum(row["weights"]) == pytest.approx(1.0, abs=1e-5)
        json.dumps(record)
        text = render_heatmap(record).splitlines()
        assert len(text) == 1 + 6 + 1
        assert text[1].startswith("cls[0]") and text[5].startswith("adv[0]")
