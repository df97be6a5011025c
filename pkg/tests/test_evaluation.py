import json

import numpy as np
import pytest

from create_cil.datasets import LabeledDataset, PerClass, read_table
from create_cil.evaluation import (
    CSV_HEADER,
    THREADS_ENV,
    AEClassifier,
    ConfusionSummary,
    EvaluationError,
    NMEClassifier,
    PhaseResult,
    RunRecord,
    confusion_stats,
    export_embeddings,
    features,
    misclassified_error_report,
    nme_baseline,
    non_target_error,
    old_new_accuracy,
    parse_space,
    phase_accuracy,
    read_accuracy_csv,
)
from create_cil.memory import ClassExemplars, ExemplarMemory
from create_cil.model import AutoEncoderBank, FeatureExtractor, append_classes


class TableModel:
    """Scores looked up by sample row; the first input column holds the row id."""

    def __init__(self, scores):
        self.table = np.asarray(scores, dtype=np.float64)
        self.num_classes = self.table.shape[1]

    def scores(self, x):
        return self.table[np.asarray(x[:, 0], dtype=int)]

    def predict(self, x):
        return np.argmin(self.scores(x), axis=1)


def rows_dataset(labels, num_classes):
    n = len(labels)
    return LabeledDataset(np.column_stack([np.arange(n), np.zeros(n)]), labels, num_classes, "test")


def identity_extractor(dim):
    ex = FeatureExtractor.zeros(dim, (), dim)
    ex.weights[0].data = np.eye(dim)
    return ex


# -- accuracy -------------------------------------------------------------------------


def test_phase_accuracy_perfect_and_constant():
    labels = np.repeat(np.arange(10), 3)
    perfect = TableModel(np.where(np.eye(10)[labels] == 1, 0.0, 1.0))
    assert phase_accuracy(perfect, rows_dataset(labels, 10)) == 100.0
    constant = TableModel(np.tile(np.arange(10.0), (30, 1)))
    assert phase_accuracy(constant, rows_dataset(labels, 10)) == pytest.approx(10.0)


def test_phase_accuracy_recount():
    rng = np.random.default_rng(0)
    scores = rng.uniform(size=(50, 4))
    labels = rng.integers(0, 4, size=50)
    model = TableModel(scores)
    hits = sum(int(np.argmin(scores[i]) == labels[i]) for i in range(50))
    assert phase_accuracy(model, rows_dataset(labels, 4)) == pytest.approx(100.0 * hits / 50)


def test_phase_accuracy_empty():
    with pytest.raises(EvaluationError):
        phase_accuracy(TableModel(np.zeros((1, 2))), LabeledDataset(np.zeros((0, 2)), [], 2, "test"))


def test_old_new_partition():
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3, 2, 3])
    # old classes {0, 1}: 4 of 4 right; new {2, 3}: 3 of 6 right
    pred = np.array([0, 0, 1, 1, 2, 0, 3, 0, 2, 1])
    model = TableModel(np.where(np.eye(4)[pred] == 1, 0.0, 1.0))
    on = old_new_accuracy(model, rows_dataset(labels, 4), boundary=2)
    assert on.old == 100.0 and on.new == 50.0
    assert on.total == pytest.approx((4 * 100.0 + 6 * 50.0) / 10)
    first = old_new_accuracy(model, rows_dataset(labels, 4), boundary=0)
    assert first.old is None and first.new == first.total


def test_balanced_halves_weighted_mean():
    labels = np.repeat([0, 1], 10)
    pred = labels.copy()
    pred[:2] = 1  # old: 80%
    pred[10:14] = 0  # new: 60%
    model = TableModel(np.where(np.eye(2)[pred] == 1, 0.0, 1.0))
    on = old_new_accuracy(model, rows_dataset(labels, 2), boundary=1)
    assert (on.old, on.new, on.total) == (80.0, 60.0, 70.0)


# -- NME ------------------------------------------------------------------------------


def memory_with(protos_by_class):
    mem = ExemplarMemory(PerClass(5))
    for c, samples in protos_by_class.items():
        samples = np.asarray(samples, dtype=np.float64)
        mem.per_class[c] = ClassExemplars(samples, np.arange(len(samples)))
    return mem


def test_nme_nearest_prototype():
    # features are tanh of the inputs; tanh is monotone so nearest stays nearest here
    mem = memory_with({0: [[0.0, 0.0]], 1: [[1.5, 0.0]]})
    model = NMEClassifier(identity_extractor(2), mem)
    assert model.predict(np.array([[0.3, 0.0], [1.2, 0.0]])).tolist() == [0, 1]
    # a test sample equal to an exemplar goes to its class
    assert model.predict(np.array([[1.5, 0.0]])).tolist() == [1]


def test_nme_matches_brute_force():
    rng = np.random.default_rng(0)
    mem = memory_with({c: rng.normal(size=(4, 3)) for c in range(5)})
    ex = identity_extractor(3)
    x = rng.normal(size=(40, 3))
    protos = np.stack([np.tanh(mem.per_class[c].samples).mean(axis=0) for c in range(5)])
    expected = [int(np.argmin([np.linalg.norm(np.tanh(v) - p) for p in protos])) for v in x]
    assert NMEClassifier(ex, mem).predict(x).tolist() == expected
    ds = LabeledDataset(x, np.array(expected), 5, "test")
    assert nme_baseline(ex, mem, ds) == 100.0


def test_nme_missing_class():
    mem = memory_with({0: [[0.0, 0.0]], 2: [[1.0, 1.0]]})
    with pytest.raises(EvaluationError, match="class 1"):
        NMEClassifier(identity_extractor(2), mem)


def test_nme_invariant_to_consistent_relabelling():
    rng = np.random.default_rng(3)
    samples = {c: rng.normal(size=(3, 2)) + 3 * c for c in range(3)}
    x = np.concatenate([samples[c] for c in range(3)])
    y = np.repeat(np.arange(3), 3)
    perm = np.array([2, 0, 1])
    ex = identity_extractor(2)
    a = nme_baseline(ex, memory_with(samples), LabeledDataset(x, y, 3, "test"))
    b = nme_baseline(ex, memory_with({int(perm[c]): s for c, s in samples.items()}), LabeledDataset(x, perm[y], 3, "test"))
    assert a == b


# -- confusion and error reports -------------------------------------------------------


def test_confusion_stats_constant_rows():
    s = confusion_stats(TableModel(np.full((6, 3), 2.0)), rows_dataset(np.zeros(6, dtype=int), 3))
    assert (s.min, s.max, s.mean, s.median) == (0.0, 0.0, 0.0, 0.0)


def test_confusion_stats_well_separated_is_near_one():
    eps = np.full((8, 4), 100.0)
    eps[np.arange(8), np.arange(8) % 4] = 0.0
    eps += np.random.default_rng(0).uniform(0, 1, size=eps.shape)
    s = confusion_stats(TableModel(eps), rows_dataset(np.arange(8) % 4, 4))
    assert s.mean > 0.98


def test_confusion_quartiles_match_sort():
    rng = np.random.default_rng(1)
    eps = rng.uniform(0, 10, size=(101, 3))
    s = confusion_stats(TableModel(eps), rows_dataset(np.zeros(101, dtype=int), 3))
    srt = np.sort([(np.sort(r)[1] - r.min()) / (r.max() - r.min()) for r in eps])
    assert (s.q1, s.median, s.q3) == pytest.approx((srt[25], srt[50], srt[75]), abs=1e-15)
    scaled = confusion_stats(TableModel(3.0 * eps), rows_dataset(np.zeros(101, dtype=int), 3))
    assert scaled.mean == pytest.approx(s.mean, abs=1e-12)


def test_confusion_needs_two_classes():
    with pytest.raises(EvaluationError):
        confusion_stats(TableModel(np.zeros((2, 1))), rows_dataset(np.zeros(2, dtype=int), 1))


def test_misclassified_report():
    rng = np.random.default_rng(2)
    eps = rng.uniform(0, 5, size=(40, 4))
    labels = rng.integers(0, 4, size=40)
    model = TableModel(eps)
    ds = rows_dataset(labels, 4)
    report = misclassified_error_report(model, ds)
    acc = phase_accuracy(model, ds)
    assert len(report) == round((1 - acc / 100) * 40)
    assert all(r.margin >= 0 for r in report)
    assert all(r.true_error == eps[r.index, r.true_class] for r in report)
    perfect = TableModel(np.where(np.eye(4)[labels] == 1, 0.0, 1.0))
    assert misclassified_error_report(perfect, ds) == []


def test_non_target_error_is_off_diagonal_mean():
    eps = np.array([[1.0, 5.0, 7.0], [2.0, 0.5, 3.0]])
    assert non_target_error(TableModel(eps), rows_dataset(np.array([0, 1]), 3)) == pytest.approx((5 + 7 + 2 + 3) / 4)


# -- auto-encoder classifier and export ------------------------------------------------------


def ae_model(seed=0, classes=3):
    ex = FeatureExtractor.create(4, (6,), 5, seed)
    bank = append_classes(AutoEncoderBank(5, 2), classes, seed)
    return AEClassifier(ex, bank, 0.1)


def test_parallel_evaluation_is_identical(monkeypatch):
    model = ae_model()
    x = np.random.default_rng(0).normal(size=(1500, 4))
    serial = model.scores(x)
    monkeypatch.setenv(THREADS_ENV, "4")
    assert model.scores(x).tobytes() == serial.tobytes()


def test_export_feature_rows_round_trip(tmp_path):
    model = ae_model()
    rng = np.random.default_rng(1)
    ds = LabeledDataset(rng.normal(size=(100, 4)), rng.integers(0, 3, size=100), 3, "test")
    assert export_embeddings(model, ds, tmp_path / "f.txt", "feature") == 100
    labels, rows, _ = read_table(tmp_path / "f.txt")
    assert rows.shape == (100, 5) and labels.tolist() == ds.labels.tolist()
    np.testing.assert_allclose(rows, features(model.extractor, ds.samples), atol=1e-9)


def test_export_latent_width(tmp_path):
    model = ae_model()
    ds = LabeledDataset(np.random.default_rng(2).normal(size=(10, 4)), np.zeros(10, dtype=int), 3, "test")
    export_embeddings(model, ds, tmp_path / "z.txt", "latent:2")
    _, rows, _ = read_table(tmp_path / "z.txt")
    assert rows.shape == (10, 2)
    with pytest.raises(EvaluationError):
        export_embeddings(model, ds, tmp_path / "bad.txt", "latent:3")


def test_parse_space():
    assert parse_space("feature") == ("feature", None)
    assert parse_space("latent:4") == ("latent", 4)
    assert parse_space(("latent", 1)) == ("latent", 1)
    for bad in ("latent:x", "pixels"):
        with pytest.raises(EvaluationError):
            parse_space(bad)


def test_export_surfaces_path_on_io_failure(tmp_path):
    model = ae_model()
    ds = LabeledDataset(np.zeros((2, 4)), [0, 1], 3, "test")
    target = tmp_path / "missing" / "f.txt"
    with pytest.raises(OSError, match="missing"):
        export_embeddings(model, ds, target)


# -- run record -------------------------------------------------------------------------


def phase(t, acc, old=None, new=None):
    conf = ConfusionSummary(0, 0.1, 0.2, 0.3, 1, 0.25, 10)
    return PhaseResult(t, 2 * t, acc, old, new, conf, {"total": 1})


def test_run_record_average_and_csv():
    rec = RunRecord([phase(1, 90.0, None, 90.0), phase(2, 81.234, 80.0, 85.0), phase(3, 70.5, 66.0, 88.0)])
    assert rec.avg_incremental == sum([90.0, 81.234, 70.5]) / 3
    csv = rec.accuracy_csv()
    assert csv.splitlines()[0] == CSV_HEADER
    assert csv.splitlines()[1] == "1,2,90.00,,90.00,0.2500"
    rows = read_accuracy_csv(csv)
    recomputed = sum(float(r["accuracy"]) for r in rows) / 3
    assert recomputed == pytest.approx(rec.avg_incremental, abs=0.005)
    doc = json.loads(rec.to_json())
    assert doc["format"] == "create-run-record/1"
    assert sum(doc["phase_accuracies"]) / 3 == pytest.approx(doc["avg_incremental"], abs=1e-12)
    assert all(0 <= a <= 100 for a in doc["phase_accuracies"])


def test_accuracy_csv_bad_header():
    with pytest.raises(EvaluationError):
        read_accuracy_csv("phase,acc\n1,2\n")
