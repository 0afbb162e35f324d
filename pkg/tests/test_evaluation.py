import json

import numpy as np
import pytest
from sklearn.metrics import precision_recall_fscore_support

from namegate.dataio import load_dataset, loso_folds, write_embedding_file
from namegate.errors import ConsistencyError, EmptyInputError
from namegate.evaluation import crossval, evaluate_fold, layer_sweep
from namegate.metrics import (
    ClassMetrics,
    ConfusionMatrix,
    CvSummary,
    MetricsReport,
    compute_metrics,
)
from namegate.prompts import MISPRONOUNCED, PromptLabel, label_of
from namegate.synthdata import SynthSpec, generate, generate_layer_sweep
from namegate.training import default_config


class TestComputeMetrics:
    def test_perfect_diagonal(self):
        cm = ConfusionMatrix(np.diag([3, 2, 5]), ("a", "b", "mispronounced"))
        report = compute_metrics(cm)
        assert report.accuracy == 1.0
        assert report.macro_f1 == 1.0

    def test_hand_computed_two_class_example(self):
        # true = [A, A, B, B], predicted = [A, B, B, B]
        cm = ConfusionMatrix(np.array([[1, 1], [0, 2]]), ("A", "B"))
        report = compute_metrics(cm)
        assert report.accuracy == 0.75
        a, b = report.per_class
        assert (a.precision, a.recall) == (1.0, 0.5)
        assert abs(a.f1 - 2 / 3) < 1e-12
        assert abs(b.precision - 2 / 3) < 1e-12
        assert b.recall == 1.0
        assert abs(b.f1 - 0.8) < 1e-12
        assert abs(report.macro_f1 - 0.73333) < 1e-5

    def test_zero_support_class_scores_zero(self):
        counts = np.array([[2, 0, 0], [0, 3, 0], [0, 0, 0]])
        report = compute_metrics(ConfusionMatrix(counts, ("a", "b", "mispronounced")))
        ghost = report.per_class[2]
        assert (ghost.precision, ghost.recall, ghost.f1) == (0.0, 0.0, 0.0)
        assert abs(report.macro_f1 - 2 / 3) < 1e-12  # zero class still averaged in

    def test_matches_sklearn_on_random_matrices(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            c = int(rng.integers(2, 6))
            counts = rng.integers(0, 7, size=(c, c))
            if counts.sum() == 0:
                counts[0, 0] = 1
            classes = tuple(f"c{i}" for i in range(c))
            report = compute_metrics(ConfusionMatrix(counts, classes))
            y_true, y_pred = [], []
            for i in range(c):
                for j in range(c):
                    y_true.extend([i] * counts[i, j])
                    y_pred.extend([j] * counts[i, j])
            p, r, f, _ = precision_recall_fscore_support(
                y_true, y_pred, labels=list(range(c)), average="macro", zero_division=0)
            assert abs(report.macro_precision - p) < 1e-9
            assert abs(report.macro_recall - r) < 1e-9
            assert abs(report.macro_f1 - f) < 1e-9
            assert abs(report.accuracy - np.mean(np.array(y_true) == np.array(y_pred))) < 1e-9

    def test_macro_invariant_under_class_permutation(self):
        rng = np.random.default_rng(1)
        counts = rng.integers(0, 9, size=(4, 4))
        classes = ("a", "b", "c", "d")
        base = compute_metrics(ConfusionMatrix(counts, classes))
        perm = rng.permutation(4)
        permuted = compute_metrics(
            ConfusionMatrix(counts[np.ix_(perm, perm)], tuple(classes[i] for i in perm)))
        assert abs(base.macro_f1 - permuted.macro_f1) < 1e-12
        assert abs(base.accuracy - permuted.accuracy) < 1e-12

    def test_recall_is_exact_ratio(self):
        counts = np.array([[3, 4], [0, 1]])
        report = compute_metrics(ConfusionMatrix(counts, ("a", "b")))
        assert report.per_class[0].recall == 3 / 7
        assert report.per_class[0].support == 7

    def test_empty_matrix_rejected(self):
        with pytest.raises(EmptyInputError):
            compute_metrics(ConfusionMatrix(np.zeros((2, 2), dtype=np.int64), ("a", "b")))

    def test_from_labels_orders_classes(self):
        pairs = [(PromptLabel("b"), MISPRONOUNCED), (MISPRONOUNCED, PromptLabel("a"))]
        cm = ConfusionMatrix.from_labels(pairs, ("a", "b"))
        assert cm.classes == ("a", "b", "mispronounced")
        assert cm.counts[1, 2] == 1   # true b predicted mispronounced
        assert cm.counts[2, 0] == 1   # true mispronounced predicted a
        assert cm.total == 2


class TestCvSummary:
    def make_report(self, value):
        cls = ClassMetrics("a", value, value, value, 1)
        return MetricsReport(accuracy=value, per_class=(cls,), macro_precision=value,
                             macro_recall=value, macro_f1=value)

    def test_identical_folds_have_zero_std(self):
        summary = CvSummary.from_folds([self.make_report(0.8)] * 3, ["s1", "s2", "s3"])
        assert abs(summary.mean["accuracy"] - 0.8) < 1e-12
        assert summary.std["accuracy"] < 1e-12
        exact = CvSummary.from_folds([self.make_report(0.5)] * 4, list("abcd"))
        assert exact.std["accuracy"] == 0.0

    def test_mean_and_std_match_hand_computation(self):
        values = [0.2, 0.5, 0.8]
        summary = CvSummary.from_folds([self.make_report(v) for v in values],
                                       ["a", "b", "c"])
        assert abs(summary.mean["macro_f1"] - np.mean(values)) < 1e-9
        assert abs(summary.std["macro_f1"] - np.std(values)) < 1e-9  # population std


class _OracleModel:
    """Echoes the clinician label; upper bound for any recognizer."""

    def predict_entry(self, entry, frames):
        return label_of(entry)


class _AlwaysMispronounced:
    def predict_entry(self, entry, frames):
        return MISPRONOUNCED


def handcrafted_dataset(tmp_path, per_speaker_flags, words=("chat", "pomme")):
    """One recording per (speaker, word, flag index), with given correct flags."""
    rows = []
    rng = np.random.default_rng(0)
    for speaker, flags in per_speaker_flags.items():
        for k, correct in enumerate(flags):
            word = words[k % len(words)]
            rec = f"{speaker}_{k}"
            m = rng.standard_normal((4, 3)).astype(np.float32)
            write_embedding_file(tmp_path / f"{rec}.emb", m)
            rows.append({"recording_id": rec, "speaker_id": speaker,
                         "target_word": word, "correct": bool(correct),
                         "embedding_path": f"{rec}.emb", "frames": 4, "dim": 3})
    with open(tmp_path / "manifest.jsonl", "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return load_dataset(tmp_path / "manifest.jsonl")


class TestEvaluateFold:
    def test_oracle_model_scores_one(self, tmp_path):
        ds = handcrafted_dataset(tmp_path, {
            "s1": [1, 1, 0, 1], "s2": [1, 0, 1, 1], "s3": [1, 1, 1, 0]})
        fold = loso_folds(ds, seed=0)[0]
        report = evaluate_fold(_OracleModel(), fold, ds)
        assert report.accuracy == 1.0
        assert report.macro_f1 == 1.0

    def test_constant_negative_predictor_on_ninety_percent_correct(self, tmp_path):
        # test speaker s1 has exactly 9 correct recordings out of 10
        ds = handcrafted_dataset(tmp_path, {
            "s1": [1, 1, 1, 1, 1, 1, 1, 1, 1, 0],
            "s2": [1] * 10, "s3": [1] * 10})
        fold = loso_folds(ds, seed=0)[0]
        assert fold.test_speaker == "s1"
        report = evaluate_fold(_AlwaysMispronounced(), fold, ds)
        assert abs(report.accuracy - 0.10) < 1e-12

    def test_matcher_predictions_match_per_entry_scoring(self, tmp_path):
        from namegate.matcher import MatcherModel, embed_audio, score_candidates, init_matcher
        from namegate.prompts import SyntheticTextProvider
        from namegate.dataio import pool_mean

        ds = handcrafted_dataset(tmp_path, {"s1": [1, 0, 1], "s2": [1, 1, 0],
                                            "s3": [0, 1, 1]})
        provider = SyntheticTextProvider(dim=3, seed=0)
        params = init_matcher(3, 3, d=4, seed=0)
        model = MatcherModel(params, ds.vocabulary, model_template(), provider)
        fold = loso_folds(ds, seed=0)[0]
        for entry in ds.entries_for_speakers([fold.test_speaker]):
            frames = ds.load_frames(entry)
            direct = score_candidates(
                params, embed_audio(params, pool_mean(frames)), model.candidates)[1]
            assert model.predict_entry(entry, frames) == direct


def model_template():
    from namegate.prompts import PromptTemplate

    return PromptTemplate()


class TestCrossval:
    def test_three_speaker_structure(self, tmp_path):
        spec = SynthSpec(n_speakers=3, n_words=3, repeats=2, correct_rate=0.8,
                         frame_dim=8, text_dim=8, frames_min=3, frames_max=6, seed=1)
        result = generate(spec, tmp_path / "data")
        ds = load_dataset(result.manifest_path)
        config = default_config("classifier", seed=0, max_epochs=5, validate_every=5,
                                lr_grid=(5e-4,), mlp_hidden=16)
        summary, selections, _ = crossval(config, ds, provider=None)
        assert len(summary.per_fold) == 3
        assert len(selections) == 3
        assert summary.fold_names == ds.speakers
        hand_mean = np.mean([r.accuracy for r in summary.per_fold])
        assert abs(summary.mean["accuracy"] - hand_mean) < 1e-9

    def test_parallel_matches_sequential(self, tmp_path):
        spec = SynthSpec(n_speakers=3, n_words=2, repeats=2, correct_rate=0.9,
                         frame_dim=6, text_dim=6, frames_min=3, frames_max=5, seed=2)
        result = generate(spec, tmp_path / "data")
        ds = load_dataset(result.manifest_path)
        config = default_config("classifier", seed=0, max_epochs=5, validate_every=5,
                                lr_grid=(5e-4,), mlp_hidden=8)
        seq, _, _ = crossval(config, ds, provider=None, jobs=1)
        par, _, _ = crossval(config, ds, provider=None, jobs=2)
        assert seq.to_dict() == par.to_dict()


class TestLayerSweep:
    def sweep_config(self):
        return default_config("classifier", seed=0, max_epochs=5, validate_every=5,
                              lr_grid=(1e-3,), mlp_hidden=16)

    def base_spec(self):
        return SynthSpec(n_speakers=4, n_words=3, repeats=2, correct_rate=0.8,
                         frame_dim=8, text_dim=8, frames_min=3, frames_max=6, seed=3)

    def test_single_layer(self, tmp_path):
        manifests = generate_layer_sweep(self.base_spec(), {5: 0.05}, tmp_path)
        ranking = layer_sweep({5: str(manifests[5])}, self.sweep_config())
        assert [r["layer"] for r in ranking] == [5]

    def test_tie_breaks_to_lower_layer(self, tmp_path):
        manifests = generate_layer_sweep(self.base_spec(), {3: 0.05, 7: 0.05}, tmp_path)
        ranking = layer_sweep({k: str(v) for k, v in manifests.items()},
                              self.sweep_config())
        assert ranking[0]["mean_accuracy"] == ranking[1]["mean_accuracy"]
        assert [r["layer"] for r in ranking] == [3, 7]

    def test_inconsistent_recordings_rejected(self, tmp_path):
        manifests = generate_layer_sweep(self.base_spec(), {1: 0.05}, tmp_path / "a")
        other_spec = SynthSpec(n_speakers=4, n_words=3, repeats=2, correct_rate=0.8,
                               frame_dim=8, text_dim=8, frames_min=3, frames_max=6,
                               seed=99)
        other = generate_layer_sweep(other_spec, {2: 0.05}, tmp_path / "b")
        with pytest.raises(ConsistencyError):
            layer_sweep({1: str(manifests[1]), 2: str(other[2])}, self.sweep_config())
