"""Acceptance suite: every criterion at its stated tolerance.

Run with -s to see one pass/fail line per criterion:

    pytest tests/test_acceptance.py -s
"""

import itertools
import json
import math
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest
from sklearn.metrics import precision_recall_fscore_support

from namegate.baselines import ctc_loss
from namegate.cli import main as cli_main
from namegate.dataio import load_dataset, loso_folds
from namegate.evaluation import crossval, layer_sweep
from namegate.gradcheck import run_gradcheck
from namegate.matcher import contrastive_loss, init_matcher, pair_logits
from namegate.metrics import ConfusionMatrix, compute_metrics
from namegate.numerics import l2_normalize_rows
from namegate.prompts import FileBackedTextProvider
from namegate.synthdata import SynthSpec, generate, generate_layer_sweep, preset
from namegate.training import default_config, train_one


@contextmanager
def criterion(number: int, description: str):
    try:
        yield
    except BaseException:
        print(f"[FAIL] criterion {number}: {description}")
        raise
    print(f"[PASS] criterion {number}: {description}")


def test_criterion_1_gradient_suite():
    with criterion(1, "gradient suite, max relative error < 1e-4 over 10 seeds, < 2 min"):
        start = time.time()
        results = run_gradcheck(seed=0, n_seeds=10)
        elapsed = time.time() - start
        for name in ("matcher", "classifier", "ctc"):
            assert results[name] < 1e-4, f"{name}: {results[name]:.3e}"
        assert elapsed < 120, f"gradient suite took {elapsed:.1f}s"


def test_criterion_2_contrastive_loss_oracles():
    with criterion(2, "contrastive loss closed forms, symmetry, permutation invariance"):
        assert contrastive_loss(np.array([[2.5]]), np.array([[2.5]])) == 0.0

        closed_form = -math.log(math.e / (math.e + 1))
        eye = np.eye(2)
        assert abs(contrastive_loss(eye, eye) - 0.31326) < 1e-5
        assert abs(contrastive_loss(eye, eye) - closed_form) < 1e-9

        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 7))
            d = int(rng.integers(3, 9))
            audio = l2_normalize_rows(rng.standard_normal((n, d)))
            text = l2_normalize_rows(rng.standard_normal((n, d)))
            params = init_matcher(d, d, d=d, seed=0, dtype=np.float64)
            params.audio_log_scale.value[...] = rng.uniform(0.0, 2.0)
            params.text_log_scale.value[...] = rng.uniform(0.0, 2.0)

            logits_at, logits_ta = pair_logits(params, audio, text)
            base = contrastive_loss(logits_at, logits_ta)

            # role swap: exchange the modalities and their scales
            swapped = init_matcher(d, d, d=d, seed=0, dtype=np.float64)
            swapped.audio_log_scale.value[...] = params.text_log_scale.value
            swapped.text_log_scale.value[...] = params.audio_log_scale.value
            s_at, s_ta = pair_logits(swapped, text, audio)
            assert abs(contrastive_loss(s_at, s_ta) - base) < 1e-9

            perm = rng.permutation(n)
            p_at, p_ta = pair_logits(params, audio[perm], text[perm])
            assert abs(contrastive_loss(p_at, p_ta) - base) < 1e-9


def _enumerate_ctc(logprobs, target):
    t_len, v = logprobs.shape
    target = list(target)
    total = -math.inf
    for path in itertools.product(range(v), repeat=t_len):
        collapsed = []
        prev = -1
        for s in path:
            if s != prev and s != 0:
                collapsed.append(s)
            prev = s
        if collapsed == target:
            total = np.logaddexp(total, sum(logprobs[t, s] for t, s in enumerate(path)))
    return -total


def test_criterion_3_ctc_oracle_equivalence():
    with criterion(3, "CTC forward loss equals exhaustive enumeration on 500 instances, < 1 min"):
        start = time.time()
        rng = np.random.default_rng(1)
        checked = 0
        while checked < 500:
            t_len = int(rng.integers(1, 7))
            v = int(rng.integers(2, 5))
            logits = rng.standard_normal((t_len, v))
            lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
            length = int(rng.integers(0, 4))
            target = list(rng.integers(1, v, size=length))
            feasible = t_len >= length + sum(a == b for a, b in zip(target, target[1:]))
            if not feasible:
                continue
            got = ctc_loss(lp, target)
            want = _enumerate_ctc(lp, target)
            assert abs(got - want) < 1e-8, f"T={t_len} V={v} target={target}"
            checked += 1
        assert time.time() - start < 60


def test_criterion_4_metrics_oracle():
    with criterion(4, "metrics equal the hand example and an independent recomputation"):
        cm = ConfusionMatrix(np.array([[1, 1], [0, 2]]), ("A", "B"))
        report = compute_metrics(cm)
        assert report.accuracy == 0.75
        assert abs(report.macro_f1 - 0.73333) < 1e-5

        rng = np.random.default_rng(2)
        for _ in range(20):
            c = int(rng.integers(2, 7))
            counts = rng.integers(0, 9, size=(c, c))
            if counts.sum() == 0:
                counts[0, 0] = 1
            report = compute_metrics(ConfusionMatrix(counts, tuple(f"c{i}" for i in range(c))))
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
            accuracy = np.trace(counts) / counts.sum()
            assert abs(report.accuracy - accuracy) < 1e-9


@pytest.fixture(scope="module")
def synthetic_end_to_end(tmp_path_factory):
    """Four LOSO runs on the scaled dataset: both models, clean and noisy."""
    root = tmp_path_factory.mktemp("acceptance_e2e")
    clean_spec = preset("ds1-small", seed=0)
    noisy_spec = replace(clean_spec, cluster_spread=clean_spec.cluster_spread * 5)

    start = time.time()
    results = {}
    for tag, spec in (("clean", clean_spec), ("noisy", noisy_spec)):
        gen = generate(spec, root / tag)
        dataset = load_dataset(gen.manifest_path)
        provider = FileBackedTextProvider.load(gen.prompt_manifest_path)
        for model in ("matcher", "classifier"):
            config = default_config(model, seed=0)
            summary, selections, _ = crossval(
                config, dataset, provider if model == "matcher" else None, jobs=1)
            results[(tag, model)] = (summary, selections)
    results["elapsed"] = time.time() - start
    results["dataset"] = dataset
    return results


def test_criterion_5_synthetic_end_to_end(synthetic_end_to_end):
    with criterion(5, "scaled LOSO: matcher and classifier >= 0.95, sanity "
                      "ordering under 5x noise, < 10 min"):
        r = synthetic_end_to_end
        clean_matcher = r[("clean", "matcher")][0].mean["accuracy"]
        clean_classifier = r[("clean", "classifier")][0].mean["accuracy"]
        noisy_matcher = r[("noisy", "matcher")][0].mean["accuracy"]
        noisy_classifier = r[("noisy", "classifier")][0].mean["accuracy"]
        print(f"\n  clean: matcher={clean_matcher:.4f} classifier={clean_classifier:.4f}"
              f"  noisy: matcher={noisy_matcher:.4f} classifier={noisy_classifier:.4f}"
              f"  elapsed={r['elapsed']:.0f}s")
        assert clean_matcher >= 0.95
        assert clean_classifier >= 0.95
        assert noisy_matcher >= noisy_classifier - 0.02
        assert r["elapsed"] < 600


def test_criterion_6_protocol_conformance(synthetic_end_to_end, tmp_path):
    with criterion(6, "LOSO structure, correct-only ASR subset, LR grid and "
                      "validation schedule in emitted reports"):
        r = synthetic_end_to_end
        dataset = r["dataset"]

        folds = loso_folds(dataset, seed=0)
        assert sorted(f.test_speaker for f in folds) == sorted(dataset.speakers)
        assert len(folds) == len(dataset.speakers)

        _, selections = r[("clean", "matcher")]
        for selection in selections:
            assert [c["lr"] for c in selection.candidates] == [5e-5, 1e-5]
            best = max(c["best_metric"] for c in selection.candidates)
            assert selection.report.best_metric == best  # selected by validation F1
            epochs = [v["epoch"] for v in selection.report.validations]
            assert epochs == list(range(5, 5 * len(epochs) + 1, 5))
            assert max(epochs) <= 30

        ctc_config = default_config("ctc", seed=0, max_epochs=5, validate_every=5)
        report, _ = train_one(ctc_config, folds[0], dataset, None, fold_index=0)
        by_id = {e.recording_id: e for e in dataset.entries}
        assert report.train_recording_ids
        assert all(by_id[rid].correct for rid in report.train_recording_ids)
        assert report.lr == 5e-4


def test_criterion_7_determinism(tmp_path, capsys):
    with criterion(7, "identical config+seed give bitwise-identical reports "
                      "(timestamp excluded)"):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({
            "n_speakers": 3, "n_words": 3, "repeats": 3, "correct_rate": 0.8,
            "frame_dim": 12, "text_dim": 10, "frames_min": 4, "frames_max": 8,
            "mispronounce_mode": "swap", "seed": 9}), encoding="utf-8")
        assert cli_main(["gen-synth", "--spec", str(spec_path),
                         "--out", str(tmp_path / "data")]) == 0
        config_path = tmp_path / "run.json"
        config_path.write_text(json.dumps({
            "seed": 0, "model": "matcher",
            "data": {"manifest": "data/manifest.jsonl",
                     "provider": {"mode": "file_backed",
                                  "manifest": "data/prompts/prompts.jsonl"}},
            "train": {"max_epochs": 10, "validate_every": 5},
        }), encoding="utf-8")
        for out in ("run_a", "run_b"):
            assert cli_main(["crossval", "--config", str(config_path),
                             "--out", str(tmp_path / out)]) == 0
        capsys.readouterr()

        docs = []
        for out in ("run_a", "run_b"):
            doc = json.loads((tmp_path / out / "summary.json").read_text())
            doc["meta"].pop("generated_at")
            docs.append(json.dumps(doc, indent=2, sort_keys=True))
        assert docs[0] == docs[1]

        csv_a = (tmp_path / "run_a" / "table.csv").read_bytes()
        csv_b = (tmp_path / "run_b" / "table.csv").read_bytes()
        assert csv_a == csv_b

        ckpt_a = sorted((tmp_path / "run_a" / "checkpoints").rglob("*"))
        ckpt_b = sorted((tmp_path / "run_b" / "checkpoints").rglob("*"))
        assert [p.relative_to(tmp_path / "run_a") for p in ckpt_a] == \
               [p.relative_to(tmp_path / "run_b") for p in ckpt_b]
        for pa, pb in zip(ckpt_a, ckpt_b):
            if pa.is_file():
                assert pa.read_bytes() == pb.read_bytes(), pa.name


def test_criterion_8_layer_sweep_ranks_layer_12_first(tmp_path):
    with criterion(8, "constructed sweep with noise minimized at layer 12 "
                      "ranks layer 12 first"):
        spec = SynthSpec(n_speakers=5, n_words=5, repeats=8, correct_rate=0.85,
                         frame_dim=16, text_dim=12, frames_min=4, frames_max=10,
                         mispronounce_mode="swap", seed=3)
        noise = {layer: 0.05 + 1.0 * abs(layer - 12) for layer in (10, 11, 12, 13, 14)}
        manifests = generate_layer_sweep(spec, noise, tmp_path)
        config = default_config("classifier", seed=0, max_epochs=20, validate_every=5,
                                lr_grid=(2e-3,), mlp_hidden=32)
        ranking = layer_sweep({k: str(v) for k, v in manifests.items()}, config)
        assert ranking[0]["layer"] == 12, ranking
