"""Fold evaluation, cross-validation aggregation, and the layer sweep.

Folds evaluate independently over read-only data and merge in lexicographic
test-speaker order, so results are identical whether folds run sequentially
or in parallel worker processes.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

from .dataio import Dataset, FoldSpec, load_dataset, loso_folds
from .errors import ConsistencyError, EmptyInputError
from .metrics import ConfusionMatrix, CvSummary, MetricsReport, compute_metrics
from .prompts import label_of
from .training import SelectionReport, TrainConfig, select_lr


def evaluate_fold(model, fold: FoldSpec, dataset: Dataset) -> MetricsReport:
    """Score every test-speaker recording through the model's decision path."""
    entries = dataset.entries_for_speakers([fold.test_speaker])
    if not entries:
        raise EmptyInputError(f"no recordings for test speaker {fold.test_speaker!r}")
    pairs = []
    for entry in entries:
        frames = dataset.load_frames(entry)
        pairs.append((label_of(entry), model.predict_entry(entry, frames)))
    cm = ConfusionMatrix.from_labels(pairs, dataset.vocabulary)
    return compute_metrics(cm)


def run_fold(config: TrainConfig, fold: FoldSpec, dataset: Dataset, provider,
             fold_index: int):
    selection, model = select_lr(config, fold, dataset, provider, fold_index=fold_index)
    report = evaluate_fold(model, fold, dataset)
    return selection, report, model


def _run_fold_task(args):
    config, fold, dataset, provider, fold_index = args
    return run_fold(config, fold, dataset, provider, fold_index)


def crossval(config: TrainConfig, dataset: Dataset, provider, jobs: int = 1
             ) -> tuple[CvSummary, list[SelectionReport], dict]:
    """Leave-one-speaker-out pass: lr selection, training, and evaluation per
    fold, aggregated as mean and population standard deviation.

    Also returns the winning model per test speaker for persistence."""
    folds = loso_folds(dataset, config.seed)
    tasks = [(config, fold, dataset, provider, i) for i, fold in enumerate(folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_task, tasks))
    else:
        results = [_run_fold_task(t) for t in tasks]
    selections = [sel for sel, _, _ in results]
    reports = [rep for _, rep, _ in results]
    models = {fold.test_speaker: model
              for fold, (_, _, model) in zip(folds, results)}
    summary = CvSummary.from_folds(reports, [f.test_speaker for f in folds])
    return summary, selections, models


def default_jobs() -> int:
    value = os.environ.get("NAMEGATE_JOBS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def layer_sweep(layer_manifests: dict[int, str], config: TrainConfig,
                jobs: int = 1) -> list[dict]:
    """Run the classifier pipeline per embedding layer under one config.

    Returns layers ranked by mean cross-validation accuracy, ties broken by
    the lower layer index.
    """
    if not layer_manifests:
        raise EmptyInputError("no layer manifests given")
    if config.objective != "classifier":
        raise ConsistencyError("the layer sweep runs the classifier baseline")
    datasets: dict[int, Dataset] = {}
    reference_ids = None
    reference_layer = None
    for layer in sorted(layer_manifests):
        ds = load_dataset(layer_manifests[layer])
        ids = tuple(e.recording_id for e in ds.entries)
        if reference_ids is None:
            reference_ids, reference_layer = ids, layer
        elif ids != reference_ids:
            raise ConsistencyError(
                f"layer {layer} manifest lists different recordings than "
                f"layer {reference_layer}")
        datasets[layer] = ds
    results = []
    for layer in sorted(datasets):
        summary, _, _ = crossval(config, datasets[layer], provider=None, jobs=jobs)
        results.append({"layer": layer, "mean_accuracy": summary.mean["accuracy"],
                        "std_accuracy": summary.std["accuracy"]})
    results.sort(key=lambda r: (-r["mean_accuracy"], r["layer"]))
    return results
