"""Training loops: epoch schedule, batching, periodic validation with early
stopping, and learning-rate grid selection.

All randomness flows from the run seed through named SeedSequence keys
(seed, fold index, lr index, purpose tag), so any fold/lr combination can be
reproduced or executed concurrently without sharing generator state.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .baselines import (
    ClassifierModel,
    CtcModel,
    class_index,
    ctc_greedy_decode,
    ctc_logprobs,
    init_ctc,
    init_mlp,
    default_alphabet,
    label_from_index,
    mlp_forward,
    normalize_word,
    taped_classifier_loss,
    taped_ctc_loss,
    wer,
)
from .dataio import Dataset, FoldSpec, pool_mean
from .errors import ConfigError
from .matcher import MatcherModel, embed_audio, embed_text, init_matcher, taped_contrastive_loss
from .metrics import ConfusionMatrix, compute_metrics
from .numerics import Tape, min_frames_for_target
from .optim import Adam, AdamW
from .prompts import (
    DEFAULT_NEGATIVE_TEXT,
    DEFAULT_POSITIVE_TEMPLATE,
    MISPRONOUNCED,
    PromptLabel,
    PromptTemplate,
    label_of,
    render_prompt,
)

OBJECTIVES = ("matcher", "classifier", "ctc")
CTC_LEARNING_RATE = 5e-4

_TAG_INIT = 1
_TAG_SHUFFLE = 2


@dataclass(frozen=True)
class TrainConfig:
    objective: str
    max_epochs: int = 30
    batch_size: int = 32
    validate_every: int = 5
    lr_grid: tuple[float, ...] = (5e-5, 1e-5)
    seed: int = 0
    selection_metric: str = "macro_f1"
    patience: int = 3
    shared_dim: int = 256
    mlp_hidden: int = 256
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    keep_accents: bool = False
    substring_match: bool = False
    drop_duplicate_negatives: bool = False
    adamw_weight_decay: float = 0.01
    decay_scalars: bool = True
    positive_template: str = DEFAULT_POSITIVE_TEMPLATE
    negative_text: str = DEFAULT_NEGATIVE_TEXT

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not self.lr_grid:
            raise ConfigError("lr_grid must be nonempty")
        if self.max_epochs < 1 or self.validate_every < 1:
            raise ConfigError("max_epochs and validate_every must be >= 1")
        if self.max_epochs % self.validate_every != 0:
            raise ConfigError(
                f"validate_every={self.validate_every} must divide max_epochs={self.max_epochs}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        wanted = "wer" if self.objective == "ctc" else "macro_f1"
        if self.selection_metric != wanted:
            raise ConfigError(
                f"objective {self.objective!r} selects on {wanted!r}, "
                f"not {self.selection_metric!r}")

    def template(self) -> PromptTemplate:
        return PromptTemplate(positive_template=self.positive_template,
                              negative_text=self.negative_text)


def default_config(objective: str, seed: int = 0, **overrides) -> TrainConfig:
    base = dict(objective=objective, seed=seed)
    if objective == "ctc":
        base["lr_grid"] = (CTC_LEARNING_RATE,)
        base["selection_metric"] = "wer"
    base.update(overrides)
    if "lr_grid" in base:
        base["lr_grid"] = tuple(base["lr_grid"])
    return TrainConfig(**base)


@dataclass
class TrainReport:
    objective: str
    lr: float
    seed: int
    test_speaker: str
    val_speaker: str
    train_recording_ids: list[str]
    epoch_losses: list[float]
    validations: list[dict]
    best_epoch: int
    best_metric: float
    stopped_epoch: int
    best_checkpoint_id: str
    skipped_infeasible: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SelectionReport:
    candidates: list[dict]               # {"lr": float, "best_metric": float}
    selected_lr: float
    report: TrainReport

    def to_dict(self) -> dict:
        return {"candidates": self.candidates, "selected_lr": self.selected_lr,
                "report": self.report.to_dict()}


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _metric_improved(metric: str, value: float, best: float | None) -> bool:
    if best is None:
        return True
    if metric == "wer":
        return value < best
    return value > best


class _FoldData:
    """Per-fold tensors shared across the learning-rate grid."""

    def __init__(self, config: TrainConfig, fold: FoldSpec, dataset: Dataset, provider):
        self.vocabulary = dataset.vocabulary
        self.template = config.template()
        train = dataset.entries_for_speakers(fold.train_speakers)
        val = dataset.entries_for_speakers([fold.val_speaker])
        if not train:
            raise ConfigError(f"fold {fold.test_speaker}: empty training set")
        self.objective = config.objective
        self.skipped_infeasible = 0

        if config.objective == "ctc":
            self.alphabet = default_alphabet(config.keep_accents)
            train = [e for e in train if e.correct]
            if not train:
                raise ConfigError(f"fold {fold.test_speaker}: no correct-labeled "
                                  "recordings to train the transcriber on")
            self.train_entries, self.train_frames, self.train_targets = [], [], []
            for e in train:
                target = self.alphabet.encode(
                    normalize_word(e.target_word, config.keep_accents))
                frames = dataset.load_frames(e)
                if frames.shape[0] < min_frames_for_target(target):
                    self.skipped_infeasible += 1
                    continue
                self.train_entries.append(e)
                self.train_frames.append(frames)
                self.train_targets.append(target)
            if not self.train_entries:
                raise ConfigError(f"fold {fold.test_speaker}: every training recording "
                                  "is too short for its target")
            self.dim = self.train_frames[0].shape[1]
            self.val_entries = [e for e in val if e.correct]
            self.val_frames = [dataset.load_frames(e) for e in self.val_entries]
            self.val_words = [normalize_word(e.target_word, config.keep_accents)
                              for e in self.val_entries]
            return

        self.train_entries = train
        self.train_pooled = np.concatenate(
            [pool_mean(dataset.load_frames(e)) for e in train], axis=0)
        self.dim = self.train_pooled.shape[1]
        self.val_entries = val
        self.val_pooled = np.concatenate(
            [pool_mean(dataset.load_frames(e)) for e in val], axis=0)
        self.val_labels = [label_of(e) for e in val]

        if config.objective == "classifier":
            self.train_class_idx = np.array(
                [class_index(label_of(e), self.vocabulary) for e in train], dtype=np.int64)
            return

        # matcher: per-entry prompt vectors plus the candidate prompt matrix
        prompt_cache: dict[str, np.ndarray] = {}

        def prompt_vec(label: PromptLabel) -> np.ndarray:
            text = render_prompt(label, self.template)
            if text not in prompt_cache:
                prompt_cache[text] = provider.embedding(text)
            return prompt_cache[text]

        self.train_text = np.concatenate(
            [prompt_vec(label_of(e)) for e in train], axis=0)
        self.train_is_negative = np.array(
            [label_of(e).is_mispronounced for e in train], dtype=bool)
        self.candidate_labels = ([PromptLabel(w) for w in self.vocabulary]
                                 + [MISPRONOUNCED])
        self.candidate_prompts = np.concatenate(
            [prompt_vec(lb) for lb in self.candidate_labels], axis=0)
        self.text_dim = self.train_text.shape[1]


def _validate_matcher(params, data: _FoldData) -> float:
    text_emb = embed_text(params, data.candidate_prompts)
    audio_emb = embed_audio(params, data.val_pooled)
    sims = audio_emb @ text_emb.T
    picks = np.argmax(sims, axis=1)
    pairs = [(true, data.candidate_labels[int(i)])
             for true, i in zip(data.val_labels, picks)]
    cm = ConfusionMatrix.from_labels(pairs, data.vocabulary)
    return compute_metrics(cm).macro_f1


def _validate_classifier(params, data: _FoldData) -> float:
    logits = mlp_forward(params, data.val_pooled, training=False)
    picks = np.argmax(logits, axis=1)
    pairs = [(true, label_from_index(int(i), data.vocabulary))
             for true, i in zip(data.val_labels, picks)]
    cm = ConfusionMatrix.from_labels(pairs, data.vocabulary)
    return compute_metrics(cm).macro_f1


def _validate_ctc(params, data: _FoldData) -> float:
    if not data.val_entries:
        return 1.0  # nothing to score; treat as maximally bad so training continues
    rates = []
    for frames, word in zip(data.val_frames, data.val_words):
        decoded = ctc_greedy_decode(ctc_logprobs(params, frames), params.alphabet)
        rates.append(wer([word], decoded.split()))
    return float(np.mean(rates))


def train_one(config: TrainConfig, fold: FoldSpec, dataset: Dataset, provider,
              lr: float | None = None, fold_index: int | None = None,
              _fold_data: _FoldData | None = None):
    """Train one model for one fold at one learning rate.

    Returns (TrainReport, model). The model is the best-validation snapshot,
    not the final-epoch state.
    """
    if lr is None:
        lr = config.lr_grid[0]
    if fold_index is None:
        fold_index = sorted(dataset.speakers).index(fold.test_speaker)
    lr_index = config.lr_grid.index(lr) if lr in config.lr_grid else 0
    data = _fold_data or _FoldData(config, fold, dataset, provider)

    init_seed_rng = _rng(config.seed, fold_index, lr_index, _TAG_INIT)
    init_seed = int(init_seed_rng.integers(2**31 - 1))
    shuffle_rng = _rng(config.seed, fold_index, lr_index, _TAG_SHUFFLE)

    if config.objective == "matcher":
        params = init_matcher(data.dim, data.text_dim, config.shared_dim, seed=init_seed)
        optimizer = Adam(params.all_params(), lr=lr)
        validate = _validate_matcher
    elif config.objective == "classifier":
        params = init_mlp(data.dim, len(data.vocabulary) + 1, hidden=config.mlp_hidden,
                          seed=init_seed, momentum=config.bn_momentum, eps=config.bn_eps)
        optimizer = Adam(params.all_params(), lr=lr)
        validate = _validate_classifier
    else:
        params = init_ctc(data.dim, data.alphabet, seed=init_seed)
        optimizer = AdamW(params.all_params(), lr=lr,
                          weight_decay=config.adamw_weight_decay,
                          decay_scalars=config.decay_scalars)
        validate = _validate_ctc

    n = len(data.train_entries)
    epoch_losses: list[float] = []
    validations: list[dict] = []
    best_metric: float | None = None
    best_epoch = 0
    best_params = None
    bad_streak = 0
    stopped_epoch = 0

    for epoch in range(1, config.max_epochs + 1):
        perm = shuffle_rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            if config.objective == "ctc":
                loss = _ctc_step(params, optimizer, data, idx)
            else:
                if config.objective == "matcher" and config.drop_duplicate_negatives:
                    idx = _drop_surplus_negatives(idx, data.train_is_negative)
                if idx.size < 2:
                    continue
                loss = _dense_step(config, params, optimizer, data, idx)
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)) if batch_losses else 0.0)
        stopped_epoch = epoch

        if epoch % config.validate_every == 0:
            value = float(validate(params, data))
            validations.append({"epoch": epoch, "metric": value})
            if _metric_improved(config.selection_metric, value, best_metric):
                best_metric = value
                best_epoch = epoch
                best_params = params.copy()
                bad_streak = 0
            else:
                bad_streak += 1
                if bad_streak >= config.patience:
                    break

    if best_params is None:  # never validated; keep the final state
        best_params = params.copy()
        best_metric = float("nan")
        best_epoch = stopped_epoch

    model = _wrap_model(config, best_params, data, provider)
    checkpoint_id = f"{config.objective}-fold_{fold.test_speaker}-lr_{lr:g}"
    report = TrainReport(
        objective=config.objective, lr=float(lr), seed=config.seed,
        test_speaker=fold.test_speaker, val_speaker=fold.val_speaker,
        train_recording_ids=[e.recording_id for e in data.train_entries],
        epoch_losses=epoch_losses, validations=validations,
        best_epoch=best_epoch, best_metric=float(best_metric),
        stopped_epoch=stopped_epoch, best_checkpoint_id=checkpoint_id,
        skipped_infeasible=data.skipped_infeasible)
    return report, model


def _drop_surplus_negatives(idx: np.ndarray, is_negative: np.ndarray) -> np.ndarray:
    keep = []
    seen_negative = False
    for i in idx:
        if is_negative[i]:
            if seen_negative:
                continue
            seen_negative = True
        keep.append(i)
    return np.asarray(keep, dtype=idx.dtype)


def _dense_step(config, params, optimizer, data: _FoldData, idx: np.ndarray) -> float:
    tape = Tape()
    if config.objective == "matcher":
        loss = taped_contrastive_loss(tape, params, data.train_pooled[idx],
                                      data.train_text[idx])
    else:
        loss = taped_classifier_loss(tape, params, data.train_pooled[idx],
                                     data.train_class_idx[idx])
    params.reset_grads()
    tape.backward(loss)
    optimizer.step()
    return float(loss.value)


def _ctc_step(params, optimizer, data: _FoldData, idx: np.ndarray) -> float:
    tape = Tape()
    total = None
    for i in idx:
        li = taped_ctc_loss(tape, params, data.train_frames[i], data.train_targets[i])
        total = li if total is None else tape.add(total, li)
    loss = tape.scale_const(total, 1.0 / idx.size)
    params.reset_grads()
    tape.backward(loss)
    optimizer.step()
    return float(loss.value)


def _wrap_model(config: TrainConfig, params, data: _FoldData, provider):
    if config.objective == "matcher":
        return MatcherModel(params, data.vocabulary, data.template, provider)
    if config.objective == "classifier":
        return ClassifierModel(params, data.vocabulary)
    return CtcModel(params, data.vocabulary, keep_accents=config.keep_accents,
                    substring=config.substring_match)


def select_lr(config: TrainConfig, fold: FoldSpec, dataset: Dataset, provider,
              fold_index: int | None = None):
    """Train once per grid learning rate; keep the best validation run.

    Exact metric ties go to the smaller learning rate. The winning run's
    model is reused rather than retrained.
    """
    data = _FoldData(config, fold, dataset, provider)
    candidates = []
    best = None  # (report, model, lr)
    for lr in config.lr_grid:
        report, model = train_one(config, fold, dataset, provider, lr=lr,
                                  fold_index=fold_index, _fold_data=data)
        candidates.append({"lr": float(lr), "best_metric": report.best_metric})
        if best is None:
            best = (report, model, lr)
            continue
        prev_report, _, prev_lr = best
        if report.best_metric == prev_report.best_metric:
            if lr < prev_lr:
                best = (report, model, lr)
        elif _metric_improved(config.selection_metric, report.best_metric,
                              prev_report.best_metric):
            best = (report, model, lr)
    report, model, lr = best
    return SelectionReport(candidates=candidates, selected_lr=float(lr),
                           report=report), model
