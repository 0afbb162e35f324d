"""Baseline recognizers: an MLP over pooled embeddings and a CTC transcriber.

The classifier predicts one class per vocabulary word plus the generic
mispronounced class. The transcription path trains a linear projection from
frame embeddings to character log-probabilities under the CTC loss, decodes
greedily, and accepts a recording when the target word appears as a token of
the transcription.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import read_embedding_file, write_embedding_file
from .errors import BatchTooSmallError, ShapeError, StateError, UndefinedWerError
from .numerics import (
    BatchNormState,
    Param,
    Tape,
    ctc_negative_log_likelihood,
    matmul,
)
from .prompts import MISPRONOUNCED, PromptLabel

MLP_HIDDEN = 256


# --- class indexing ---------------------------------------------------------


def class_index(label: PromptLabel, vocabulary: tuple[str, ...]) -> int:
    """Vocabulary order, mispronounced as the final class."""
    if label.is_mispronounced:
        return len(vocabulary)
    return vocabulary.index(label.word)


def label_from_index(idx: int, vocabulary: tuple[str, ...]) -> PromptLabel:
    if idx == len(vocabulary):
        return MISPRONOUNCED
    return PromptLabel(vocabulary[idx])


# --- MLP classifier ---------------------------------------------------------


@dataclass
class MlpParams:
    w1: Param          # d_in x hidden
    b1: Param          # 1 x hidden
    gamma: Param       # 1 x hidden
    beta: Param        # 1 x hidden
    bn: BatchNormState
    w2: Param          # hidden x n_classes
    b2: Param          # 1 x n_classes

    def all_params(self) -> list[Param]:
        return [self.w1, self.b1, self.gamma, self.beta, self.w2, self.b2]

    def reset_grads(self) -> None:
        for p in self.all_params():
            p.reset_grad()

    def copy(self) -> "MlpParams":
        return MlpParams(*(Param(p.value, p.name) for p in self.all_params()[:4]),
                         self.bn.copy(),
                         Param(self.w2.value, self.w2.name),
                         Param(self.b2.value, self.b2.name))


def init_mlp(d_in: int, n_classes: int, hidden: int = MLP_HIDDEN, seed: int = 0,
             momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32) -> MlpParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3A7C5]))

    def uniform(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)

    return MlpParams(
        w1=Param(uniform(d_in, hidden), "w1"),
        b1=Param(np.zeros((1, hidden), dtype=dtype), "b1"),
        gamma=Param(np.ones((1, hidden), dtype=dtype), "gamma"),
        beta=Param(np.zeros((1, hidden), dtype=dtype), "beta"),
        bn=BatchNormState(hidden, momentum=momentum, eps=eps, dtype=dtype),
        w2=Param(uniform(hidden, n_classes), "w2"),
        b2=Param(np.zeros((1, n_classes), dtype=dtype), "b2"))


def mlp_forward(p: MlpParams, pooled: np.ndarray, training: bool) -> np.ndarray:
    """linear -> batchnorm -> relu -> linear. Training mode uses and updates
    batch statistics; eval mode normalizes with the running estimates."""
    pooled = np.ascontiguousarray(pooled, dtype=p.w1.value.dtype)
    n = pooled.shape[0]
    if training and n < 2:
        raise BatchTooSmallError(f"training-mode batchnorm needs >= 2 rows, got {n}")
    h = matmul(pooled, p.w1.value) + p.b1.value
    eps = h.dtype.type(p.bn.eps)
    if training:
        mean = h.mean(axis=0, keepdims=True)
        var = ((h - mean) ** 2).mean(axis=0, keepdims=True)
        mom = p.bn.running_mean.dtype.type(p.bn.momentum)
        p.bn.running_mean = (1 - mom) * p.bn.running_mean + mom * mean.astype(p.bn.running_mean.dtype)
        p.bn.running_var = (1 - mom) * p.bn.running_var + mom * (var * n / (n - 1)).astype(p.bn.running_var.dtype)
    else:
        mean = p.bn.running_mean.astype(h.dtype)
        var = p.bn.running_var.astype(h.dtype)
    xhat = (h - mean) / np.sqrt(var + eps)
    act = p.gamma.value * xhat + p.beta.value
    act = np.maximum(act, 0.0)
    return matmul(np.ascontiguousarray(act), p.w2.value) + p.b2.value


def taped_classifier_loss(tape: Tape, p: MlpParams, pooled: np.ndarray, labels):
    dtype = p.w1.value.dtype
    x = tape.constant(np.ascontiguousarray(pooled, dtype=dtype))
    h = tape.add_bias(tape.matmul(x, tape.leaf(p.w1)), tape.leaf(p.b1))
    norm = tape.batchnorm(h, tape.leaf(p.gamma), tape.leaf(p.beta), p.bn, training=True)
    act = tape.relu(norm)
    logits = tape.add_bias(tape.matmul(act, tape.leaf(p.w2)), tape.leaf(p.b2))
    return tape.softmax_cross_entropy(logits, labels)


def classify(p: MlpParams, pooled: np.ndarray, vocabulary: tuple[str, ...]) -> PromptLabel:
    """Eval-mode argmax over the class set; ties go to the lowest index."""
    logits = mlp_forward(p, pooled, training=False)
    return label_from_index(int(np.argmax(logits[0])), vocabulary)


# --- character alphabet and text normalization ------------------------------


BASE_SYMBOLS = tuple("abcdefghijklmnopqrstuvwxyz") + ("'", "-", " ")
ACCENTED_SYMBOLS = tuple("àâäçéèêëîïôöùûüœ")
BLANK = "<blank>"


@dataclass(frozen=True)
class Alphabet:
    """Symbol inventory with the blank fixed at index 0."""

    symbols: tuple[str, ...]  # includes BLANK at position 0
    index: dict = field(compare=False, default=None, repr=False)

    def __post_init__(self):
        if len(self.symbols) < 2 or self.symbols[0] != BLANK:
            raise ShapeError("alphabet needs the blank at index 0 plus >= 1 symbol")
        object.__setattr__(self, "index", {s: i for i, s in enumerate(self.symbols)})

    @property
    def size(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.array([self.index[ch] for ch in text], dtype=np.int64)
        except KeyError as e:
            raise StateError(f"character {e.args[0]!r} not in alphabet") from None

    def decode(self, ids) -> str:
        return "".join(self.symbols[i] for i in ids)


def default_alphabet(keep_accents: bool = False) -> Alphabet:
    symbols = (BLANK,) + BASE_SYMBOLS
    if keep_accents:
        symbols = symbols + ACCENTED_SYMBOLS
    return Alphabet(symbols)


def normalize_word(word: str, keep_accents: bool = False) -> str:
    """Lowercase and, unless keeping accents, fold diacritics to ASCII."""
    word = word.lower()
    if keep_accents:
        return word
    decomposed = unicodedata.normalize("NFD", word)
    return "".join(ch for ch in decomposed if unicodedata.category(ch) != "Mn")


# --- CTC head ----------------------------------------------------------------


@dataclass
class CtcParams:
    w: Param           # d_in x alphabet size
    b: Param           # 1 x alphabet size
    alphabet: Alphabet

    def all_params(self) -> list[Param]:
        return [self.w, self.b]

    def reset_grads(self) -> None:
        for p in self.all_params():
            p.reset_grad()

    def copy(self) -> "CtcParams":
        return CtcParams(Param(self.w.value, self.w.name),
                         Param(self.b.value, self.b.name), self.alphabet)


def init_ctc(d_in: int, alphabet: Alphabet, seed: int = 0, dtype=np.float32) -> CtcParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3A7C6]))
    bound = 1.0 / np.sqrt(d_in)
    w = rng.uniform(-bound, bound, size=(d_in, alphabet.size)).astype(dtype)
    return CtcParams(w=Param(w, "ctc_w"),
                     b=Param(np.zeros((1, alphabet.size), dtype=dtype), "ctc_b"),
                     alphabet=alphabet)


def ctc_logprobs(p: CtcParams, frames: np.ndarray) -> np.ndarray:
    frames = np.ascontiguousarray(frames, dtype=p.w.value.dtype)
    logits = matmul(frames, p.w.value) + p.b.value
    mx = logits.max(axis=1, keepdims=True)
    shifted = logits - mx
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def ctc_loss(logprobs: np.ndarray, target) -> float:
    """Forward-algorithm negative log-likelihood on row log-probabilities."""
    return ctc_negative_log_likelihood(logprobs, target, blank=0)


def taped_ctc_loss(tape: Tape, p: CtcParams, frames: np.ndarray, target):
    dtype = p.w.value.dtype
    x = tape.constant(np.ascontiguousarray(frames, dtype=dtype))
    logits = tape.add_bias(tape.matmul(x, tape.leaf(p.w)), tape.leaf(p.b))
    logprobs = tape.log_softmax_rows(logits)
    return tape.ctc(logprobs, target, blank=0)


def ctc_greedy_decode(logprobs: np.ndarray, alphabet: Alphabet) -> str:
    """Per-frame argmax, collapse consecutive repeats, drop blanks."""
    ids = np.argmax(logprobs, axis=1)
    out: list[str] = []
    prev = -1
    for i in ids:
        i = int(i)
        if i != prev and i != 0:
            out.append(alphabet.symbols[i])
        prev = i
    return "".join(out)


def edit_distance(reference: list[str], hypothesis: list[str]) -> int:
    """Token-level Levenshtein distance."""
    n, m = len(reference), len(hypothesis)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (reference[i - 1] != hypothesis[j - 1])
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev = cur
    return prev[m]


def wer(reference: list[str], hypothesis: list[str]) -> float:
    """Word error rate: edit distance over reference length."""
    if not reference:
        raise UndefinedWerError("WER is undefined for an empty reference")
    return edit_distance(list(reference), list(hypothesis)) / len(reference)


def asr_decide(transcription: str, target_word: str,
               substring: bool = False) -> PromptLabel:
    """Accept when the target occurs in the transcription.

    Default is a token-boundary match after lowercasing; the substring flag
    relaxes it to a raw containment check.
    """
    if not target_word:
        raise StateError("target word must be nonempty")
    transcription = transcription.lower()
    target = target_word.lower()
    if substring:
        hit = target in transcription
    else:
        hit = target in transcription.split()
    return PromptLabel(target_word) if hit else MISPRONOUNCED


# --- model wrappers and checkpoints ------------------------------------------


class ClassifierModel:
    def __init__(self, params: MlpParams, vocabulary: tuple[str, ...]):
        self.params = params
        self.vocabulary = tuple(vocabulary)

    def predict_entry(self, entry, frames: np.ndarray) -> PromptLabel:
        from .dataio import pool_mean

        return classify(self.params, pool_mean(frames), self.vocabulary)


class CtcModel:
    def __init__(self, params: CtcParams, vocabulary: tuple[str, ...],
                 keep_accents: bool = False, substring: bool = False):
        self.params = params
        self.vocabulary = tuple(vocabulary)
        self.keep_accents = keep_accents
        self.substring = substring

    def transcribe(self, frames: np.ndarray) -> str:
        return ctc_greedy_decode(ctc_logprobs(self.params, frames), self.params.alphabet)

    def predict_entry(self, entry, frames: np.ndarray) -> PromptLabel:
        text = self.transcribe(frames)
        target = normalize_word(entry.target_word, self.keep_accents)
        verdict = asr_decide(text, target, substring=self.substring)
        if verdict.is_mispronounced:
            return MISPRONOUNCED
        # report the original manifest word, not its folded form
        return PromptLabel(entry.target_word)


def save_classifier_checkpoint(path, p: MlpParams, vocabulary) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    matrices = {
        "w1": p.w1.value, "b1": p.b1.value, "gamma": p.gamma.value,
        "beta": p.beta.value, "running_mean": p.bn.running_mean,
        "running_var": p.bn.running_var, "w2": p.w2.value, "b2": p.b2.value,
    }
    for name, value in matrices.items():
        write_embedding_file(path / f"{name}.emb", value)
    sidecar = {
        "kind": "classifier",
        "vocabulary": list(vocabulary),
        "momentum": p.bn.momentum,
        "eps": p.bn.eps,
        "matrices": {name: f"{name}.emb" for name in matrices},
    }
    out = path / "checkpoint.json"
    with open(out, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def load_classifier_checkpoint(path) -> tuple[MlpParams, tuple[str, ...]]:
    sidecar, root = _load_sidecar(path, "classifier")
    mats = {name: read_embedding_file(root / rel)
            for name, rel in sidecar["matrices"].items()}
    hidden = mats["w1"].shape[1]
    bn = BatchNormState(hidden, momentum=sidecar["momentum"], eps=sidecar["eps"])
    bn.running_mean = mats["running_mean"]
    bn.running_var = mats["running_var"]
    params = MlpParams(
        w1=Param(mats["w1"], "w1"), b1=Param(mats["b1"], "b1"),
        gamma=Param(mats["gamma"], "gamma"), beta=Param(mats["beta"], "beta"),
        bn=bn, w2=Param(mats["w2"], "w2"), b2=Param(mats["b2"], "b2"))
    return params, tuple(sidecar["vocabulary"])


def save_ctc_checkpoint(path, p: CtcParams, vocabulary) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_embedding_file(path / "w.emb", p.w.value)
    write_embedding_file(path / "b.emb", p.b.value)
    sidecar = {
        "kind": "ctc",
        "vocabulary": list(vocabulary),
        "symbols": list(p.alphabet.symbols),
        "matrices": {"w": "w.emb", "b": "b.emb"},
    }
    out = path / "checkpoint.json"
    with open(out, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def load_ctc_checkpoint(path) -> tuple[CtcParams, tuple[str, ...]]:
    sidecar, root = _load_sidecar(path, "ctc")
    alphabet = Alphabet(tuple(sidecar["symbols"]))
    params = CtcParams(
        w=Param(read_embedding_file(root / sidecar["matrices"]["w"]), "ctc_w"),
        b=Param(read_embedding_file(root / sidecar["matrices"]["b"]), "ctc_b"),
        alphabet=alphabet)
    return params, tuple(sidecar["vocabulary"])


def _load_sidecar(path, kind: str):
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    if not path.is_file():
        raise StateError(f"no checkpoint at {path}")
    with open(path, "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    if sidecar.get("kind") != kind:
        raise StateError(f"checkpoint kind {sidecar.get('kind')!r} is not {kind!r}")
    return sidecar, path.parent


def load_any_checkpoint(path):
    """Dispatch on the sidecar's kind field; returns a model-params tuple."""
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint.json"
    if not p.is_file():
        raise StateError(f"no checkpoint at {p}")
    with open(p, "r", encoding="utf-8") as f:
        kind = json.load(f).get("kind")
    if kind == "matcher":
        from .matcher import load_matcher_checkpoint

        return "matcher", load_matcher_checkpoint(p)
    if kind == "classifier":
        return "classifier", load_classifier_checkpoint(p)
    if kind == "ctc":
        return "ctc", load_ctc_checkpoint(p)
    raise StateError(f"unknown checkpoint kind {kind!r}")
