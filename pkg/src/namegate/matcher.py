"""The audio-text matching head.

Two linear projections map pooled audio and prompt embeddings into one
shared space; rows are L2-normalized there. Paired similarity logits are
cosine matrices scaled by learnable positive factors exp(s), and training
minimizes the symmetric cross-entropy over in-batch negatives with identity
labels. Inference scores a recording against the positive prompt of every
vocabulary word plus the one generic negative prompt and takes the argmax.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import read_embedding_file, write_embedding_file
from .errors import EmptyInputError, ShapeError, StateError
from .numerics import (
    Param,
    Tape,
    cross_entropy_mean,
    l2_normalize_rows,
    matmul,
)
from .prompts import MISPRONOUNCED, PromptLabel, PromptTemplate, render_prompt

INIT_TEMPERATURE = 0.07
DEFAULT_SHARED_DIM = 256


@dataclass
class MatcherParams:
    audio_proj: Param    # d_audio x d
    audio_bias: Param    # 1 x d
    text_proj: Param     # d_text x d
    text_bias: Param     # 1 x d
    audio_log_scale: Param  # 0-d, logit scale is exp(value)
    text_log_scale: Param   # 0-d
    shared_dim: int

    def all_params(self) -> list[Param]:
        return [self.audio_proj, self.audio_bias, self.text_proj, self.text_bias,
                self.audio_log_scale, self.text_log_scale]

    def reset_grads(self) -> None:
        for p in self.all_params():
            p.reset_grad()

    def copy(self) -> "MatcherParams":
        return MatcherParams(
            *(Param(p.value, p.name) for p in self.all_params()[:4]),
            Param(self.audio_log_scale.value, self.audio_log_scale.name),
            Param(self.text_log_scale.value, self.text_log_scale.name),
            shared_dim=self.shared_dim)


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, fan_out: int,
                    dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_matcher(d_audio: int, d_text: int, d: int = DEFAULT_SHARED_DIM,
                 seed: int = 0, dtype=np.float32) -> MatcherParams:
    """Seeded head initialization; logit scales start at log(1/0.07)."""
    if min(d_audio, d_text, d) < 1:
        raise ShapeError(f"dimensions must be >= 1, got {(d_audio, d_text, d)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3A7C4]))
    log_scale = math.log(1.0 / INIT_TEMPERATURE)
    return MatcherParams(
        audio_proj=Param(_uniform_fan_in(rng, d_audio, d, dtype), "audio_proj"),
        audio_bias=Param(np.zeros((1, d), dtype=dtype), "audio_bias"),
        text_proj=Param(_uniform_fan_in(rng, d_text, d, dtype), "text_proj"),
        text_bias=Param(np.zeros((1, d), dtype=dtype), "text_bias"),
        audio_log_scale=Param(np.asarray(log_scale, dtype=dtype), "audio_log_scale"),
        text_log_scale=Param(np.asarray(log_scale, dtype=dtype), "text_log_scale"),
        shared_dim=d)


def embed_audio(p: MatcherParams, pooled: np.ndarray) -> np.ndarray:
    """Project pooled audio rows into the shared space, unit-normalized."""
    pooled = np.ascontiguousarray(pooled, dtype=p.audio_proj.value.dtype)
    return l2_normalize_rows(matmul(pooled, p.audio_proj.value) + p.audio_bias.value)


def embed_text(p: MatcherParams, pooled: np.ndarray) -> np.ndarray:
    """Project prompt embedding rows into the shared space, unit-normalized."""
    pooled = np.ascontiguousarray(pooled, dtype=p.text_proj.value.dtype)
    return l2_normalize_rows(matmul(pooled, p.text_proj.value) + p.text_bias.value)


def pair_logits(p: MatcherParams, audio: np.ndarray,
                text: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scaled similarity logits for both directions of a paired batch."""
    if audio.shape != text.shape:
        raise ShapeError(f"paired batches must share a shape: {audio.shape} vs {text.shape}")
    for name, m in (("audio", audio), ("text", text)):
        norms = np.linalg.norm(m, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-4:
            raise ShapeError(f"{name} rows must be unit norm (max deviation "
                             f"{np.max(np.abs(norms - 1.0)):.2e})")
    sim = matmul(audio, np.ascontiguousarray(text.T))
    logits_at = np.exp(p.audio_log_scale.value) * sim
    logits_ta = np.exp(p.text_log_scale.value) * sim.T
    return logits_at, np.ascontiguousarray(logits_ta)


def contrastive_loss(logits_at: np.ndarray, logits_ta: np.ndarray) -> float:
    """Symmetric cross-entropy with identity labels over a paired batch."""
    n = logits_at.shape[0]
    if logits_at.shape != (n, n) or logits_ta.shape != (n, n):
        raise ShapeError(f"logits must be square and equal-sized: "
                         f"{logits_at.shape} vs {logits_ta.shape}")
    labels = np.arange(n)
    return 0.5 * (cross_entropy_mean(logits_at, labels)
                  + cross_entropy_mean(logits_ta, labels))


def taped_contrastive_loss(tape: Tape, p: MatcherParams, pooled_audio: np.ndarray,
                           text_vectors: np.ndarray):
    """Training-graph version of the loss; gradients land in p via tape.backward."""
    n = pooled_audio.shape[0]
    if text_vectors.shape[0] != n:
        raise ShapeError(f"batch sides differ: {n} audio vs {text_vectors.shape[0]} text")
    dtype = p.audio_proj.value.dtype
    a0 = tape.constant(np.ascontiguousarray(pooled_audio, dtype=dtype))
    t0 = tape.constant(np.ascontiguousarray(text_vectors, dtype=dtype))
    audio = tape.l2_normalize_rows(
        tape.add_bias(tape.matmul(a0, tape.leaf(p.audio_proj)), tape.leaf(p.audio_bias)))
    text = tape.l2_normalize_rows(
        tape.add_bias(tape.matmul(t0, tape.leaf(p.text_proj)), tape.leaf(p.text_bias)))
    sim = tape.matmul_nt(audio, text)
    logits_at = tape.scale_exp(sim, tape.leaf(p.audio_log_scale))
    logits_ta = tape.scale_exp(tape.transpose(sim), tape.leaf(p.text_log_scale))
    labels = np.arange(n)
    loss = tape.scale_const(
        tape.add(tape.softmax_cross_entropy(logits_at, labels),
                 tape.softmax_cross_entropy(logits_ta, labels)), 0.5)
    return loss


def score_candidates(p: MatcherParams, audio_emb: np.ndarray,
                     candidates: list[tuple[PromptLabel, np.ndarray]]):
    """Cosine scores of one audio row against candidate text vectors.

    Ties go to the earliest candidate, so callers keep vocabulary order with
    the mispronounced candidate last.
    """
    if not candidates:
        raise EmptyInputError("candidate list is empty")
    audio_emb = np.asarray(audio_emb)
    scores = np.empty(len(candidates), dtype=np.float64)
    for i, (_, vec) in enumerate(candidates):
        scores[i] = float(np.dot(audio_emb[0], np.asarray(vec)[0]))
    best = int(np.argmax(scores))
    return scores, candidates[best][0]


class MatcherModel:
    """A trained head bundled with its candidate prompts for inference.

    prompt_matrix holds the raw provider vectors, one row per vocabulary word
    in order plus the negative prompt last, so a persisted model can score
    recordings without the original provider.
    """

    def __init__(self, params: MatcherParams, vocabulary: tuple[str, ...],
                 template: PromptTemplate, provider):
        prompt_matrix = np.concatenate(
            [provider.embedding(render_prompt(label, template))
             for label in _candidate_labels(vocabulary)], axis=0)
        self._init(params, vocabulary, template, prompt_matrix)

    @classmethod
    def from_prompt_matrix(cls, params: MatcherParams, vocabulary, template,
                           prompt_matrix: np.ndarray) -> "MatcherModel":
        self = cls.__new__(cls)
        self._init(params, tuple(vocabulary), template, prompt_matrix)
        return self

    def _init(self, params, vocabulary, template, prompt_matrix):
        if prompt_matrix.shape[0] != len(vocabulary) + 1:
            raise ShapeError(f"need {len(vocabulary) + 1} prompt rows, "
                             f"got {prompt_matrix.shape[0]}")
        self.params = params
        self.vocabulary = tuple(vocabulary)
        self.template = template
        self.prompt_matrix = np.asarray(prompt_matrix, dtype=np.float32)
        embedded = embed_text(params, self.prompt_matrix)
        self.candidates = [(label, embedded[i:i + 1])
                           for i, label in enumerate(_candidate_labels(self.vocabulary))]

    def predict_pooled(self, pooled: np.ndarray) -> tuple[np.ndarray, PromptLabel]:
        audio = embed_audio(self.params, pooled)
        return score_candidates(self.params, audio, self.candidates)

    def predict_entry(self, entry, frames: np.ndarray) -> PromptLabel:
        from .dataio import pool_mean

        return self.predict_pooled(pool_mean(frames))[1]


def _candidate_labels(vocabulary) -> list[PromptLabel]:
    return [PromptLabel(w) for w in vocabulary] + [MISPRONOUNCED]


def save_matcher_checkpoint(path, p: MatcherParams, vocabulary, template: PromptTemplate,
                            prompt_matrix: np.ndarray | None = None) -> Path:
    """Write matrices as EMB1 plus a JSON sidecar with scalars and metadata.

    When the raw candidate prompt vectors are supplied they are stored too,
    making the checkpoint sufficient for standalone inference.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    matrices = {
        "audio_proj": p.audio_proj.value,
        "audio_bias": p.audio_bias.value,
        "text_proj": p.text_proj.value,
        "text_bias": p.text_bias.value,
    }
    if prompt_matrix is not None:
        matrices["prompt_vectors"] = np.asarray(prompt_matrix, dtype=np.float32)
    for name, value in matrices.items():
        write_embedding_file(path / f"{name}.emb", value)
    sidecar = {
        "kind": "matcher",
        "shared_dim": p.shared_dim,
        "audio_dim": p.audio_proj.value.shape[0],
        "text_dim": p.text_proj.value.shape[0],
        "audio_log_scale": float(p.audio_log_scale.value),
        "text_log_scale": float(p.text_log_scale.value),
        "vocabulary": list(vocabulary),
        "positive_template": template.positive_template,
        "negative_text": template.negative_text,
        "matrices": {name: f"{name}.emb" for name in matrices},
    }
    out = path / "checkpoint.json"
    with open(out, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def load_matcher_checkpoint(path):
    """Returns (params, vocabulary, template, prompt_matrix or None)."""
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    if not path.is_file():
        raise StateError(f"no checkpoint at {path}")
    with open(path, "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    if sidecar.get("kind") != "matcher":
        raise StateError(f"checkpoint kind {sidecar.get('kind')!r} is not a matcher")
    root = path.parent
    mats = {name: read_embedding_file(root / rel)
            for name, rel in sidecar["matrices"].items()}
    params = MatcherParams(
        audio_proj=Param(mats["audio_proj"], "audio_proj"),
        audio_bias=Param(mats["audio_bias"], "audio_bias"),
        text_proj=Param(mats["text_proj"], "text_proj"),
        text_bias=Param(mats["text_bias"], "text_bias"),
        audio_log_scale=Param(np.asarray(sidecar["audio_log_scale"], dtype=np.float32),
                              "audio_log_scale"),
        text_log_scale=Param(np.asarray(sidecar["text_log_scale"], dtype=np.float32),
                             "text_log_scale"),
        shared_dim=int(sidecar["shared_dim"]))
    template = PromptTemplate(positive_template=sidecar["positive_template"],
                              negative_text=sidecar["negative_text"])
    return params, tuple(sidecar["vocabulary"]), template, mats.get("prompt_vectors")
