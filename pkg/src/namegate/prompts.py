"""Prompt construction, class labels, and text embedding providers.

A recording's label is either the target word (clinician marked it correct)
or the single generic mispronounced class. Prompts rendered from these
labels are the text side of the matching head.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import ManifestEntry, read_embedding_file
from .errors import ConfigError, ManifestError, UnknownPromptError

DEFAULT_POSITIVE_TEMPLATE = "Correct pronunciation of the word {word}"
DEFAULT_NEGATIVE_TEXT = "Mispronounced word"


@dataclass(frozen=True)
class PromptLabel:
    """Either word(<target>) or the generic mispronounced class."""

    word: str | None = None

    @property
    def is_mispronounced(self) -> bool:
        return self.word is None

    def __str__(self):
        return "mispronounced" if self.word is None else f"word({self.word})"


MISPRONOUNCED = PromptLabel(None)


@dataclass(frozen=True)
class PromptTemplate:
    positive_template: str = DEFAULT_POSITIVE_TEMPLATE
    negative_text: str = DEFAULT_NEGATIVE_TEXT

    def __post_init__(self):
        if self.positive_template.count("{word}") != 1:
            raise ConfigError(
                f"positive template must contain exactly one {{word}} placeholder: "
                f"{self.positive_template!r}")


def render_prompt(label: PromptLabel, template: PromptTemplate) -> str:
    if label.is_mispronounced:
        return template.negative_text
    return template.positive_template.replace("{word}", label.word)


def label_of(entry: ManifestEntry) -> PromptLabel:
    return PromptLabel(entry.target_word) if entry.correct else MISPRONOUNCED


class SyntheticTextProvider:
    """Deterministic pseudo-random unit vectors keyed by the prompt string.

    The first 8 bytes of sha256(prompt) key a counter-based generator, so the
    same prompt always maps to the same vector in any process.
    """

    mode = "synthetic"

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise ConfigError(f"provider dim must be >= 1, got {dim}")
        self.dim = int(dim)
        self.seed = int(seed)

    def embedding(self, prompt: str) -> np.ndarray:
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64) ^ np.uint64(self.seed)
        rng = np.random.Generator(np.random.Philox(key=key))
        v = rng.standard_normal(self.dim)
        v /= np.linalg.norm(v)
        return v.astype(np.float32)[None, :]


class FileBackedTextProvider:
    """Prompt vectors loaded from a JSON-lines manifest of EMB1 files."""

    mode = "file_backed"

    def __init__(self, vectors: dict[str, np.ndarray], dim: int):
        self._vectors = vectors
        self.dim = dim

    @classmethod
    def load(cls, manifest_path) -> "FileBackedTextProvider":
        manifest_path = Path(manifest_path)
        root = manifest_path.parent
        vectors: dict[str, np.ndarray] = {}
        dim = None
        with open(manifest_path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ManifestError(f"invalid JSON: {e.msg}", line=line_no) from e
                if set(obj) != {"prompt", "embedding_path"}:
                    raise ManifestError(
                        f"expected exactly prompt/embedding_path, got {sorted(obj)}",
                        line=line_no)
                vec = read_embedding_file(root / obj["embedding_path"])
                if vec.shape[0] != 1:
                    raise ManifestError(
                        f"prompt vector must be 1 x dim, got {vec.shape}", line=line_no)
                if dim is None:
                    dim = vec.shape[1]
                elif vec.shape[1] != dim:
                    raise ManifestError(
                        f"prompt vector dim {vec.shape[1]} disagrees with {dim}",
                        line=line_no)
                if obj["prompt"] in vectors:
                    raise ManifestError(f"duplicate prompt {obj['prompt']!r}", line=line_no)
                vectors[obj["prompt"]] = vec
        if not vectors:
            raise ManifestError(f"{manifest_path}: prompt manifest is empty")
        return cls(vectors, dim)

    def embedding(self, prompt: str) -> np.ndarray:
        try:
            return self._vectors[prompt]
        except KeyError:
            raise UnknownPromptError(f"no stored embedding for prompt {prompt!r}") from None


def write_prompt_manifest(out_dir, vectors: dict[str, np.ndarray],
                          manifest_name: str = "prompts.jsonl") -> Path:
    """Write prompt vectors as EMB1 files plus the lookup manifest."""
    from .dataio import write_embedding_file

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / manifest_name
    with open(manifest_path, "w", encoding="utf-8") as f:
        for i, (prompt, vec) in enumerate(vectors.items()):
            rel = f"prompt_{i:04d}.emb"
            write_embedding_file(out_dir / rel, np.asarray(vec, dtype=np.float32))
            f.write(json.dumps({"prompt": prompt, "embedding_path": rel}) + "\n")
    return manifest_path
