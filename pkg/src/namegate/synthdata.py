"""Deterministic synthetic dataset generator for desk-scale experiments.

Geometry: every vocabulary word gets a unit centroid in audio space; a
correct recording's frames scatter around its word centroid plus a per
speaker offset. Mispronounced recordings come from a separate pool of decoy
centroids (swap), a random direction (noise), or a partial mix of target
and decoy (blend), so the mispronounced class occupies its own region
rather than colliding with vocabulary words.

The paired prompt manifest stores, for each positive prompt, the image of
the word's audio centroid under one fixed random linear map, which keeps
the matching task solvable by linear projection heads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dataio import write_embedding_file
from .errors import ConfigError
from .prompts import (
    DEFAULT_NEGATIVE_TEXT,
    DEFAULT_POSITIVE_TEMPLATE,
    MISPRONOUNCED,
    PromptLabel,
    PromptTemplate,
    render_prompt,
    write_prompt_manifest,
)

MISPRONOUNCE_MODES = ("noise", "swap", "blend")

_SYLLABLES = ("ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du",
              "fa", "fe", "fi", "fo", "fu", "ga", "ge", "gi", "go", "gu",
              "la", "le", "li", "lo", "lu", "ma", "me", "mi", "mo", "mu",
              "na", "ne", "ni", "no", "nu", "pa", "pe", "pi", "po", "pu",
              "ra", "re", "ri", "ro", "ru", "sa", "se", "si", "so", "su",
              "ta", "te", "ti", "to", "tu", "va", "ve", "vi", "vo", "vu")


@dataclass(frozen=True)
class SynthSpec:
    n_speakers: int
    n_words: int
    repeats: int
    correct_rate: float
    frame_dim: int = 64
    text_dim: int = 64
    frames_min: int = 20
    frames_max: int = 120
    cluster_spread: float = 0.05   # within-recording frame noise scale
    speaker_shift: float = 0.05    # per-speaker offset scale
    mispronounce_mode: str = "swap"
    seed: int = 0
    positive_template: str = DEFAULT_POSITIVE_TEMPLATE
    negative_text: str = DEFAULT_NEGATIVE_TEXT

    def __post_init__(self):
        if not (0.0 < self.correct_rate <= 1.0):
            raise ConfigError(f"correct_rate must be in (0, 1], got {self.correct_rate}")
        if self.n_speakers < 3:
            raise ConfigError(f"need >= 3 speakers for cross-validation, got {self.n_speakers}")
        if min(self.frame_dim, self.text_dim) < 2:
            raise ConfigError("embedding dimensions must be >= 2")
        if self.n_words < 2 or self.repeats < 1:
            raise ConfigError("need >= 2 words and >= 1 repeat")
        if self.mispronounce_mode not in MISPRONOUNCE_MODES:
            raise ConfigError(f"mispronounce_mode must be one of {MISPRONOUNCE_MODES}")
        if not (1 <= self.frames_min <= self.frames_max):
            raise ConfigError("frames range must satisfy 1 <= min <= max")


def preset(name: str, seed: int = 0) -> SynthSpec:
    """Presets mirroring the two clinical corpora's shape and label balance."""
    if name == "ds1-like":
        return SynthSpec(n_speakers=34, n_words=90, repeats=2, correct_rate=0.903, seed=seed)
    if name == "ds2-like":
        return SynthSpec(n_speakers=16, n_words=56, repeats=2, correct_rate=0.575, seed=seed)
    if name == "ds1-small":
        return SynthSpec(n_speakers=10, n_words=12, repeats=4, correct_rate=0.9, seed=seed)
    raise ConfigError(f"unknown preset {name!r}; have ds1-like, ds2-like, ds1-small")


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _make_words(rng: np.random.Generator, n: int) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < n:
        k = int(rng.integers(2, 4))
        word = "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), size=k))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return sorted(words)


@dataclass
class GenerationResult:
    manifest_path: Path
    prompt_manifest_path: Path
    sidecar_path: Path
    n_correct: int
    n_total: int
    words: list[str] = field(default_factory=list)


def generate(spec: SynthSpec, out_dir) -> GenerationResult:
    """Write EMB1 frame files, the dataset manifest, the paired prompt
    manifest, and a ground-truth sidecar. Bitwise deterministic per spec."""
    out_dir = Path(out_dir)
    emb_dir = out_dir / "embeddings"
    emb_dir.mkdir(parents=True, exist_ok=True)

    # independent child streams so structure is invariant to noise scales
    root_ss = np.random.SeedSequence([spec.seed, 0x5D47A])
    structure_rng, label_rng, noise_rng, text_rng = (
        np.random.default_rng(ss) for ss in root_ss.spawn(4))

    words = _make_words(structure_rng, spec.n_words)
    speakers = [f"spk{i:03d}" for i in range(spec.n_speakers)]
    centroids = _unit_rows(structure_rng, spec.n_words, spec.frame_dim)
    decoys = _unit_rows(structure_rng, spec.n_words, spec.frame_dim)
    speaker_offsets = (spec.speaker_shift / np.sqrt(spec.frame_dim)
                       * structure_rng.standard_normal((spec.n_speakers, spec.frame_dim)))

    frame_scale = spec.cluster_spread / np.sqrt(spec.frame_dim)
    manifest_rows = []
    n_correct = 0
    for si, speaker in enumerate(speakers):
        for wi, word in enumerate(words):
            for rep in range(spec.repeats):
                rec_id = f"{speaker}_{word}_{rep}"
                correct = bool(label_rng.random() < spec.correct_rate)
                t = int(noise_rng.integers(spec.frames_min, spec.frames_max + 1))
                if correct:
                    base = centroids[wi]
                    n_correct += 1
                else:
                    if spec.mispronounce_mode == "swap":
                        base = decoys[int(noise_rng.integers(spec.n_words))]
                    elif spec.mispronounce_mode == "noise":
                        v = noise_rng.standard_normal(spec.frame_dim)
                        base = v / np.linalg.norm(v)
                    else:  # blend: partial articulation between target and a decoy
                        mix = noise_rng.uniform(0.3, 0.7)
                        decoy = decoys[int(noise_rng.integers(spec.n_words))]
                        v = mix * centroids[wi] + (1.0 - mix) * decoy
                        base = v / np.linalg.norm(v)
                frames = (base[None, :] + speaker_offsets[si][None, :]
                          + frame_scale * noise_rng.standard_normal((t, spec.frame_dim)))
                rel = f"embeddings/{rec_id}.emb"
                write_embedding_file(out_dir / rel, frames.astype(np.float32))
                manifest_rows.append({
                    "recording_id": rec_id,
                    "speaker_id": speaker,
                    "target_word": word,
                    "correct": correct,
                    "embedding_path": rel,
                    "frames": t,
                    "dim": spec.frame_dim,
                })

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as f:
        for row in manifest_rows:
            f.write(json.dumps(row) + "\n")

    # text side: fixed random linear map of the audio centroids
    text_map = text_rng.standard_normal((spec.frame_dim, spec.text_dim)) / np.sqrt(spec.frame_dim)
    template = PromptTemplate(positive_template=spec.positive_template,
                              negative_text=spec.negative_text)
    prompt_vectors: dict[str, np.ndarray] = {}
    for wi, word in enumerate(words):
        vec = centroids[wi] @ text_map
        vec = vec / np.linalg.norm(vec)
        prompt_vectors[render_prompt(PromptLabel(word), template)] = vec[None, :].astype(np.float32)
    neg_anchor = text_rng.standard_normal(spec.text_dim)
    neg_anchor /= np.linalg.norm(neg_anchor)
    prompt_vectors[render_prompt(MISPRONOUNCED, template)] = neg_anchor[None, :].astype(np.float32)
    prompt_manifest_path = write_prompt_manifest(out_dir / "prompts", prompt_vectors)

    sidecar_path = out_dir / "ground_truth.json"
    sidecar = {
        "spec": asdict(spec),
        "words": words,
        "speakers": speakers,
        "n_total": len(manifest_rows),
        "n_correct": n_correct,
        "correct_fraction": n_correct / len(manifest_rows),
        "n_decoys": spec.n_words,
        "manifest": "manifest.jsonl",
        "prompt_manifest": "prompts/prompts.jsonl",
    }
    with open(sidecar_path, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")

    return GenerationResult(manifest_path=manifest_path,
                            prompt_manifest_path=prompt_manifest_path,
                            sidecar_path=sidecar_path,
                            n_correct=n_correct, n_total=len(manifest_rows),
                            words=words)


def expected_label_draws(spec: SynthSpec) -> list[bool]:
    """Replay the Bernoulli label stream for a spec, in generation order."""
    root_ss = np.random.SeedSequence([spec.seed, 0x5D47A])
    _, label_ss, _, _ = root_ss.spawn(4)
    label_rng = np.random.default_rng(label_ss)
    n = spec.n_speakers * spec.n_words * spec.repeats
    return [bool(label_rng.random() < spec.correct_rate) for _ in range(n)]


def generate_layer_sweep(spec: SynthSpec, layer_noise: dict[int, float],
                         out_root) -> dict[int, Path]:
    """One dataset per layer index, identical structure, differing only in
    frame noise scale. Returns layer -> manifest path."""
    out_root = Path(out_root)
    manifests: dict[int, Path] = {}
    for layer, sigma in sorted(layer_noise.items()):
        layer_spec = SynthSpec(**{**asdict(spec), "cluster_spread": float(sigma)})
        result = generate(layer_spec, out_root / f"layer_{layer:02d}")
        manifests[layer] = result.manifest_path
    return manifests
