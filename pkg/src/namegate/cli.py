"""Command-line entry point.

Exit codes: 0 success (or a positive infer verdict), 1 negative infer
verdict, 2 configuration problems, 3 I/O and file-format problems, 4
numeric failures. All randomness flows from the config seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from .baselines import (
    ClassifierModel,
    CtcModel,
    load_any_checkpoint,
    normalize_word,
    save_classifier_checkpoint,
    save_ctc_checkpoint,
)
from .dataio import load_dataset, read_embedding_file
from .errors import (
    ConfigError,
    FormatError,
    ManifestError,
    NamegateError,
    NumericError,
    StateError,
)
from .evaluation import crossval, default_jobs, layer_sweep
from .gradcheck import TOLERANCE, run_gradcheck
from .matcher import MatcherModel, save_matcher_checkpoint
from .metrics import ConfusionMatrix, compute_metrics
from .prompts import (
    FileBackedTextProvider,
    MISPRONOUNCED,
    PromptLabel,
    SyntheticTextProvider,
)
from .synthdata import SynthSpec, generate, preset
from .training import TrainConfig, default_config

MISPRONOUNCED_LABEL = "mispronounced"


def label_to_string(label: PromptLabel) -> str:
    return MISPRONOUNCED_LABEL if label.is_mispronounced else label.word


def _read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: "
                          f"{e.msg}") from e


def _require_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


# --- gen-synth ----------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    raw = _read_json(args.spec)
    spec_fields = {f.name for f in dataclass_fields(SynthSpec)}
    _require_keys(raw, spec_fields | {"preset"}, "synth spec")
    try:
        if "preset" in raw:
            base = preset(raw.pop("preset"), seed=raw.get("seed", 0))
            merged = {**base.__dict__, **raw}
            spec = SynthSpec(**merged)
        else:
            spec = SynthSpec(**raw)
    except TypeError as e:
        raise ConfigError(f"synth spec: {e}") from e
    result = generate(spec, args.out)
    print(result.manifest_path)
    return 0


# --- run config ----------------------------------------------------------------


def load_run_config(path):
    """Parse a crossval run config; paths resolve relative to the file."""
    path = Path(path)
    raw = _read_json(path)
    _require_keys(raw, {"seed", "model", "data", "train", "eval"}, "run config")
    for key in ("model", "data"):
        if key not in raw:
            raise ConfigError(f"run config: missing required key {key!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("run config: seed must be an integer")
    model = raw["model"]

    data = raw["data"]
    _require_keys(data, {"manifest", "provider"}, "data section")
    if "manifest" not in data:
        raise ConfigError("data section: missing manifest")
    manifest = (path.parent / data["manifest"]).resolve()

    provider = None
    if "provider" in data:
        pspec = data["provider"]
        _require_keys(pspec, {"mode", "manifest", "dim", "seed"}, "provider section")
        mode = pspec.get("mode")
        if mode == "file_backed":
            if "manifest" not in pspec:
                raise ConfigError("file_backed provider needs a manifest")
            provider = FileBackedTextProvider.load((path.parent / pspec["manifest"]).resolve())
        elif mode == "synthetic":
            provider = SyntheticTextProvider(dim=pspec.get("dim", 768),
                                             seed=pspec.get("seed", 0))
        else:
            raise ConfigError(f"provider mode must be file_backed or synthetic, got {mode!r}")
    if model == "matcher" and provider is None:
        raise ConfigError("the matcher needs a text embedding provider")

    train = dict(raw.get("train", {}))
    config_fields = {f.name for f in dataclass_fields(TrainConfig)} - {"objective", "seed"}
    _require_keys(train, config_fields, "train section")
    config = default_config(model, seed=seed, **train)

    eval_section = dict(raw.get("eval", {}))
    _require_keys(eval_section, {"csv", "save_checkpoints"}, "eval section")
    eval_opts = {"csv": eval_section.get("csv", True),
                 "save_checkpoints": eval_section.get("save_checkpoints", True)}
    return config, manifest, provider, eval_opts


def _write_summary(out_dir: Path, config: TrainConfig, summary, selections,
                   eval_opts: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "meta": {
            "model": config.objective,
            "seed": config.seed,
            "generated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        },
        "summary": summary.to_dict(),
        "selections": [s.to_dict() for s in selections],
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    if eval_opts.get("csv", True):
        rows = [("accuracy", "accuracy"), ("precision", "macro_precision"),
                ("recall", "macro_recall"), ("f1_score", "macro_f1")]
        with open(out_dir / "table.csv", "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "mean", "std"])
            for display, key in rows:
                writer.writerow([display, repr(summary.mean[key]), repr(summary.std[key])])


def _save_fold_checkpoints(out_dir: Path, models: dict) -> None:
    for speaker, model in models.items():
        target = out_dir / "checkpoints" / speaker
        if isinstance(model, MatcherModel):
            save_matcher_checkpoint(target, model.params, model.vocabulary,
                                    model.template, prompt_matrix=model.prompt_matrix)
        elif isinstance(model, ClassifierModel):
            save_classifier_checkpoint(target, model.params, model.vocabulary)
        elif isinstance(model, CtcModel):
            save_ctc_checkpoint(target, model.params, model.vocabulary)


def cmd_crossval(args) -> int:
    config, manifest, provider, eval_opts = load_run_config(args.config)
    dataset = load_dataset(manifest)
    jobs = args.jobs if args.jobs is not None else default_jobs()
    out_dir = Path(args.out)
    summary, selections, models = crossval(config, dataset, provider, jobs=jobs)
    _write_summary(out_dir, config, summary, selections, eval_opts)
    if eval_opts.get("save_checkpoints", True):
        _save_fold_checkpoints(out_dir, models)
    print(out_dir / "summary.json")
    return 0


def cmd_eval(args) -> int:
    pairs = []
    with open(args.predictions, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON: {e.msg}", line=line_no) from e
            _require_keys(obj, {"true", "predicted", "recording_id"},
                          f"predictions line {line_no}")
            if "true" not in obj or "predicted" not in obj:
                raise ManifestError("need true and predicted labels", line=line_no)
            pairs.append((obj["true"], obj["predicted"]))
    if not pairs:
        raise ManifestError("predictions file is empty")
    words = sorted({w for pair in pairs for w in pair if w != MISPRONOUNCED_LABEL})

    def to_label(s: str) -> PromptLabel:
        return MISPRONOUNCED if s == MISPRONOUNCED_LABEL else PromptLabel(s)

    cm = ConfusionMatrix.from_labels(
        [(to_label(t), to_label(p)) for t, p in pairs], tuple(words))
    report = compute_metrics(cm)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_infer(args) -> int:
    kind, payload = load_any_checkpoint(args.checkpoint)
    frames = read_embedding_file(args.embedding)
    target = args.target
    result = {"target": target, "kind": kind}

    if kind == "matcher":
        params, vocabulary, template, prompt_matrix = payload
        if prompt_matrix is None:
            raise ConfigError("matcher checkpoint lacks stored prompt vectors; "
                              "re-export it with them to run standalone inference")
        model = MatcherModel.from_prompt_matrix(params, vocabulary, template, prompt_matrix)
        from .dataio import pool_mean

        scores, label = model.predict_pooled(pool_mean(frames))
        result["scores"] = [
            {"label": label_to_string(lb), "score": float(s)}
            for (lb, _), s in zip(model.candidates, scores)
        ]
    elif kind == "classifier":
        params, vocabulary = payload
        model = ClassifierModel(params, vocabulary)
        label = model.predict_entry(None, frames)
        from .baselines import mlp_forward
        from .dataio import pool_mean

        logits = mlp_forward(params, pool_mean(frames), training=False)[0]
        names = list(vocabulary) + [MISPRONOUNCED_LABEL]
        result["scores"] = [{"label": n, "score": float(v)}
                            for n, v in zip(names, logits)]
    else:
        params, vocabulary = payload
        model = CtcModel(params, vocabulary)
        transcription = model.transcribe(frames)
        from .baselines import asr_decide

        label = asr_decide(transcription, normalize_word(target))
        if not label.is_mispronounced:
            label = PromptLabel(target)
        result["transcription"] = transcription

    result["predicted"] = label_to_string(label)
    verdict_positive = (not label.is_mispronounced) and label.word == target
    result["verdict"] = "match" if verdict_positive else "no_match"
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0 if verdict_positive else 1


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(seed=args.seed, n_seeds=args.seeds)
    ok = True
    for name, err in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        ok = ok and err < TOLERANCE
        print(f"{name}: max relative error {err:.3e} [{status}]")
    return 0 if ok else 4


def cmd_layer_sweep(args) -> int:
    path = Path(args.config)
    raw = _read_json(path)
    _require_keys(raw, {"seed", "layers", "train"}, "layer sweep config")
    if "layers" not in raw or not raw["layers"]:
        raise ConfigError("layer sweep config: needs a nonempty layers map")
    layers = {}
    for key, rel in raw["layers"].items():
        try:
            idx = int(key)
        except ValueError:
            raise ConfigError(f"layer index {key!r} is not an integer") from None
        layers[idx] = str((path.parent / rel).resolve())
    train = dict(raw.get("train", {}))
    config_fields = {f.name for f in dataclass_fields(TrainConfig)} - {"objective", "seed"}
    _require_keys(train, config_fields, "train section")
    config = default_config("classifier", seed=raw.get("seed", 0), **train)
    ranking = layer_sweep(layers, config, jobs=args.jobs or 1)
    doc = {"ranking": ranking}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "layer_sweep.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="namegate",
        description="Word naming verification over precomputed encoder embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON spec or preset reference")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("crossval", help="leave-one-speaker-out cross-validation")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel fold workers (default: NAMEGATE_JOBS or 1)")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("infer", help="score one recording against a target word")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embedding", required=True, help="EMB1 frame matrix")
    p.add_argument("--target", required=True, help="target word")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics from a predictions file")
    p.add_argument("--predictions", required=True,
                   help="JSON lines with true/predicted label strings")
    p.add_argument("--out", default=None, help="optional report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=10, help="number of seeds per suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("layer-sweep", help="rank embedding layers by accuracy")
    p.add_argument("--config", required=True, help="sweep config JSON")
    p.add_argument("--out", default=None, help="optional output directory")
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_layer_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FormatError, ManifestError, StateError, FileNotFoundError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except NamegateError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
