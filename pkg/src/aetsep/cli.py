"""Command-line entry point: mix, train, separate, evaluate, inspect.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .aet import AetConfig, inspect_bases, spectral_flatness
from .corpus import (
    ManifestEntry,
    Waveform,
    build_manifest,
    load_pair,
    mix_at_0db,
    read_manifest,
    read_wav,
    write_manifest,
    write_wav,
)
from .losses import bss_eval
from .separator import FRONTENDS, StftGeometry, build_model, separate_forward
from .trainer import CheckpointError, TrainConfig, TrainingDivergedError, load_checkpoint, train

logger = logging.getLogger("aetsep")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["manifest", "output_dir"],
    "properties": {
        "manifest": {"type": "string"},
        "output_dir": {"type": "string"},
        "frontend": {"enum": list(FRONTENDS)},
        "target": {"enum": ["a", "b"]},
        "seed": {"type": "integer"},
        "aet": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_filters": {"type": "integer", "minimum": 1},
                "filter_width": {"type": "integer", "minimum": 2},
                "pool": {"type": "integer", "minimum": 1},
                "smoothing_length": {"type": "integer", "minimum": 1},
                "placement": {"enum": ["window_start", "recorded_indices"]},
            },
        },
        "stft": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_fft": {"type": "integer", "minimum": 2, "multipleOf": 2},
                "hop": {"type": "integer", "minimum": 1},
                "window": {"enum": ["hann", "rectangular"]},
            },
        },
        "separator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "loss": {"enum": ["mse", "sdr"]},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "optimizer": {"enum": ["adam", "sgd"]},
                "learning_rate": {"type": "number", "minimum": 0},
                "segment_len": {"type": "integer", "minimum": 1},
            },
        },
    },
}


class UsageError(Exception):
    """Bad flags, configuration or inputs; maps to exit code 2."""


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def _num(value) -> str:
    """Shortest round-trip text for a float (numpy scalars included)."""
    return repr(float(value))


def cmd_mix(corpus_root, out_dir, pairs: int = 10, sentences: int = 10, seed: int = 0) -> Path:
    """Write 0 dB mixtures plus scaled sources and a manifest; returns the manifest path."""
    try:
        manifest = build_manifest(corpus_root, pairs, sentences, seed)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out_dir = Path(out_dir)
    entries = []
    for spec in manifest.entries:
        pair = mix_at_0db(read_wav(spec.path_a), read_wav(spec.path_b), spec.pair_id, spec.sentence_id)
        stem = out_dir / spec.pair_id / f"{spec.pair_id}_{spec.sentence_id}"
        write_wav(stem.with_name(stem.name + "_mix.wav"), pair.mixture)
        write_wav(stem.with_name(stem.name + "_a.wav"), pair.source_a)
        write_wav(stem.with_name(stem.name + "_b.wav"), pair.source_b)
        entries.append(ManifestEntry(spec.pair_id, spec.role, stem.with_name(stem.name + "_mix.wav")))
    path = out_dir / "manifest.tsv"
    write_manifest(path, entries)
    logger.info("wrote %d mixtures and %s", len(entries), path)
    return path


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        config = json.loads(path.read_text())
        jsonschema.validate(config, CONFIG_SCHEMA)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc
    except jsonschema.ValidationError as exc:
        raise UsageError(f"{path}: {exc.message}") from exc
    base = path.parent
    for key in ("manifest", "output_dir"):
        config[key] = str((base / config[key]) if not Path(config[key]).is_absolute() else config[key])
    return config


def cmd_train(config_path, seed: Optional[int] = None) -> Path:
    """Train per the JSON config; writes ``model.ckpt`` and ``train_log.csv``."""
    config = load_config(config_path)
    manifest_path = Path(config["manifest"])
    if not manifest_path.is_file():
        raise UsageError(f"manifest not found: {manifest_path}")
    entries = read_manifest(manifest_path)
    for e in entries:
        if not e.path.is_file():
            raise UsageError(f"mixture file not found: {e.path}")
    train_pairs = [load_pair(e) for e in entries if e.role == "train"]
    val_pairs = [load_pair(e) for e in entries if e.role == "test"]
    if not train_pairs:
        raise UsageError(f"{manifest_path}: no training mixtures")
    seed = config.get("seed", 0) if seed is None else seed
    frontend = config.get("frontend", "aet_orthogonal")
    try:
        tcfg = TrainConfig(seed=seed, target=config.get("target", "a"), **config.get("train", {}))
        geometry = StftGeometry(**config.get("stft", {})) if frontend == "stft" else AetConfig(**config.get("aet", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    hidden = tuple(config.get("separator", {}).get("hidden", (512, 512, 512)))
    model = build_model(frontend, geometry, seed, hidden, train_pairs[0].mixture.sample_rate)
    out_dir = Path(config["output_dir"])
    ckpt = out_dir / "model.ckpt"
    _, log = train(model, train_pairs, tcfg, val_pairs or None, ckpt)
    with open(out_dir / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_sdr_db"])
        for row in log:
            writer.writerow([row.epoch, _num(row.train_loss), _num(row.val_sdr_db)])
    return ckpt


def _load_model(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_separate(checkpoint, mixture_wav, out_wav) -> None:
    model = _load_model(checkpoint)
    wave = read_wav(mixture_wav)
    if wave.sample_rate != model.sample_rate:
        raise UsageError(f"{mixture_wav}: sample rate {wave.sample_rate} Hz, model trained at {model.sample_rate} Hz")
    est = separate_forward(model, wave.samples).data
    write_wav(out_wav, Waveform(est, wave.sample_rate))


def _summary(values: np.ndarray) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return float(med), float(q1), float(q3)


def cmd_evaluate(checkpoint, manifest, out_csv, filter_len: int = 512) -> dict:
    """Score every test mixture; writes per-sentence rows and a median/IQR summary."""
    model = _load_model(checkpoint)
    tests = [e for e in read_manifest(manifest) if e.role == "test"]
    if not tests:
        raise UsageError(f"{manifest}: empty test split")
    target = (model.meta.get("train_config") or {}).get("target", "a")

    def score(entry):
        pair = load_pair(entry)
        if pair.mixture.sample_rate != model.sample_rate:
            raise UsageError(f"{entry.path}: sample rate does not match the model")
        est = separate_forward(model, pair.mixture.samples).data
        other = "b" if target == "a" else "a"
        refs = [pair.source(target).samples, pair.source(other).samples]
        return pair, bss_eval(est, refs, 0, min(filter_len, len(est)))

    workers = max(1, int(os.environ.get("AETSEP_THREADS", "1")))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(score, tests))
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", "sentence", "sdr_db", "sir_db", "sar_db", "L"])
        for pair, s in results:
            writer.writerow([pair.pair_id, pair.sentence_id, _num(s.sdr_db), _num(s.sir_db), _num(s.sar_db), s.filter_len])
    summary = {}
    for metric in ("sdr_db", "sir_db", "sar_db"):
        med, q1, q3 = _summary(np.array([getattr(s, metric) for _, s in results]))
        summary[metric] = {"median": med, "q1": q1, "q3": q3, "iqr": q3 - q1}
    summary_path = out_csv.with_name(out_csv.stem + "_summary.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "median", "q1", "q3", "iqr"])
        for metric, s in summary.items():
            writer.writerow([metric, _num(s["median"]), _num(s["q1"]), _num(s["q3"]), _num(s["iqr"])])
    for metric, s in summary.items():
        print(f"{metric}: median {s['median']:.2f} dB, IQR [{s['q1']:.2f}, {s['q3']:.2f}]")
    return summary


def cmd_inspect(checkpoint, out_dir, top_n: int = 32, fft_size: int = 1024) -> list:
    """Dump front-end filters sorted by dominant frequency with their normalised spectra."""
    model = _load_model(checkpoint)
    if model.aet_params is None:
        raise UsageError(f"{checkpoint}: stft checkpoint has no learned front-end to inspect")
    bases = inspect_bases(model.aet_params.analysis, fft_size)
    flatness = [spectral_flatness(b.spectrum) for b in bases]
    shown = bases[:top_n]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "filters.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        width = len(shown[0].filter) if shown else 0
        writer.writerow(["rank", "filter_index", "dominant_bin"] + [f"t{i}" for i in range(width)])
        for rank, b in enumerate(shown):
            writer.writerow([rank, b.index, b.dominant_bin] + [_num(v) for v in b.filter])
    with open(out_dir / "spectra.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "filter_index"] + [f"bin{i}" for i in range(fft_size // 2 + 1)])
        for rank, b in enumerate(shown):
            writer.writerow([rank, b.index] + [_num(v) for v in b.spectrum])
    with open(out_dir / "dominant_bins.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "filter_index", "dominant_bin", "flatness"])
        for rank, (b, f) in enumerate(zip(bases, flatness)):
            writer.writerow([rank, b.index, b.dominant_bin, _num(f)])
    (out_dir / "summary.json").write_text(
        json.dumps({"num_filters": len(bases), "fft_size": fft_size, "mean_flatness": float(np.mean(flatness))}, indent=2)
    )
    return shown


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aetsep", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    parser.add_argument("--config", help="experiment JSON config (train)")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mix", help="build 0 dB mixtures and the train/test manifest")
    p.add_argument("corpus", help="directory tree of per-speaker WAV folders")
    p.add_argument("out_dir")
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--sentences", type=int, default=10, help="sentences per speaker")

    p = sub.add_parser("train", help="train a separation model")
    p.add_argument("config_path", nargs="?", help="experiment JSON config")

    p = sub.add_parser("separate", help="separate one mixture WAV")
    p.add_argument("checkpoint")
    p.add_argument("mixture")
    p.add_argument("output")

    p = sub.add_parser("evaluate", help="BSS_EVAL scores on the test split")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("out_csv")
    p.add_argument("--filter-len", type=int, default=512)

    p = sub.add_parser("inspect", help="dump learned front-end filters")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--top-n", type=int, default=32)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    seed = 0 if args.seed is None else args.seed
    try:
        if args.command == "mix":
            cmd_mix(args.corpus, args.out_dir, args.pairs, args.sentences, seed)
        elif args.command == "train":
            path = args.config_path or args.config
            if path is None:
                raise UsageError("train needs a config file (positional or --config)")
            cmd_train(path, args.seed)
        elif args.command == "separate":
            cmd_separate(args.checkpoint, args.mixture, args.output)
        elif args.command == "evaluate":
            cmd_evaluate(args.checkpoint, args.manifest, args.out_csv, args.filter_len)
        elif args.command == "inspect":
            cmd_inspect(args.checkpoint, args.out_dir, args.top_n)
    except UsageError as exc:
        print(f"aetsep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, CheckpointError, OSError, ValueError) as exc:
        print(f"aetsep: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
