"""Command line: tokenize -> train -> probe -> report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation. Global options fall back to ``BARBERT_<NAME>`` environment
variables (for example ``BARBERT_SEED``, ``BARBERT_THREADS``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import check_aligned, file_sha256, read_corpus, read_labels, write_corpus, write_labels
from .encoder import ModelConfig, init_params
from .labels import bar_labels
from .midi import MidiError, NoteEvent, read_midi
from .probing import DEFAULT_LAMBDA, DEFAULT_SPLITS, MixedConfig, merge_reports, probe_all_layers, write_report
from .remi import BEATS_PER_BAR, CodecError, encode_song, split_bars
from .synth import synth_corpus, write_synth_midi
from .trainer import VARIANT_NAMES, VARIANTS, CheckpointError, NonFiniteLoss, TrainConfig, load_checkpoint, save_checkpoint, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("barbert")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
CHECKPOINT_NAME = "model.ckpt"
SWEEP_LAMBDAS = (0.01, 0.1, 1.0, 10.0, 100.0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _env(name: str, default=None):
    return os.environ.get(f"BARBERT_{name.upper()}", default)


def _resolve(workdir: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else workdir / p


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, corpus_hash: str | None, seed, started: str) -> None:
    manifest = {
        "command": command,
        "config_hash": _hash_obj(config),
        "corpus_hash": corpus_hash,
        "seed": seed,
        "tool_version": __version__,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# -- tokenize ----------------------------------------------------------------------


def _tokenize_file(path: Path, song_id: str):
    notes, tempo = read_midi(path)
    bars = encode_song(notes, tempo, song_id)
    labels = []
    for bar, bar_notes in zip(bars, split_bars(sorted(notes, key=lambda n: n.onset))):
        shift = bar.bar_index * BEATS_PER_BAR
        rel = [NoteEvent(n.onset - shift, n.duration, n.pitch, n.velocity, n.program, n.is_drum) for n in bar_notes]
        labels.append(bar_labels(bar, rel))
    return bars, labels


def cmd_tokenize(args, workdir: Path) -> int:
    started = _now()
    in_dir = _resolve(workdir, args.in_dir)
    out_path = _resolve(workdir, args.out)
    labels_path = _resolve(workdir, args.labels) if args.labels else out_path.with_name("labels.jsonl")
    if not in_dir.is_dir():
        raise UsageError(f"input directory {in_dir} does not exist")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in in_dir.rglob("*") if p.suffix.lower() in (".mid", ".midi") and p.is_file())
    if not files:
        log.warning("no .mid/.midi files under %s; writing an empty corpus", in_dir)

    def work(path: Path):
        rel = path.relative_to(in_dir).as_posix()
        song_id = rel.rsplit(".", 1)[0]
        try:
            return rel, _tokenize_file(path, song_id), None
        except (MidiError, CodecError, ValueError, OSError) as exc:
            return rel, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as ex:
        results = list(ex.map(work, files))
    bars, labels, skipped = [], [], []
    for rel, res, err in results:
        if err is not None:
            log.warning("skipping %s (%s)", rel, err)
            skipped.append({"path": rel, "error": err})
            continue
        bars.extend(res[0])
        labels.extend(res[1])
    write_corpus(out_path, bars)
    write_labels(labels_path, labels)
    with open(out_path.with_name("skipped.jsonl"), "w", newline="\n") as fh:
        for rec in skipped:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    write_manifest(out_path.parent, "tokenize", {"in": str(in_dir)}, file_sha256(out_path), None, started)
    log.info("tokenized %d files into %d bars (%d skipped)", len(files) - len(skipped), len(bars), len(skipped))
    return EXIT_OK


# -- train --------------------------------------------------------------------------


def _load_toml(path) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _build_configs(args, workdir: Path) -> tuple[ModelConfig, TrainConfig]:
    raw = _load_toml(_resolve(workdir, args.config) if args.config else None)
    model_kw = dict(raw.get("model", {}))
    train_kw = dict(raw.get("train", {}))
    known_model = {f.name for f in fields(ModelConfig)}
    known_train = {f.name for f in fields(TrainConfig)}
    unknown = (set(model_kw) - known_model) | (set(train_kw) - known_train)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    overrides = {
        "variant": args.variant,
        "steps": args.steps,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "seed": args.seed,
        "alpha": args.alpha,
        "tau": args.tau,
    }
    train_kw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args, workdir: Path) -> int:
    started = _now()
    model_cfg, train_cfg = _build_configs(args, workdir)
    corpus_path = _resolve(workdir, args.corpus)
    bars = read_corpus(corpus_path)
    if not bars:
        raise ValueError(f"{corpus_path} holds no bars")
    out = _resolve(workdir, args.out)
    out.mkdir(parents=True, exist_ok=True)
    if train_cfg.steps == 0:
        params = init_params(model_cfg, np.random.default_rng([train_cfg.seed, 0xC0FFEE]))
    else:
        params, _, _ = train(bars, model_cfg, train_cfg, out_dir=out, threads=args.threads, log_every=args.log_every)
    save_checkpoint(params, model_cfg, out / CHECKPOINT_NAME, train_cfg)
    write_manifest(
        out, "train", {"model": model_cfg.to_dict(), "train": asdict(train_cfg)}, file_sha256(corpus_path),
        train_cfg.seed, started,
    )
    return EXIT_OK


# -- probe ----------------------------------------------------------------------------


def _checkpoint_file(p: Path) -> Path:
    return p / CHECKPOINT_NAME if p.is_dir() else p


def _model_name(train_cfg: TrainConfig | None, fallback: str) -> str:
    if train_cfg is None:
        return fallback
    if train_cfg.steps == 0:
        return VARIANT_NAMES["random"]
    return VARIANT_NAMES[train_cfg.variant]


def cmd_probe(args, workdir: Path) -> int:
    started = _now()
    corpus_path = _resolve(workdir, args.corpus)
    bars = read_corpus(corpus_path)
    labels = read_labels(_resolve(workdir, args.labels))
    check_aligned(bars, labels)
    out = _resolve(workdir, args.out)
    lambdas = SWEEP_LAMBDAS if args.sweep_lambda else (args.lam,)
    ckpts = [_resolve(workdir, c) for c in args.ckpt]
    loaded = []
    for c in ckpts:
        params, model_cfg, train_cfg = load_checkpoint(_checkpoint_file(c))
        name = _model_name(train_cfg, c.name)
        while name in [n for n, *_ in loaded]:
            name = f"{name}@{c.name}"
        loaded.append((name, params, model_cfg))
    for lam in lambdas:
        reports = [
            probe_all_layers(params, cfg, bars, labels, name, lam=lam, n_splits=args.splits, k=args.k, seed=args.seed)
            for name, params, cfg in loaded
        ]
        target = out if len(lambdas) == 1 else out / f"lambda_{lam:g}"
        write_report(target, reports)
        write_manifest(
            target, "probe", {"ckpts": [str(c) for c in ckpts], "lambda": lam, "splits": args.splits, "k": args.k},
            file_sha256(corpus_path), args.seed, started,
        )
    return EXIT_OK


# -- report ---------------------------------------------------------------------------


def cmd_report(args, workdir: Path) -> int:
    started = _now()
    dirs = [_resolve(workdir, d) for d in args.reports]
    out = _resolve(workdir, args.out)
    text = merge_reports(dirs, out)
    sys.stdout.write(text)
    write_manifest(out, "report", {"reports": [str(d) for d in dirs]}, None, None, started)
    return EXIT_OK


def cmd_synth(args, workdir: Path) -> int:
    out = _resolve(workdir, args.out)
    if args.midi:
        write_synth_midi(out, args.songs, args.bars, args.seed)
    else:
        out.mkdir(parents=True, exist_ok=True)
        bars, labels = synth_corpus(args.songs, args.bars, args.seed)
        write_corpus(out / "corpus.jsonl", bars)
        write_labels(out / "labels.jsonl", labels)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--workdir", default=_env("workdir", "."), help="base for relative paths")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=int(_env("threads", 1)))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="barbert", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(
        dest="command", required=True, parser_class=_Parser, metavar="{tokenize,train,probe,report}"
    )

    p = sub.add_parser("tokenize", parents=[common], help="MIDI directory -> corpus.jsonl + labels.jsonl")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", default=None, help="labels path (default: labels.jsonl beside --out)")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train", parents=[common], help="train one model variant")
    p.add_argument("--corpus", required=True)
    p.add_argument("--variant", choices=VARIANTS, default=_env("variant"))
    p.add_argument("--config", default=_env("config"), help="TOML with [model] and [train] tables")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", parents=[common], help="layer-wise linear probing of checkpoints")
    p.add_argument("--ckpt", action="append", required=True, help="checkpoint dir or file (repeatable)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--sweep-lambda", action="store_true")
    p.add_argument("--splits", type=int, default=DEFAULT_SPLITS)
    p.add_argument("--k", type=int, default=None, help="K-means clusters (default min(100, #songs))")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", parents=[common], help="merge report dirs into one comparison table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", parents=[common])  # hidden: fixtures for tests
    p.add_argument("--out", required=True)
    p.add_argument("--songs", type=int, default=200)
    p.add_argument("--bars", type=int, default=8)
    p.add_argument("--midi", action="store_true", help="write .mid files instead of corpus/labels")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is None and _env("seed") is not None:
        args.seed = int(_env("seed"))
    if args.seed is None and args.command != "train":
        # train falls back to the TOML / TrainConfig seed instead
        args.seed = 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    workdir = Path(args.workdir)
    try:
        return args.func(args, workdir)
    except UsageError as exc:
        print(f"barbert: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MidiError, CodecError, CheckpointError, MixedConfig, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"barbert: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLoss, AssertionError) as exc:
        print(f"barbert: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
