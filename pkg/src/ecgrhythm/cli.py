"""Batch command-line entry points.

Exit codes: 0 success, 1 data error (diagnostics on stderr), 2 usage error.
Every command is a pure function of its inputs, the effective config, and the
seed; reports and bundles embed the config hash.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import CLASSES, PipelineConfig
from .errors import EcgRhythmError
from .evaluation import ConfusionMatrix, challenge_score
from .features import BEAT_FEATURE_NAMES, GLOBAL_FEATURE_NAMES
from .interpretation import interpretation_to_dict
from .pipeline import (
    TrainedBundle,
    build_cache,
    classify_cached,
    cross_validate,
    prepare_record,
    train_bundle,
)
from .render import render_interpretation
from .signal_io import (
    Manifest,
    ManifestEntry,
    O_VARIANTS,
    load_record,
    read_manifest,
    synth_record,
    write_manifest,
    write_record,
)


def _load_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        config = PipelineConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
    else:
        config = PipelineConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=None, help="seed override")
    sub.add_argument("--config", type=str, default=None, help="JSON config file")
    sub.add_argument("--jobs", type=int, default=1, help="record-level parallelism")


def cmd_synth(args) -> int:
    config = _load_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([config.seed & 0x7FFFFFFF, 0x5E_ED])
    entries = []
    for ci, cls in enumerate(CLASSES):
        for k in range(args.per_class):
            duration = args.duration if args.duration else float(rng.uniform(22.0, 38.0))
            variant = O_VARIANTS[k % len(O_VARIANTS)] if cls == "O" else None
            rec = synth_record(cls, config.seed * 100000 + ci * 10000 + k, duration, variant)
            rec_id = f"{'NAOX'[ci]}{k:05d}"
            path = out / f"{rec_id}.txt"
            write_record(rec, path)
            entries.append(ManifestEntry(rec_id, path, cls))
    write_manifest(Manifest(entries), out / "manifest.csv")
    print(f"wrote {len(entries)} records to {out}")
    return 0


def cmd_interpret(args) -> int:
    config = _load_config(args)
    rec = load_record(args.record)
    ev = prepare_record(rec, config)
    itp = ev.upright.interpretation
    if args.out:
        Path(args.out).write_text(
            json.dumps(interpretation_to_dict(itp, ev.record.fs), sort_keys=True, indent=2)
            + "\n", encoding="utf-8")
    if args.annotations:
        from .conduction import export_annotations

        Path(args.annotations).write_text(export_annotations(itp.beats), encoding="utf-8")
    if not args.out and not args.annotations:
        print(json.dumps(interpretation_to_dict(itp, ev.record.fs), sort_keys=True, indent=2))
    return 0


def cmd_features(args) -> int:
    config = _load_config(args)
    manifest = read_manifest(args.manifest)
    cache = build_cache(manifest, config, args.jobs)
    with open(args.global_csv, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", *GLOBAL_FEATURE_NAMES])
        for ev in cache.items:
            w.writerow([ev.record_id, *[repr(float(v)) for v in ev.upright.globals.v]])
    if args.beat_csv:
        with open(args.beat_csv, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["record_id", "beat_idx", *BEAT_FEATURE_NAMES])
            for ev in cache.items:
                for bi, row in enumerate(ev.upright.beat_rows):
                    w.writerow([ev.record_id, bi, *[repr(float(v)) for v in row]])
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    manifest = read_manifest(args.manifest)
    cache = build_cache(manifest, config, args.jobs)
    bundle = train_bundle(cache, range(len(cache)), config, config.seed)
    bundle.save(args.out_dir)
    print(f"bundle written to {args.out_dir} (config {bundle.config_hash})")
    return 0


def cmd_classify(args) -> int:
    config = _load_config(args)
    manifest = read_manifest(args.manifest)
    bundle = TrainedBundle.load(args.bundle)
    cache = build_cache(manifest, config, args.jobs)
    decisions = classify_cached(cache, range(len(cache)), bundle, config)
    lines = [f"{d.record_id},{d.label}" for d in decisions]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_cv(args) -> int:
    config = _load_config(args)
    manifest = read_manifest(args.manifest)
    report = cross_validate(manifest, config, config.seed, args.jobs)
    csv_text = report.to_csv() + f"# config_hash,{report.config_hash}\n"
    if args.out_prefix:
        Path(args.out_prefix + ".csv").write_text(csv_text, encoding="utf-8")
        Path(args.out_prefix + ".json").write_text(report.to_json() + "\n", encoding="utf-8")
    sys.stdout.write(csv_text)
    return 0


def _read_labels(path) -> dict[str, str]:
    labels = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if len(row) == 2:
                labels[row[0]] = row[1]
            elif len(row) == 3:
                labels[row[0]] = row[2]
            else:
                raise EcgRhythmError(f"{path}: unexpected row {row}")
    return labels


def cmd_score(args) -> int:
    answers = _read_labels(args.answers)
    reference = _read_labels(args.reference)
    missing = sorted(set(reference) - set(answers))
    if missing:
        raise EcgRhythmError(f"answers missing records: {missing[:5]}...")
    ids = sorted(reference)
    cm = ConfusionMatrix.from_labels(
        [reference[i] for i in ids], [answers[i] for i in ids])
    f1n, f1a, f1o, f1x, final = challenge_score(cm)
    print(f"F1_N {f1n:.4f}")
    print(f"F1_A {f1a:.4f}")
    print(f"F1_O {f1o:.4f}")
    print(f"F1_~ {f1x:.4f}")
    print(f"final {final:.4f}")
    return 0


def cmd_render(args) -> int:
    config = _load_config(args)
    rec = load_record(args.record)
    ev = prepare_record(rec, config)
    svg = render_interpretation(ev.upright.interpretation, ev.record)
    Path(args.out).write_text(svg, encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgrhythm",
                                     description="Short single-lead ECG rhythm classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labelled corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--duration", type=float, default=None,
                   help="fixed record length in seconds (default: varied 22-38 s)")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("interpret", help="interpret one record")
    p.add_argument("record")
    p.add_argument("--out", help="interpretation JSON path")
    p.add_argument("--annotations", help="annotation export path")
    _add_common(p)
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("features", help="feature CSVs for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--global-csv", required=True)
    p.add_argument("--beat-csv")
    _add_common(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a model bundle")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="classify a manifest with a bundle")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("cv", help="stratified cross-validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-prefix")
    _add_common(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("score", help="challenge score of an answers file")
    p.add_argument("--answers", required=True)
    p.add_argument("--reference", required=True, help="manifest or answers-style CSV")
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("render", help="SVG overlay of an interpretation")
    p.add_argument("record")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_render)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EcgRhythmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
