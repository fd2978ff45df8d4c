"""Command-line surface: generate -> train -> classify / evaluate.

Exit codes: 0 success, 1 usage or missing file, 2 sample parse error
(naming the offending file), 3 model error, 4 io error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .classify import (
    EmptyTrainingSet,
    ModelMismatch,
    classify,
    config_fingerprint,
    fit_family_models,
    load_models,
    save_models,
)
from .config import ConfigError, RunConfig
from .corpus import CorpusError, generate_corpus, load_manifest
from .evaluate import run_evaluation
from .hierarchy import dump_descriptors_csv
from .pipeline import SampleParseError, build_descriptors, descriptor_for_image, load_image

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARSE = 2
EXIT_MODEL = 3
EXIT_IO = 4


class _Parser(argparse.ArgumentParser):
    # spec'd exit contract: usage problems exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path: str | None, seed: int | None) -> RunConfig:
    config = RunConfig.load(path) if path else RunConfig()
    if seed is not None:
        config = config.with_seed(seed)
    return config


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        print(f"error: no such file: {p}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    return p


def cmd_generate(args) -> int:
    try:
        config = _load_config(args.config, args.seed)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        manifest = generate_corpus(
            list(config.families),
            config.master_seed,
            args.out,
            entropy_threshold=config.entropy_threshold,
        )
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{len(manifest.entries)} samples -> {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        config = _load_config(args.config, None)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    manifest_path = _require_file(args.manifest)
    try:
        manifest = load_manifest(manifest_path)
        if not manifest.entries:
            print("model error: manifest lists no samples", file=sys.stderr)
            return EXIT_MODEL
        base = manifest_path.parent
        paths = [base / e.path for e in manifest.entries]
        descriptors = build_descriptors(paths, config, jobs=args.jobs)
    except SampleParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (CorpusError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL if isinstance(exc, CorpusError) else EXIT_IO

    try:
        matrix = np.stack([d.values for d in descriptors])
        models = fit_family_models(
            matrix,
            [e.family for e in manifest.entries],
            q=config.subspace_rank,
            epsilon=config.epsilon,
        )
        models.config_text = config.to_text()
        models.config_fingerprint = config_fingerprint(models.config_text)
        save_models(models, args.model)
    except EmptyTrainingSet as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO

    if args.descriptors_out:
        dump_descriptors_csv([e.path for e in manifest.entries], descriptors, args.descriptors_out)
    print(f"trained {len(models.models)} family models on {len(descriptors)} samples -> {args.model}")
    return EXIT_OK


def cmd_classify(args) -> int:
    sample_path = _require_file(args.sample)
    model_path = _require_file(args.model)
    try:
        models = load_models(model_path)
        config = RunConfig.from_text(models.config_text) if models.config_text else RunConfig()
    except (ModelMismatch, ConfigError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    try:
        descriptor = descriptor_for_image(load_image(sample_path), config)
    except SampleParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        family, scores = classify(descriptor, models)
    except ModelMismatch as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    print(f"predicted {family}")
    for name in models.families:
        print(f"{name} {scores[name]:.6f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest_path = _require_file(args.manifest)
    model_path = _require_file(args.model)
    try:
        models = load_models(model_path)
        config = RunConfig.from_text(models.config_text) if models.config_text else RunConfig()
    except (ModelMismatch, ConfigError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    try:
        report = run_evaluation(manifest_path, models, config, args.report, jobs=args.jobs)
    except SampleParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (CorpusError, ModelMismatch) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(
        f"evaluated {int(report.confusion.sum())} samples: "
        f"accuracy {100 * report.accuracy:.1f}%, macro-F1 {100 * report.macro_f1:.1f}%"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sigmap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="emit a seeded synthetic corpus")
    p.add_argument("--config", help="run config file (defaults built in)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config master seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit family models from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="run config file (defaults built in)")
    p.add_argument("--model", required=True, help="model file to write")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--descriptors-out", help="also dump descriptors.csv here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="classify one sample")
    p.add_argument("sample")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="classify a manifest and emit reports")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--report", required=True, help="report directory")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
