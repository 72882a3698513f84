"""``attrprompt`` command line: annotate, train, eval, analyze, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .errors import ConfigurationError, InputError, TrainingAborted, TransportError

log = logging.getLogger("attrprompt")


def _config(args):
    from .config import ExperimentConfig, load_config

    return load_config(args.config) if args.config else ExperimentConfig()


def cmd_annotate(args):
    from .pipeline import run_annotation

    config = _config(args)
    result = run_annotation(config, args.out, dataset=args.dataset, stub=args.stub, swap=args.swap_attributes,
                            force=args.force)
    print(f"annotated {result.written} image(s), skipped {result.skipped} already present")
    if result.failures:
        print(f"{len(result.failures)} image(s) failed; see {result.failure_path}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args):
    from .pipeline import run_training

    config = _config(args)
    annotations = args.annotations or config.annotations
    out, metrics = args.out, args.metrics
    if out is None:
        # one directory per configuration under output_dir
        run_dir = Path(config.output_dir) / config.hash()[:12]
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True), encoding="utf-8")
        out = run_dir / "model.pt"
        metrics = metrics or run_dir / "metrics.jsonl"
    state = run_training(config, annotations=annotations, out=out, metrics=metrics)
    last = state.metrics[-1]
    print(f"trained {state.step} steps over {state.epoch} epoch(s); final total loss {last['total']:.4f}")
    print(f"checkpoint: {out}")
    return 0


def cmd_eval(args):
    from .evaluator import DomainShiftReport, EvalReport
    from .pipeline import run_evaluation
    from .reporting import emit_results_table, format_table

    config = _config(args)
    if args.dataset:
        config = config.with_overrides({"dataset": args.dataset})
    report = run_evaluation(config, args.ckpt, args.protocol, targets=args.targets or ())
    if isinstance(report, EvalReport):
        print(format_table([report]), end="")
        if args.out:
            emit_results_table([report], args.out)
        return 0
    payload = report.__dict__ if isinstance(report, DomainShiftReport) else {
        "dataset": report.dataset, "accuracy": report.accuracy, "per_class": report.per_class}
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_analyze(args):
    from .config import build_backbone
    from .evaluator import analyze_attribute_fidelity, analyze_confidence, write_confidence_csv
    from .pipeline import attach_annotations, load_split
    from .trainer import load_checkpoint

    config = _config(args)
    annotations = args.annotations or config.annotations
    if not annotations:
        raise ConfigurationError("analysis needs an annotation file (--annotations or config 'annotations')")
    backbone = build_backbone(config)
    records, _, _ = load_split(config, backbone, args.split)
    records = attach_annotations(records, annotations, require_all=False)
    if args.mode == "confidence":
        rows, summary = analyze_confidence(backbone, records, per_class=args.per_class, seed=args.seed)
        write_confidence_csv(rows, args.out)
        print(json.dumps(summary, indent=2))
        return 0
    if not args.ckpt:
        raise ConfigurationError("fidelity analysis needs --ckpt")
    model, _ = load_checkpoint(args.ckpt, backbone)
    report = analyze_attribute_fidelity(model, records)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("image_id,cosine\n")
        for image_id, c in report.per_image.items():
            fh.write(f"{image_id},{c!r}\n")
    print(f"mean cosine {report.mean_cosine:.4f} over {len(report.per_image)} image(s)")
    return 0


def cmd_ablate(args):
    from .config import ExperimentConfig, load_config
    from .pipeline import train_and_evaluate
    from .trainer import run_ablation_grid

    config = load_config(args.config) if args.config else ExperimentConfig()
    grid = yaml.safe_load(Path(args.grid).read_text(encoding="utf-8")) or {}
    if not isinstance(grid, dict):
        raise ConfigurationError("the grid file must map keys to lists of values")
    annotations = args.annotations or config.annotations
    rows = run_ablation_grid(config, grid, lambda cfg: train_and_evaluate(cfg, annotations=annotations))
    text = json.dumps(rows, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    failed = sum(r["error"] is not None for r in rows)
    print(f"{len(rows)} cell(s), {failed} failed", file=sys.stderr)
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attrprompt", description=__doc__.replace("``", ""))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("annotate", help="label training images with attributes via a VQA client")
    a.add_argument("--config")
    a.add_argument("--dataset", help="VQA template key (defaults to the config's dataset)")
    a.add_argument("--out", required=True)
    a.add_argument("--stub", action="store_true", help="use the deterministic offline client")
    a.add_argument("--swap-attributes", action="store_true", help="exchange attributes across classes")
    a.add_argument("--force", action="store_true", help="re-annotate images already in the file")
    a.set_defaults(func=cmd_annotate)

    t = sub.add_parser("train", help="few-shot prompt training on base classes")
    t.add_argument("--config")
    t.add_argument("--annotations")
    t.add_argument("--out", help="checkpoint path (default: <output_dir>/<config hash>/model.pt)")
    t.add_argument("--metrics", help="JSONL per-step loss log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset")
    e.add_argument("--protocol", choices=("base-novel", "domain-shift", "few-shot"), default="base-novel")
    e.add_argument("--targets", nargs="*", help="manifests of domain-shifted test sets")
    e.add_argument("--out", help="report path (table .txt and .json for base-novel)")
    e.set_defaults(func=cmd_eval)

    z = sub.add_parser("analyze", help="attribute-confidence or extractor-fidelity analysis")
    z.add_argument("--config")
    z.add_argument("--mode", choices=("confidence", "fidelity"), required=True)
    z.add_argument("--annotations")
    z.add_argument("--ckpt")
    z.add_argument("--split", default="test")
    z.add_argument("--per-class", type=int, default=None, help="images sampled per class (50 in the reference study)")
    z.add_argument("--seed", type=int, default=0)
    z.add_argument("--out", required=True, help="CSV path")
    z.set_defaults(func=cmd_analyze)

    g = sub.add_parser("ablate", help="run a train+eval grid over loss/model switches")
    g.add_argument("--config")
    g.add_argument("--grid", required=True, help="YAML mapping, e.g. {f: [1, 2], g: [1, 2]}")
    g.add_argument("--annotations")
    g.add_argument("--out")
    g.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, InputError, TransportError, TrainingAborted, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
