"""Command line entry point: ``mimood {pretrain,finetune,evaluate,run,gen-synth}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import data as D
from . import nn, runner
from .config import load_config
from .errors import ConfigError, MimError

log = logging.getLogger("mimood")


def _config(args):
    return load_config(args.config, dict(os.environ))


def cmd_pretrain(args) -> int:
    with runner.stage("config"):
        cfg = _config(args)
    with runner.stage("data"):
        train, test = runner.load_id_data(cfg)
    with runner.stage("pretrain"):
        model, stats = runner.pretrain(cfg, train, test)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        path = cfg.output_dir / "model_pretrained.mim"
        nn.save_model(model, path)
    print(f"saved {path} (train accuracy {stats['train_accuracy']:.4f}, test accuracy {stats['test_accuracy']:.4f})")
    return 0


def cmd_finetune(args) -> int:
    with runner.stage("config"):
        cfg = _config(args)
    with runner.stage("data"):
        train, _ = runner.load_id_data(cfg)
    with runner.stage("finetune"):
        model = nn.load_model(args.model, runner.num_classes_of(cfg, train))
        result = runner.mim_finetune_epoch(model, train, cfg.finetune)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        path = cfg.output_dir / "model_finetuned.mim"
        nn.save_model(result.model, path)
        runner.write_losses_csv(result.trace, cfg.output_dir / "losses.csv")
    print(f"saved {path} after {len(result.trace)} batches")
    return 0


def cmd_evaluate(args) -> int:
    with runner.stage("config"):
        cfg = _config(args)
    with runner.stage("data"):
        train, test = runner.load_id_data(cfg)
        ood = runner.load_ood_data(cfg)
    with runner.stage("evaluate"):
        model = nn.load_model(args.model, runner.num_classes_of(cfg, train))
        detectors = runner.fit_detectors(model, train, cfg.make_detectors())
        report = runner.evaluate(model, test, ood, detectors, "eval", cfg.positive_class)
    with runner.stage("report"):
        manifest = runner.RunManifest(
            config_hash=cfg.config_hash,
            seeds={},
            model_files={"evaluated": str(args.model)},
            model_sha256={"evaluated": runner._sha256(Path(args.model))},
            report_path="",
            losses_path=None,
            id_accuracy={},
            timings={},
        )
        runner.emit_report(report, manifest, cfg.output_dir)
    _print_rows(report)
    return 0


def cmd_run(args) -> int:
    manifest = runner.run_experiment(args.config, dict(os.environ))
    _print_rows(runner.read_report_csv(manifest.report_path))
    acc = manifest.id_accuracy
    print(f"ID accuracy before {acc.get('before', float('nan')):.4f} after {acc.get('after', float('nan')):.4f}")
    print(f"report: {manifest.report_path}")
    return 0


def cmd_gen_synth(args) -> int:
    with runner.stage("config"):
        cfg = _config(args)
        if cfg.synthetic is None:
            raise ConfigError("gen-synth needs a synthetic id_dataset in the config")
    with runner.stage("data"):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        train, test = runner.load_id_data(cfg)
        D.save_raw_dataset(train, out / "id_train.mimd")
        D.save_raw_dataset(test, out / "id_test.mimd")
        for spec, ood in zip(cfg.ood_datasets, runner.load_ood_data(cfg)):
            kind = spec.get("ood_kind", cfg.synthetic.ood_kind) if spec["kind"] == "synthetic" else Path(spec["path"]).stem
            D.save_raw_dataset(ood, out / f"ood_{kind}.mimd")
    print(f"wrote synthetic benchmark to {out}")
    return 0


def _print_rows(report: runner.EvalReport) -> None:
    for r in report.rows:
        print(f"{r.phase:>6}  {r.detector:<12} {r.ood_dataset[:40]:<40} AUROC {r.auroc:.4f}  AUPR {r.aupr:.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mimood", description="Multiple-input-mixup OOD fine-tuning toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a base classifier on the ID data")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="one MIM fine-tuning epoch on a saved model")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="fit detectors and report AUROC/AUPR for a saved model")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="full pipeline with before/after report")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen-synth", help="write the synthetic benchmark as MIMD files")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except runner.StageFailure as exc:
        print(f"error: stage {exc.stage} failed: {exc.cause}", file=sys.stderr)
        return exc.exit_code
    except MimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
