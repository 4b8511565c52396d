"""Experiment pipeline: pretrain, single-epoch MIM fine-tune, detector fitting, evaluation, reports."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import data as D
from . import nn
from .config import ExperimentConfig, FinetuneConfig, TrainConfig, load_config
from .detect import Detector
from .errors import ConfigError, ContractError, MimError
from .metrics import ScoredSplit, accuracy, aupr, auroc
from .synth import MixupConfig, synthesize_ood
from .tensor import backward

log = logging.getLogger(__name__)

REPORT_HEADER = ("id_dataset", "ood_dataset", "detector", "phase", "auroc", "aupr")


class StageFailure(Exception):
    """A pipeline stage failed; carries the stage name and the exit code of the cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageFailure:
        raise
    except (MimError, OSError) as exc:
        if isinstance(exc, OSError) and not isinstance(exc, MimError):
            exc = D.DataError(str(exc))
        raise StageFailure(name, exc) from exc


@dataclass(frozen=True)
class ReportRow:
    id_dataset: str
    ood_dataset: str
    detector: str
    phase: str
    auroc: float
    aupr: float


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    id_accuracy: dict[str, float] = field(default_factory=dict)

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)
        self.id_accuracy.update(other.id_accuracy)

    def lookup(self, detector: str, phase: str, ood_dataset: Optional[str] = None) -> list[ReportRow]:
        return [
            r
            for r in self.rows
            if r.detector == detector and r.phase == phase and (ood_dataset is None or r.ood_dataset == ood_dataset)
        ]


@dataclass
class RunManifest:
    config_hash: str
    seeds: dict
    model_files: dict
    model_sha256: dict
    report_path: str
    losses_path: Optional[str]
    id_accuracy: dict
    timings: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class FinetuneResult:
    model: nn.Classifier
    trace: list[nn.LossBreakdown]
    visits: np.ndarray  # how often each training index was used as an ID sample


# ---------------------------------------------------------------------------
# data and model plumbing


def load_id_data(cfg: ExperimentConfig) -> tuple[D.Dataset, D.Dataset]:
    spec = cfg.id_dataset
    if spec["kind"] == "synthetic":
        train, test, _ = D.synth_gaussian_benchmark(cfg.synthetic)
        return train, test
    if spec["kind"] == "cifar10":
        return D.load_cifar10(cfg.resolve(spec["path"]), expect_full=spec.get("expect_full", True))
    train = D.load_raw_dataset(cfg.resolve(spec["train"]))
    test = D.load_raw_dataset(cfg.resolve(spec["test"]))
    for ds in (train, test):
        if ds.labels is None:
            raise D.DataError(f"ID dataset {ds.name} has no labels")
        D.validate_dataset(ds, spec.get("num_classes"))
    return train, test


def load_ood_data(cfg: ExperimentConfig) -> list[D.Dataset]:
    out = []
    for spec in cfg.ood_datasets:
        if spec["kind"] == "synthetic":
            base = cfg.synthetic
            overrides = {k: v for k, v in spec.items() if k != "kind"}
            _, _, ood = D.synth_gaussian_benchmark(D.SynthConfig(**{**asdict(base), **overrides}))
        else:
            path = cfg.resolve(spec["path"])
            ood = D.load_raw_dataset(path, spec.get("name"))
        out.append(D.validate_dataset(ood))
    return out


def num_classes_of(cfg: ExperimentConfig, train: D.Dataset) -> int:
    if isinstance(cfg.architecture, dict):
        return int(cfg.architecture["num_classes"])
    if cfg.id_dataset["kind"] == "synthetic":
        return cfg.synthetic.num_classes
    if cfg.id_dataset["kind"] == "cifar10":
        return 10
    return int(cfg.id_dataset.get("num_classes", int(train.labels.max()) + 1))


def build_arch(cfg: ExperimentConfig, train: D.Dataset) -> dict:
    if isinstance(cfg.architecture, dict):
        return cfg.architecture
    c = num_classes_of(cfg, train)
    if cfg.architecture == "cnn":
        return nn.cnn_arch(train.sample_shape, c)
    return nn.mlp_arch(train.sample_shape, c)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# training


def train_epochs(m: nn.Classifier, ds: D.Dataset, tc: TrainConfig) -> nn.Classifier:
    """Plain cross-entropy training with SGD + momentum; mutates and returns ``m``."""
    state = nn.OptimizerState.for_model(m, tc.lr, tc.momentum)
    batch = min(tc.batch_size, len(ds))
    for epoch in range(tc.epochs):
        plan = D.BatchPlan(batch, shuffle_seed=tc.seed * 1_000_003 + epoch)
        for x, y in D.batches(ds, plan):
            logits, _ = nn.forward(m, x)
            backward(nn.cross_entropy(logits, y))
            nn.sgd_step(m, state)
    return m


def pretrain(
    cfg: ExperimentConfig, id_train: D.Dataset, id_test: Optional[D.Dataset] = None
) -> tuple[nn.Classifier, dict]:
    arch = build_arch(cfg, id_train)
    D.validate_dataset(id_train, arch["num_classes"])
    m = nn.init_classifier(arch, cfg.pretrain.seed)
    train_epochs(m, id_train, cfg.pretrain)
    stats = {"train_accuracy": accuracy(nn.predict_logits(m, id_train.images)[0], id_train.labels)}
    if id_test is not None:
        stats["test_accuracy"] = accuracy(nn.predict_logits(m, id_test.images)[0], id_test.labels)
    log.info("pretrained %s: %s", arch["num_classes"], stats)
    return m, stats


def mim_finetune_epoch(m: nn.Classifier, id_train: D.Dataset, ft: FinetuneConfig) -> FinetuneResult:
    """One pass over ``id_train``: per batch, CE on the ID batch plus uniform-target CE on
    synthesized OOD samples built from that batch, followed by one SGD step.

    The input model is left untouched; a fine-tuned copy is returned.
    """
    if id_train.labels is None:
        raise ContractError("fine-tuning needs a labelled ID training set")
    m = m.copy()
    state = nn.OptimizerState.for_model(m, ft.lr, ft.momentum)
    aug = ft.augment_for(m.input_shape[-2:])
    rng = np.random.default_rng([ft.seed, 1])
    plan = D.BatchPlan(min(ft.batch_size, len(id_train)), shuffle_seed=ft.seed)
    trace: list[nn.LossBreakdown] = []
    visits = np.zeros(len(id_train), dtype=np.int64)
    for idx in D.batch_indices(len(id_train), plan):
        visits[idx] += 1
        x = id_train.images[idx]
        y = id_train.labels[idx]
        # a ragged final batch may hold fewer than k samples
        k = min(ft.mixup.k, len(idx))
        mix_cfg = ft.mixup if k == ft.mixup.k else MixupConfig(k, ft.mixup.weight_mode, ft.mixup.alpha, ft.mixup.seed)
        mixed = synthesize_ood(x, mix_cfg, aug, rng)
        total, parts = nn.mim_loss(m, x, y, mixed.x_aug)
        backward(total)
        nn.sgd_step(m, state)
        trace.append(parts)
    return FinetuneResult(m, trace, visits)


# ---------------------------------------------------------------------------
# evaluation


def fit_detectors(m: nn.Classifier, fit_set: D.Dataset, detectors: Sequence[Detector]) -> list[Detector]:
    needing = [d for d in detectors if d.needs_fit]
    if needing:
        logits, feats = nn.predict_logits(m, fit_set.images)
        for d in needing:
            d.fit(logits, feats, fit_set.labels)
    return list(detectors)


def evaluate(
    m: nn.Classifier,
    id_test: D.Dataset,
    ood_sets: Sequence[D.Dataset],
    detectors: Sequence[Detector],
    phase: str = "eval",
    positive: str = "id",
) -> EvalReport:
    unfitted = [d.name for d in detectors if not d.fitted]
    if unfitted:
        raise ContractError(f"detectors {unfitted} must be fitted on ID data before evaluation")
    id_logits, id_feats = nn.predict_logits(m, id_test.images)
    outputs = [nn.predict_logits(m, ds.images) for ds in ood_sets]
    report = EvalReport()
    if id_test.labels is not None:
        report.id_accuracy[phase] = accuracy(id_logits, id_test.labels)
    for det in detectors:
        id_scores = det.score(id_logits, id_feats)
        for ds, (lo, fe) in zip(ood_sets, outputs):
            split = ScoredSplit(id_scores, det.score(lo, fe)).oriented(positive)
            report.rows.append(ReportRow(id_test.name, ds.name, det.name, phase, auroc(split), aupr(split)))
    return report


# ---------------------------------------------------------------------------
# reports


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_report_csv(report: EvalReport, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in report.rows:
            w.writerow([r.id_dataset, r.ood_dataset, r.detector, r.phase, _fmt(r.auroc), _fmt(r.aupr)])


def read_report_csv(path: Union[str, Path]) -> EvalReport:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != REPORT_HEADER:
        raise D.FormatError(f"{path}: unexpected report header {rows[0] if rows else None}")
    out = EvalReport()
    for row in rows[1:]:
        out.rows.append(ReportRow(row[0], row[1], row[2], row[3], float(row[4]), float(row[5])))
    return out


def write_losses_csv(trace: Sequence[nn.LossBreakdown], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("batch_index", "l_id", "l_ood"))
        for i, t in enumerate(trace):
            w.writerow((i, f"{t.l_id:.9f}", f"{t.l_ood:.9f}"))


def emit_report(
    report: EvalReport,
    manifest: RunManifest,
    out_dir: Union[str, Path],
    trace: Optional[Sequence[nn.LossBreakdown]] = None,
) -> RunManifest:
    """Write ``report.csv``, ``losses.csv`` (when a trace is given) and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.csv"
    write_report_csv(report, report_path)
    manifest.report_path = str(report_path)
    if trace is not None:
        losses = out / "losses.csv"
        write_losses_csv(trace, losses)
        manifest.losses_path = str(losses)
    manifest.id_accuracy = dict(report.id_accuracy)
    (out / "manifest.json").write_text(manifest.to_json() + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------


def run_experiment(config_path: Union[str, Path], env: Optional[dict] = None) -> RunManifest:
    """load -> (pretrain | load model) -> evaluate(before) -> fine-tune -> evaluate(after) -> report."""
    timings: dict[str, float] = {}
    clock = time.perf_counter()

    def tick(name: str) -> None:
        nonlocal clock
        now = time.perf_counter()
        timings[name] = round(now - clock, 3)
        clock = now

    with stage("config"):
        cfg = load_config(config_path, env)
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
    with stage("data"):
        id_train, id_test = load_id_data(cfg)
        ood_sets = load_ood_data(cfg)
    tick("load")

    pre_path = out / "model_pretrained.mim"
    with stage("pretrain"):
        if cfg.model_path is not None:
            base = nn.load_model(cfg.model_path, num_classes_of(cfg, id_train))
        else:
            base, _ = pretrain(cfg, id_train)
        nn.save_model(base, pre_path)
    tick("pretrain")

    with stage("evaluate-before"):
        before_model = nn.load_model(pre_path)
        detectors = fit_detectors(before_model, id_train, cfg.make_detectors())
        report = evaluate(before_model, id_test, ood_sets, detectors, "before", cfg.positive_class)
    tick("evaluate_before")

    post_path = out / "model_finetuned.mim"
    with stage("finetune"):
        if cfg.finetune.mixup.k > min(cfg.finetune.batch_size, len(id_train)):
            raise ConfigError(f"mixup k={cfg.finetune.mixup.k} exceeds the batch size")
        result = mim_finetune_epoch(before_model, id_train, cfg.finetune)
        nn.save_model(result.model, post_path)
    tick("finetune")

    with stage("evaluate-after"):
        after_model = nn.load_model(post_path)
        detectors = fit_detectors(after_model, id_train, cfg.make_detectors())
        report.extend(evaluate(after_model, id_test, ood_sets, detectors, "after", cfg.positive_class))
    tick("evaluate_after")

    with stage("report"):
        manifest = RunManifest(
            config_hash=cfg.config_hash,
            seeds={
                "pretrain": cfg.pretrain.seed,
                "finetune": cfg.finetune.seed,
                "data": cfg.synthetic.seed if cfg.synthetic else None,
            },
            model_files={"pretrained": str(pre_path), "finetuned": str(post_path)},
            model_sha256={"pretrained": _sha256(pre_path), "finetuned": _sha256(post_path)},
            report_path="",
            losses_path=None,
            id_accuracy={},
            timings=timings,
        )
        emit_report(report, manifest, out, result.trace)
    tick("report")
    return manifest
