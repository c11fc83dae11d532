"""Config-driven experiment orchestration.

For every seed: generate the domains, build and pretrain a backbone on the
source domain, run every configured arm from that pretrained state, evaluate,
and collect rows.  Rows are ordered by (arm, seed) and every random stream is
derived from the seed, so identical configs give byte-identical CSV files.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import Arm, DomainConfig, ExperimentConfig, config_digest
from .data import Dataset, DatasetSpec, gen_dataset, restrict_bias, subsample_categories, subsample_images
from .errors import DivergenceError
from .metrics import (
    Curve,
    MetricsReport,
    cluster_purity,
    convergence_lead,
    linear_probe,
    mean_average_precision,
    top1_accuracy,
    verification_report,
)
from .model import DualHeadModel, build_model, mark_pretrained, save_checkpoint
from .report import emit_svg_lineplot, write_aggregate_csv, write_metrics_csv, write_records_csv
from .seeding import derive_seed
from .trainer import (
    SOURCE,
    TARGET,
    Schedule,
    TrainConfig,
    TrainingData,
    TrainRecord,
    extract_features,
    predict_logits,
    train,
)

log = logging.getLogger(__name__)


@dataclass
class SeedData:
    source: Dataset
    target: Dataset  # biased training split (train_rotation applied)
    target_full: Dataset  # same draws over the full rotation range
    target_test: Dataset
    target2: Optional[Dataset] = None


@dataclass
class RunReport:
    experiment: str
    records: dict[tuple[str, int], TrainRecord] = field(default_factory=dict)
    record_rows: list[tuple] = field(default_factory=list)
    metric_rows: list[tuple] = field(default_factory=list)
    aggregate_rows: list[tuple] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    provenance: dict[str, str] = field(default_factory=dict)

    def metric(self, arm: str, metric: str, level: str = "") -> list[float]:
        return [row[5] for row in self.metric_rows if row[1] == arm and row[3] == metric and row[4] == level]

    def median(self, arm: str, metric: str, level: str = "") -> float:
        for row in self.aggregate_rows:
            if row[1] == arm and row[2] == metric and row[3] == level:
                return row[4]
        return math.nan

    def curve(self, arm: str, seed: int, column: str = "test_acc") -> Curve:
        rec = self.records[(arm, seed)]
        return Curve(f"{arm}/{seed}", [r.epoch for r in rec.rows], [getattr(r, column) for r in rec.rows])


def domain_spec(dc: DomainConfig, seed: int, domain: str, *, classes=None, offset=None, per_class=None) -> DatasetSpec:
    return DatasetSpec(
        mode=dc.mode,
        num_classes=dc.classes if classes is None else classes,
        samples_per_class=dc.samples_per_class if per_class is None else per_class,
        rotation=dc.rotation,
        translation=dc.translation,
        scale=dc.scale,
        noise=dc.noise,
        seed=seed,
        domain=domain,
        class_offset=dc.class_offset if offset is None else offset,
        dim=dc.dim,
    )


def make_data(cfg: ExperimentConfig, seed: int) -> SeedData:
    source = gen_dataset(domain_spec(cfg.source, derive_seed(seed, "data", "source"), "source"))
    tspec = domain_spec(cfg.target, derive_seed(seed, "data", "target"), "target")
    target_full = gen_dataset(tspec)
    if cfg.target.train_rotation is not None:
        target = gen_dataset(restrict_bias(tspec, "rotation", cfg.target.train_rotation))
    else:
        target = target_full
    test_seed = derive_seed(seed, "data", "target_test")
    if cfg.kind == "verification":
        test_spec = domain_spec(
            cfg.target,
            test_seed,
            "target",
            classes=cfg.target.test_classes,
            offset=cfg.target.test_class_offset,
            per_class=cfg.target.test_samples_per_class,
        )
    else:
        test_spec = domain_spec(cfg.target, test_seed, "target", per_class=cfg.target.test_samples_per_class)
    target2 = None
    if cfg.target2 is not None:
        t2 = domain_spec(cfg.target2, derive_seed(seed, "data", "target2"), "target2")
        if cfg.target2.train_rotation is not None:
            t2 = restrict_bias(t2, "rotation", cfg.target2.train_rotation)
        target2 = gen_dataset(t2)
    return SeedData(source, target, target_full, gen_dataset(test_spec), target2)


def _subsample_source(ds: Dataset, how: str, seed: int) -> Dataset:
    if how == "none":
        return ds
    kind, _, frac = how.partition(":")
    fn = subsample_images if kind == "images" else subsample_categories
    return fn(ds, float(frac), derive_seed(seed, "subsample", kind))


def arm_train_config(cfg: ExperimentConfig, arm: Arm, seed: int) -> tuple[TrainConfig, Schedule]:
    s, o = cfg.train, arm.overrides

    def pick(name):
        value = getattr(o, name)
        return getattr(s, name) if value is None else value

    E = pick("E")
    if o.fixed_alpha is not None:
        schedule = Schedule(fixed_alpha=o.fixed_alpha)
    else:
        schedule = Schedule(E=E)
    tc = TrainConfig(
        mode=arm.mode,
        lr=pick("lr"),
        momentum=pick("momentum"),
        batch=pick("batch"),
        epochs=pick("epochs"),
        post_saturation_epochs=pick("post_saturation"),
        smoothing=pick("smoothing"),
        # one transfer seed for all arms: same target-head init and batch order
        seed=derive_seed(seed, "transfer"),
        use_target2=o.use_target2,
        freeze_source_head=pick("freeze_source_head"),
    )
    return tc, schedule


def pretrain_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    p = cfg.pretrain
    return TrainConfig(
        mode="pretrain",
        lr=p.lr,
        momentum=p.momentum,
        batch=p.batch,
        epochs=p.epochs,
        smoothing=p.smoothing,
        seed=derive_seed(seed, "pretrain"),
    )


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def evaluate_model(
    cfg: ExperimentConfig, model: DualHeadModel, data: SeedData, train_split: Dataset, seed: int
) -> MetricsReport:
    ev = cfg.eval
    if cfg.kind == "verification":
        feats = extract_features(model, data.target_test.data)
        report = verification_report(feats, data.target_test.labels, ev.far_levels)
    else:
        report = MetricsReport()
        if TARGET in model.heads:
            logits = predict_logits(model, TARGET, data.target_test.data)
            report.accuracy = top1_accuracy(logits, data.target_test.labels)
            report.mAP, report.per_class_ap, counts = mean_average_precision(_softmax(logits), data.target_test.labels)
            report.counts.update(counts)
    if ev.probe or ev.purity:
        test_feats = extract_features(model, data.target_test.data)
        if ev.probe:
            train_feats = extract_features(model, train_split.data)
            if cfg.kind == "verification":
                # identities differ between splits; probe within the test identities instead
                half = np.arange(len(data.target_test)) % 2 == 0
                report.probe_accuracy = linear_probe(
                    test_feats[half], data.target_test.labels[half], test_feats[~half], data.target_test.labels[~half],
                    ev.probe_epochs,
                )
            else:
                report.probe_accuracy = linear_probe(
                    train_feats, train_split.labels, test_feats, data.target_test.labels, ev.probe_epochs
                )
        if ev.purity:
            report.purity = cluster_purity(
                test_feats,
                data.target_test.labels,
                data.target_test.num_classes,
                restarts=ev.purity_restarts,
                seed=derive_seed(seed, "purity"),
            )
    return report


def _record_rows(experiment: str, arm: str, seed: int, rec: TrainRecord) -> list[tuple]:
    return [
        (experiment, arm, seed, r.epoch, r.alpha, r.loss_src, r.loss_tar, r.train_acc, r.test_acc)
        for r in rec.rows
    ]


def run_experiment(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> RunReport:
    """Run every (arm, seed) pair; divergences are recorded and the run continues."""
    exp = cfg.experiment
    out = Path(out_dir) if out_dir is not None else cfg.output_dir()
    report = RunReport(exp, provenance={"config_sha256": config_digest(cfg), "version": __version__})
    per_arm_rows: dict[str, list[tuple]] = defaultdict(list)
    per_arm_metrics: dict[str, list[tuple]] = defaultdict(list)
    pretrain_rows: list[tuple] = []
    needs_pretrain = any(a.mode in ("finetune", "intermediate", "soft", "pretrained") for a in cfg.arms)
    ckpt_dir = out / "checkpoints"
    if write:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for seed in cfg.seeds:
        data = make_data(cfg, seed)
        initial = build_model(cfg.model, [(SOURCE, data.source.num_classes)], derive_seed(seed, "model"))
        pretrained = None
        if needs_pretrain:
            try:
                pre = train(initial, TrainingData(source=data.source), pretrain_config(cfg, seed))
            except DivergenceError as exc:
                report.failures.append(f"pretrain seed {seed}: {exc}")
                for arm in cfg.arms:
                    per_arm_metrics[arm.name].append((exp, arm.name, seed, "diverged", "", 1.0))
                continue
            pretrained = pre.model
            mark_pretrained(pretrained)
            report.records[("pretrain", seed)] = pre
            pretrain_rows += _record_rows(exp, "pretrain", seed, pre)
            if write:
                path = ckpt_dir / f"pretrain_seed{seed}.ckpt"
                save_checkpoint(pretrained, path)
                pre.checkpoint = str(path)

        for arm in cfg.arms:
            train_split = data.target_full if arm.overrides.unbiased else data.target
            if arm.mode == "random":
                model = initial
            elif arm.mode == "pretrained":
                model = pretrained
            else:
                tc, schedule = arm_train_config(cfg, arm, seed)
                source = _subsample_source(data.source, arm.overrides.source_subsample, seed)
                tdata = TrainingData(source=source, target=train_split, target_test=data.target_test, target2=data.target2)
                try:
                    rec = train(pretrained, tdata, tc, schedule)
                except DivergenceError as exc:
                    report.failures.append(f"{arm.name} seed {seed}: {exc}")
                    per_arm_metrics[arm.name].append((exp, arm.name, seed, "diverged", "", 1.0))
                    continue
                report.records[(arm.name, seed)] = rec
                per_arm_rows[arm.name] += _record_rows(exp, arm.name, seed, rec)
                model = rec.model
                if write:
                    path = ckpt_dir / f"{arm.name}_seed{seed}.ckpt"
                    save_checkpoint(model, path)
                    rec.checkpoint = str(path)
            metrics = evaluate_model(cfg, model, data, train_split, seed)
            per_arm_metrics[arm.name] += [(exp, arm.name, seed, m, lvl, v) for m, lvl, v in metrics.rows()]

        if cfg.eval.lead is not None:
            a, _, b = cfg.eval.lead.partition(":")
            if (a, seed) in report.records and (b, seed) in report.records:
                lead = convergence_lead(report.curve(a, seed), report.curve(b, seed), cfg.eval.convergence_threshold)
                value = math.nan if lead is None else float(lead)
                per_arm_metrics[a].append(
                    (exp, a, seed, "convergence_lead", f"{cfg.eval.convergence_threshold:g}", value)
                )

    report.record_rows = pretrain_rows + [row for arm in cfg.arms for row in per_arm_rows[arm.name]]
    report.metric_rows = [row for arm in cfg.arms for row in per_arm_metrics[arm.name]]
    report.aggregate_rows = aggregate(report.metric_rows)
    if write:
        write_outputs(report, cfg, out)
    return report


def aggregate(metric_rows: list[tuple]) -> list[tuple]:
    """Median over seeds for every (arm, metric, level), ignoring NaN values."""
    groups: dict[tuple, list[float]] = {}
    for exp, arm, _seed, metric, level, value in metric_rows:
        groups.setdefault((exp, arm, metric, level), []).append(value)
    rows = []
    for (exp, arm, metric, level), values in groups.items():
        finite = [v for v in values if not math.isnan(v)]
        med = float(np.median(finite)) if finite else math.nan
        rows.append((exp, arm, metric, level, med, len(finite)))
    return rows


def median_curves(report: RunReport, arms, column: str = "test_acc") -> list[Curve]:
    curves = []
    for arm in arms:
        by_epoch: dict[int, list[float]] = defaultdict(list)
        for (name, _seed), rec in report.records.items():
            if name != arm:
                continue
            for r in rec.rows:
                by_epoch[r.epoch].append(getattr(r, column))
        epochs = sorted(by_epoch)
        curves.append(Curve(arm, epochs, [float(np.median(by_epoch[e])) for e in epochs]))
    return curves


def write_outputs(report: RunReport, cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(out / "records.csv", report.record_rows)
    write_metrics_csv(out / "metrics.csv", report.metric_rows)
    write_aggregate_csv(out / "aggregate.csv", report.aggregate_rows)
    lines = [f"{k} = {v}" for k, v in sorted(report.provenance.items())]
    lines += [f"failure = {f}" for f in report.failures]
    (out / "provenance.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    trained = [a.name for a in cfg.arms if any(name == a.name for name, _ in report.records)]
    if cfg.eval.plot and trained:
        emit_svg_lineplot(
            median_curves(report, trained),
            out / "test_acc.svg",
            x_label="epoch",
            y_label="median target test accuracy",
            title=cfg.experiment,
        )
