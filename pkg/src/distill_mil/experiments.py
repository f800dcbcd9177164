"""Cross-validated baseline/teacher/student comparison and the bag-count sweep."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .data import DigitPool, MnistBagsSpec, fold_split, generate_mnist_bags, make_folds
from .metrics import MetricReport, auroc, evaluate_scores
from .model import LENET5, FeatureExtractorSpec, predict_bags, predict_instances
from .training import train_student, train_teacher
from .types import Bag, DistillConfig, TrainConfig, VatConfig

log = logging.getLogger(__name__)

MODELS = ("baseline", "teacher", "student")
METRICS = ("accuracy", "f1", "auroc")
MODEL_TITLES = {"baseline": "MIL", "teacher": "Teacher", "student": "Student"}


@dataclass(frozen=True)
class ModelConfigs:
    """Everything needed to train the three compared models."""

    spec: FeatureExtractorSpec = LENET5
    attention_dim: int = 128
    vat: VatConfig = field(default_factory=VatConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    teacher_train: TrainConfig = field(default_factory=TrainConfig)
    student_train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def baseline_vat(self) -> VatConfig:
        return dataclasses.replace(self.vat, lambda_n=0.0, lambda_delta=0.0, lambda_e=0.0)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=list))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg, seed=seed)


def evaluate_model(model, bags: Sequence[Bag], name: str, fold=None, seed=None, levels=("bag", "instance")):
    """Bag- and/or instance-level reports for one model on labelled test bags."""
    out = []
    if "bag" in levels:
        out.append(evaluate_scores(predict_bags(model, bags), [b.label for b in bags], "bag", name, fold, seed))
    if "instance" in levels:
        if any(getattr(b, "instance_labels", None) is None for b in bags):
            raise ValueError("instance-level evaluation needs instance labels on every test bag")
        x = np.concatenate([b.instances for b in bags])
        y = np.concatenate([b.instance_labels for b in bags])
        out.append(evaluate_scores(predict_instances(model, x)[:, 1], y, "instance", name, fold, seed))
    return out


def train_compared_models(train, valid, configs: ModelConfigs, seed: int) -> dict:
    """Baseline MIL, regularized teacher, and student distilled from that teacher."""
    kw = dict(spec=configs.spec, attention_dim=configs.attention_dim, valid=valid or None)
    base, _ = train_teacher(train, configs.baseline_vat, _seeded(configs.teacher_train, seed), **kw)
    teacher, _ = train_teacher(train, configs.vat, _seeded(configs.teacher_train, seed), **kw)
    student, _ = train_student(teacher, train, configs.distill, _seeded(configs.student_train, seed),
                               valid=valid or None)
    return {"baseline": base, "teacher": teacher, "student": student}


def run_split(train, valid, test, configs: ModelConfigs, seed: int, fold=None,
              levels=("bag", "instance")) -> List[MetricReport]:
    models = train_compared_models(train, valid, configs, seed)
    reports = []
    for name in MODELS:
        reports += evaluate_model(models[name], test, name, fold, seed, levels)
    return reports


def _fold_job(args) -> List[MetricReport]:
    bags, labels, configs, k, seed, fold, levels = args
    folds = make_folds(labels, k, seed)
    tr, va, te = fold_split(labels, folds, fold, seed)
    run_seed = seed * 1000 + fold
    return run_split([bags[i] for i in tr], [bags[i] for i in va], [bags[i] for i in te],
                     configs, run_seed, fold=fold, levels=levels)


@dataclass
class CrossValResult:
    reports: List[MetricReport]
    k: int
    config_hash: str = ""

    def table(self, level: str = "instance") -> List[dict]:
        return results_table(self.reports, level, self.k)

    def render(self, level: str = "instance") -> str:
        return render_table(self.table(level), level)


def run_cross_validation(
    bags: Sequence[Bag],
    configs: ModelConfigs,
    k: int = 5,
    seeds: Sequence[int] = (0,),
    out_dir=None,
    workers: int = 1,
    levels=("bag", "instance"),
) -> CrossValResult:
    """k-fold comparison of baseline / teacher / student.

    With ``out_dir`` every finished fold is written to
    ``out_dir/folds/seed{s}_fold{i}.json`` and reused on a rerun with the same
    configuration hash, so an interrupted run resumes where it stopped.
    """
    labels = np.array([b.label for b in bags])
    digest = configs.digest()
    done, jobs = {}, []
    fold_dir = Path(out_dir) / "folds" if out_dir is not None else None
    for seed in seeds:
        for fold in range(k):
            path = fold_dir / f"seed{seed}_fold{fold}.json" if fold_dir else None
            if path is not None and path.exists():
                saved = json.loads(path.read_text())
                if saved.get("config_hash") == digest:
                    done[(seed, fold)] = [MetricReport(**r) for r in saved["reports"]]
                    continue
            jobs.append((seed, fold, path))

    def persist(seed, fold, path, reps):
        done[(seed, fold)] = reps
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({"config_hash": digest, "seed": seed, "fold": fold,
                                        "reports": [r.to_dict() for r in reps]}, indent=1))
        log.info("seed %d fold %d done", seed, fold)

    args = [(list(bags), labels, configs, k, s, f, tuple(levels)) for s, f, _ in jobs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            for (s, f, p), reps in zip(jobs, pool.map(_fold_job, args)):
                persist(s, f, p, reps)
    else:
        for (s, f, p), a in zip(jobs, args):
            persist(s, f, p, _fold_job(a))
    reports = [r for key in sorted(done) for r in done[key]]
    return CrossValResult(reports, k, digest)


def results_table(reports: Sequence[MetricReport], level: str, k: Optional[int] = None) -> List[dict]:
    """One row per fold plus an ``Average`` row; columns ``{metric}/{model}``.

    Fold values are averaged over seeds first; the average row is the mean of
    the fold rows.
    """
    reps = [r for r in reports if r.level == level]
    folds = sorted({r.fold for r in reps})
    rows = []
    for fold in folds:
        row = {"fold": fold}
        for m in MODELS:
            sel = [r for r in reps if r.fold == fold and r.model == m]
            for metric in METRICS:
                row[f"{metric}/{m}"] = float(np.mean([getattr(r, metric) for r in sel])) if sel else float("nan")
        rows.append(row)
    if rows:
        avg = {"fold": "Average"}
        for key in rows[0]:
            if key != "fold":
                avg[key] = float(np.mean([r[key] for r in rows]))
        rows.append(avg)
    return rows


def table_to_tsv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def render_table(rows: Sequence[dict], level: str = "instance") -> str:
    """Fixed-width text table: Fold | Accuracy x3 | F1 x3 | AUROC x3."""
    heads = ["Fold"] + [f"{metric[:3].upper() if metric != 'auroc' else 'AUC'}-{MODEL_TITLES[m]}"
                        for metric in METRICS for m in MODELS]
    lines = [f"{level}-level results", " | ".join(f"{h:>11}" for h in heads)]
    lines.append("-" * len(lines[-1]))
    for r in rows:
        cells = [f"{str(r['fold']):>11}"] + [f"{r[f'{metric}/{m}']:>11.2f}" for metric in METRICS for m in MODELS]
        lines.append(" | ".join(cells))
    return "\n".join(lines)


# --------------------------------------------------------------------------- sweep


@dataclass(frozen=True)
class SweepConfig:
    bag_counts: tuple = (50, 75, 100, 200, 500)
    bag_sizes: tuple = (10, 20)
    seeds: tuple = (0, 1, 2)
    validation_bags: int = 1000
    validation_seed: int = 10_000
    bag_size_variance: float = 5.0
    positive_digit: int = 9


@dataclass
class SweepResult:
    rows: List[dict]

    def series(self) -> dict:
        """``{K: {condition: {"N": [...], "mean": [...], "std": [...]}}}``."""
        out: dict = {}
        for kk in sorted({r["K"] for r in self.rows}):
            out[kk] = {}
            for cond in ("vat", "no_vat"):
                ns = sorted({r["N"] for r in self.rows if r["K"] == kk and r["condition"] == cond})
                vals = [[r["auroc"] for r in self.rows if r["K"] == kk and r["N"] == n and r["condition"] == cond]
                        for n in ns]
                out[kk][cond] = {"N": ns, "mean": [float(np.mean(v)) for v in vals],
                                 "std": [float(np.std(v)) for v in vals]}
        return out

    def mean(self, n: int, k: int, condition: str) -> float:
        return float(np.mean([r["auroc"] for r in self.rows
                              if r["N"] == n and r["K"] == k and r["condition"] == condition]))


def validation_bags(pool: DigitPool, k: int, cfg: SweepConfig) -> List[Bag]:
    spec = MnistBagsSpec(cfg.validation_bags, k, cfg.bag_size_variance, cfg.positive_digit,
                         seed=cfg.validation_seed + k)
    return generate_mnist_bags(spec, pool, prefix="val")


def _sweep_job(args) -> List[dict]:
    train_pool, val, n, k, seed, cfg, configs = args
    spec = MnistBagsSpec(n, k, cfg.bag_size_variance, cfg.positive_digit, seed=seed)
    bags = generate_mnist_bags(spec, train_pool)
    y = [b.label for b in val]
    rows = []
    for cond, vat in (("no_vat", configs.baseline_vat), ("vat", configs.vat)):
        model, hist = train_teacher(bags, vat, _seeded(configs.teacher_train, seed),
                                    spec=configs.spec, attention_dim=configs.attention_dim)
        rows.append({"N": n, "K": k, "seed": seed, "condition": cond,
                     "auroc": auroc(predict_bags(model, val), y), "epochs": len(hist)})
    return rows


def run_vat_sweep(train_pool: DigitPool, val_pool: DigitPool, configs: ModelConfigs,
                  cfg: SweepConfig = SweepConfig(), workers: int = 1) -> SweepResult:
    """Bag-level validation AUROC of teachers trained with and without the
    regularizers, for every (N, K, seed). The validation bags depend only on K."""
    vals = {k: validation_bags(val_pool, k, cfg) for k in cfg.bag_sizes}
    args = [(train_pool, vals[k], n, k, s, cfg, configs)
            for k in cfg.bag_sizes for n in cfg.bag_counts for s in cfg.seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_sweep_job, args))
    else:
        results = [_sweep_job(a) for a in args]
    return SweepResult([r for rs in results for r in rs])
