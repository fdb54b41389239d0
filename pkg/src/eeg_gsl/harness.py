"""Leave-one-subject-out evaluation: fold planning, metrics, the ablation
experiment matrix, leakage auditing, and report files.

Every (ablation, seed, fold) job is independent and persisted atomically
as soon as it finishes, so an interrupted matrix resumes by skipping
completed triples, and folds can run in a process pool. Reports contain
no wall-clock state: one (config, seed) run repeated twice produces
byte-identical report files.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from eeg_gsl._util import atomic_write_json, seeded_rng
from eeg_gsl.augment import AugmentPolicy
from eeg_gsl.encoder import EncoderConfig
from eeg_gsl.graph import GSLConfig
from eeg_gsl.signal import LABELS, SynthConfig, Window
from eeg_gsl.train import (
    ABLATIONS,
    TrainConfig,
    build_model,
    evaluate_model,
    pretrain,
    train_supervised,
)


@dataclass
class FoldPlan:
    test_subject: str
    val_subjects: tuple[str, str]        # one HC, one PD
    train_subjects: list[str]
    samplewise: bool = False

    def to_dict(self) -> dict:
        return {
            "test_subject": self.test_subject,
            "val_subjects": list(self.val_subjects),
            "train_subjects": list(self.train_subjects),
            "samplewise": self.samplewise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls(d["test_subject"], tuple(d["val_subjects"]),
                   list(d["train_subjects"]), d.get("samplewise", False))


def make_folds(subject_labels: dict[str, str], seed: int) -> list[FoldPlan]:
    """One fold per subject; a seeded (one HC, one PD) validation pair is
    drawn from each fold's training subjects."""
    by_class = {"HC": sorted(s for s, l in subject_labels.items() if l == "HC"),
                "PD": sorted(s for s, l in subject_labels.items() if l == "PD")}
    unknown = set(subject_labels.values()) - set(LABELS)
    if unknown:
        raise ValueError(f"unknown labels {sorted(unknown)}")
    if len(by_class["HC"]) < 2 or len(by_class["PD"]) < 2:
        raise ValueError(
            f"need >= 2 subjects per class for a validation pair, got "
            f"{len(by_class['HC'])} HC / {len(by_class['PD'])} PD"
        )
    folds = []
    for test in sorted(subject_labels):
        rng = seeded_rng(seed, "folds", test)
        rest_hc = [s for s in by_class["HC"] if s != test]
        rest_pd = [s for s in by_class["PD"] if s != test]
        val = (rest_hc[rng.integers(len(rest_hc))], rest_pd[rng.integers(len(rest_pd))])
        train = [s for s in sorted(subject_labels) if s != test and s not in val]
        folds.append(FoldPlan(test, val, train))
    return folds


def make_samplewise_split(windows: list[Window], seed: int, train_fraction: float = 0.8):
    """Window-level split, provided for demonstration only: test-subject
    windows leak into training, so results are not subject-generalizable."""
    order = seeded_rng(seed, "samplewise").permutation(len(windows))
    cut = int(round(train_fraction * len(windows)))
    train = [windows[i] for i in order[:cut]]
    test = [windows[i] for i in order[cut:]]
    return train, test


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def auc_score(scores, truths) -> float | None:
    """Mann-Whitney rank AUC with midranks for ties; None if single-class."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    n_pos = int(truths.sum())
    n_neg = len(truths) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[truths == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def metrics(predictions: list[tuple[float, int, int]]) -> dict:
    """Window-level accuracy, macro precision/recall/F1, and AUC from
    (PD score, predicted, true) triples."""
    if not predictions:
        raise ValueError("metrics: empty prediction list")
    scores = [p[0] for p in predictions]
    preds = np.array([p[1] for p in predictions])
    trues = np.array([p[2] for p in predictions])
    accuracy = float((preds == trues).mean())
    precisions, recalls, f1s = [], [], []
    for cls in (0, 1):
        tp = int(((preds == cls) & (trues == cls)).sum())
        fp = int(((preds == cls) & (trues != cls)).sum())
        fn = int(((preds != cls) & (trues == cls)).sum())
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(f1)
    return {
        "accuracy": accuracy,
        "precision": float(np.mean(precisions)),
        "recall": float(np.mean(recalls)),
        "f1": float(np.mean(f1s)),
        "auc": auc_score(scores, trues),
        "n": len(predictions),
    }


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=dict)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gsl: GSLConfig = field(default_factory=GSLConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    harness: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            data=d.get("data", {}),
            augment=AugmentPolicy.from_dict(d.get("augment", {})),
            encoder=EncoderConfig.from_dict(d.get("encoder", {})),
            gsl=GSLConfig.from_dict(d.get("gsl", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            harness=d.get("harness", {}),
        )

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "augment": self.augment.to_dict(),
            "encoder": self.encoder.to_dict(),
            "gsl": self.gsl.to_dict(),
            "train": self.train.to_dict(),
            "harness": self.harness,
        }

    def pretrain_config(self, seed: int) -> TrainConfig:
        overrides = dict(self.harness.get("pretrain", {}))
        base = {"mode": "pretrain", "lr": 1e-4, "batch_size": 100, "epochs": 160,
                "temperature": 0.005, "seed": seed}
        base.update(overrides)
        base["seed"] = seed
        return TrainConfig.from_dict(base)

    def supervised_config(self, ablation: str, seed: int) -> TrainConfig:
        d = self.train.to_dict()
        d.update({"mode": "supervised", "ablation": ablation, "seed": seed})
        return TrainConfig.from_dict(d)


# ---------------------------------------------------------------------------
# experiment matrix
# ---------------------------------------------------------------------------

def _subject_windows(windows: list[Window], subjects) -> list[Window]:
    wanted = set(subjects)
    return [w for w in windows if w.subject_id in wanted]


def _result_path(out_dir, ablation, seed, test_subject) -> str:
    return os.path.join(out_dir, f"result_{ablation}_s{seed}_{test_subject}.json")


def run_fold_job(job: dict) -> dict:
    """One (ablation, seed, fold) training + test evaluation.

    Self-contained and deterministic given the job payload; used directly
    and via the process pool.
    """
    cfg = ExperimentConfig.from_dict(job["config"])
    fold = FoldPlan.from_dict(job["fold"])
    ablation = job["ablation"]
    seed = int(job["seed"])
    windows = [Window(s, l, np.asarray(x, np.float32), i)
               for s, l, x, i in job["windows"]]
    train_w = _subject_windows(windows, fold.train_subjects)
    val_w = _subject_windows(windows, fold.val_subjects)
    test_w = _subject_windows(windows, [fold.test_subject])

    encoder_state = None
    pretrain_refs = []
    if ablation in ("cl_freeze", "cl_finetune"):
        from eeg_gsl.encoder import LongConvEncoder

        pre_cfg = cfg.pretrain_config(seed)
        encoder = LongConvEncoder(cfg.encoder, seeded_rng(seed, "pretrain-init", fold.test_subject))
        pool = train_w + val_w  # all non-test subjects of this fold
        ckpt = pretrain(encoder, pool, cfg.augment, pre_cfg)
        encoder_state = ckpt["arrays"]
        pretrain_refs = ckpt["train_refs"]

    model = build_model(cfg.encoder, cfg.gsl, ablation, seed, encoder_state)
    sup_cfg = cfg.supervised_config(ablation, seed)
    ckpt, history = train_supervised(model, train_w, val_w, sup_cfg)
    ckpt["train_refs"] = sorted(set(map(tuple, ckpt["train_refs"])) | set(map(tuple, pretrain_refs)))
    if job.get("checkpoint_path"):
        from eeg_gsl.train import save_checkpoint

        tmp = job["checkpoint_path"] + ".tmp"
        save_checkpoint(tmp, ckpt)
        os.replace(tmp, job["checkpoint_path"])
    test_eval = evaluate_model(model, test_w)
    predictions = [
        [float(s), int(p), int(t)]
        for s, p, t in zip(test_eval["scores"], test_eval["predicted"], test_eval["true"])
    ]
    return {
        "ablation": ablation,
        "seed": seed,
        "fold": fold.to_dict(),
        "test_subject": fold.test_subject,
        "predictions": predictions,
        "test_accuracy": test_eval["accuracy"],
        "best_epoch": ckpt["meta"]["epoch"],
        "history": history,
        "train_refs": [list(r) for r in ckpt["train_refs"]],
        "val_refs": [list(r) for r in ckpt["val_refs"]],
        "pretrain_refs": [list(r) for r in pretrain_refs],
    }


def run_experiment(
    windows: list[Window],
    config: ExperimentConfig,
    ablations: list[str],
    seeds: list[int],
    out_dir,
    workers: int = 1,
) -> dict:
    """Full matrix: for each (ablation, seed) run every LOSO fold, pool the
    window-level test predictions, and aggregate mean +- std over seeds.

    Completed (ablation, seed, fold) triples found in out_dir are reused;
    failed jobs leave the matrix marked partial without discarding the
    rest.
    """
    for ablation in ablations:
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}")
    os.makedirs(out_dir, exist_ok=True)
    subject_labels = {}
    for w in windows:
        subject_labels[w.subject_id] = w.label
    payload = [(w.subject_id, w.label, w.samples, w.window_index) for w in windows]

    jobs, job_paths = [], []
    fold_plans: dict[int, list[FoldPlan]] = {}
    for seed in seeds:
        fold_plans[seed] = make_folds(subject_labels, seed)
        for ablation in ablations:
            for fold in fold_plans[seed]:
                path = _result_path(out_dir, ablation, seed, fold.test_subject)
                if os.path.exists(path):
                    continue
                jobs.append({
                    "config": config.to_dict(),
                    "ablation": ablation,
                    "seed": seed,
                    "fold": fold.to_dict(),
                    "windows": payload,
                })
                job_paths.append(path)

    failures = []
    if jobs:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(run_fold_job, job) for job in jobs]
                for job, path, fut in zip(jobs, job_paths, futures):
                    try:
                        atomic_write_json(path, fut.result())
                    except Exception as exc:  # noqa: BLE001 - fold isolation
                        failures.append({"path": path, "error": repr(exc)})
        else:
            for job, path in zip(jobs, job_paths):
                try:
                    atomic_write_json(path, run_fold_job(job))
                except Exception as exc:  # noqa: BLE001 - fold isolation
                    failures.append({"path": path, "error": repr(exc)})

    report = assemble_report(config, ablations, seeds, fold_plans, out_dir)
    report["partial"] = bool(failures)
    if failures:
        report["failures"] = failures
    write_report_files(report, out_dir)
    return report


def assemble_report(config: ExperimentConfig, ablations, seeds, fold_plans, out_dir) -> dict:
    rows = []
    for ablation in ablations:
        for seed in seeds:
            pooled = []
            missing = []
            for fold in fold_plans[seed]:
                path = _result_path(out_dir, ablation, seed, fold.test_subject)
                if not os.path.exists(path):
                    missing.append(fold.test_subject)
                    continue
                with open(path) as fh:
                    result = json.load(fh)
                pooled.extend((s, p, t) for s, p, t in result["predictions"])
            if not pooled:
                continue
            row = {"config": ablation, "seed": seed, "missing_folds": missing}
            row.update(metrics(pooled))
            rows.append(row)

    aggregates = []
    for ablation in ablations:
        per_seed = [r for r in rows if r["config"] == ablation and not r["missing_folds"]]
        if not per_seed:
            continue
        agg = {"config": ablation, "n_seeds": len(per_seed)}
        for key in ("accuracy", "precision", "recall", "f1", "auc"):
            vals = [r[key] for r in per_seed if r[key] is not None]
            if not vals:
                agg[key] = None
                continue
            agg[key] = {"mean": float(np.mean(vals))}
            if len(per_seed) > 1:
                agg[key]["std"] = float(np.std(vals))
        aggregates.append(agg)
    return {
        "config": config.to_dict(),
        "ablations": list(ablations),
        "seeds": [int(s) for s in seeds],
        "pooling": "window-level predictions pooled across folds before metrics",
        "rows": rows,
        "aggregates": aggregates,
    }


def write_report_files(report: dict, out_dir) -> None:
    """report.json (full), report.csv (table-shaped aggregates, full
    precision so parsing round-trips), results.jsonl (per-seed rows)."""
    atomic_write_json(os.path.join(out_dir, "report.json"), report)
    lines = []
    for row in report["rows"]:
        lines.append(json.dumps(row, sort_keys=True))
    with open(os.path.join(out_dir, "results.jsonl"), "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))

    header = ["Method", "Accuracy %", "AUC", "F1-Score", "Precision", "Recall"]
    csv_rows = [",".join(header)]
    for agg in report["aggregates"]:
        cells = [agg["config"]]
        for key, scale in (("accuracy", 100.0), ("auc", 1.0), ("f1", 1.0),
                           ("precision", 1.0), ("recall", 1.0)):
            stat = agg.get(key)
            if stat is None:
                cells.append("")
            elif "std" in stat:
                cells.append(f"{repr(stat['mean'] * scale)}±{repr(stat['std'] * scale)}")
            else:
                cells.append(repr(stat["mean"] * scale))
        csv_rows.append(",".join(cells))
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write("\n".join(csv_rows) + "\n")


def parse_report_csv(path) -> list[dict]:
    """Inverse of the report.csv writer, for round-trip checks."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    out = []
    for line in lines[1:]:
        cells = line.split(",")
        row = {"config": cells[0]}
        for key, scale, cell in zip(("accuracy", "auc", "f1", "precision", "recall"),
                                    (100.0, 1.0, 1.0, 1.0, 1.0), cells[1:]):
            if not cell:
                row[key] = None
            elif "±" in cell:
                m, s = cell.split("±")
                row[key] = {"mean": float(m) / scale, "std": float(s) / scale}
            else:
                row[key] = {"mean": float(cell) / scale}
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# leakage audit
# ---------------------------------------------------------------------------

def leakage_audit(fold_plans: list[FoldPlan], results: list[dict],
                  windows: list[Window] | None = None) -> dict:
    """Check the subject-wise discipline of a finished (or planned) run.

    Violations: test subject appearing in its fold's train/val sets, a
    test-subject window in any training/pretraining batch reference list,
    missing or duplicated test coverage. Sample-wise plans produce a
    warning, not a violation. When windows are given, per-window
    normalization is verified numerically.
    """
    violations = []
    warn_list = []

    seen_tests = [f.test_subject for f in fold_plans]
    dupes = {s for s in seen_tests if seen_tests.count(s) > 1}
    if dupes:
        violations.append(f"subjects test in multiple folds: {sorted(dupes)}")
    for fold in fold_plans:
        if fold.samplewise:
            warn_list.append(
                f"fold {fold.test_subject}: sample-wise split; results are not "
                f"subject-generalizable"
            )
            continue
        others = set(fold.train_subjects) | set(fold.val_subjects)
        if fold.test_subject in others:
            violations.append(f"fold {fold.test_subject}: test subject present in train/val")
        overlap = set(fold.train_subjects) & set(fold.val_subjects)
        if overlap:
            violations.append(f"fold {fold.test_subject}: train/val overlap {sorted(overlap)}")

    plans_by_test = {f.test_subject: f for f in fold_plans}
    for result in results:
        test = result["test_subject"]
        fold = plans_by_test.get(test)
        if fold is None:
            violations.append(f"result for {test} has no matching fold plan")
            continue
        for kind in ("train_refs", "val_refs", "pretrain_refs"):
            bad = [r for r in result.get(kind, []) if r[0] == test]
            if bad:
                violations.append(
                    f"fold {test}: test-subject windows {bad[:3]} found in {kind}"
                )

    if windows is not None:
        for w in windows:
            mu = np.abs(w.samples.mean(axis=1, dtype=np.float64)).max()
            sd = np.abs(w.samples.std(axis=1, dtype=np.float64) - 1.0).max()
            if mu > 1e-3 or sd > 1e-2:
                violations.append(
                    f"window ({w.subject_id}, {w.window_index}) is not per-window "
                    f"standardized (|mean| {mu:.2e}, |std-1| {sd:.2e})"
                )
                break

    return {"clean": not violations, "violations": violations, "warnings": warn_list}
