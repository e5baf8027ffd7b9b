"""Accuracy, confusion matrices, paired t-tests and evaluation reports."""

from __future__ import annotations

import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import special

from .ct_ingest import NUM_PHASES, DatasetManifest, PhaseLabel, load_slices, write_pgm
from .errors import InvalidInputError


def _labels(x, name) -> np.ndarray:
    a = np.asarray(x)
    if a.ndim != 1:
        raise InvalidInputError(f"{name} must be a 1-D sequence of labels")
    if not np.all(np.isin(a, np.arange(NUM_PHASES))):
        raise InvalidInputError(f"{name} holds labels outside 0..{NUM_PHASES - 1}")
    return a.astype(np.int64)


def accuracy(preds, truths) -> float:
    """Fraction of positions where the predicted label equals the true one."""
    p, t = np.asarray(preds), np.asarray(truths)
    if p.shape != t.shape or p.ndim != 1:
        raise InvalidInputError(f"prediction/truth shapes differ: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise InvalidInputError("accuracy of an empty prediction set is undefined")
    return float(np.count_nonzero(p == t)) / p.size


@dataclass
class ConfusionMatrix:
    """Counts indexed ``[true phase, predicted phase]``."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def empty_rows(self) -> list:
        return [i for i in range(self.counts.shape[0]) if self.counts[i].sum() == 0]

    @property
    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def table(self) -> str:
        names = [p.wire_name for p in PhaseLabel]
        width = max(len(n) for n in names) + 2
        norm = self.normalized
        lines = ["true \\ predicted".ljust(width + 4) + "".join(n.rjust(width) for n in names)]
        for i, n in enumerate(names):
            cells = "".join(f"{norm[i, j]:.3f} ({self.counts[i, j]})".rjust(width + 6) for j in range(len(names)))
            lines.append(n.ljust(width + 4) + cells)
        lines.append(f"accuracy {self.accuracy:.4f} over {self.total} slices")
        if self.empty_rows:
            lines.append("empty rows: " + ", ".join(names[i] for i in self.empty_rows))
        return "\n".join(lines)


def confusion(preds, truths) -> ConfusionMatrix:
    p, t = _labels(preds, "predictions"), _labels(truths, "truths")
    if p.shape != t.shape:
        raise InvalidInputError(f"prediction/truth lengths differ: {p.size} vs {t.size}")
    counts = np.zeros((NUM_PHASES, NUM_PHASES), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    mean_diff: float
    degenerate: Optional[str] = None


def t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t with ``df`` degrees.

    Uses the identity P(|T| >= t) = I_x(df/2, 1/2) with x = df / (df + t^2),
    where I is the regularized incomplete beta function (scipy.special.betainc,
    accurate to near machine precision).
    """
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return float(special.betainc(df / 2.0, 0.5, x))


def paired_ttest(acc_a, acc_b) -> TTestResult:
    """Two-sided paired t-test on per-subject accuracies of two models."""
    a, b = np.asarray(acc_a, dtype=np.float64), np.asarray(acc_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise InvalidInputError("paired t-test needs at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    # differences equal to within rounding count as constant
    if sd <= 1e-12 * max(1.0, float(np.abs(d).max())):
        if np.all(d == 0) or abs(mean) <= 1e-15:
            return TTestResult(0.0, 1.0, df, 0.0, "all differences are zero")
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, mean, "differences have zero variance")
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, t_sf_two_sided(t, df), df, mean)


@dataclass
class EvalReport:
    model: str
    predictions: list
    overall_accuracy: float
    confusion: ConfusionMatrix
    per_subject: dict = field(default_factory=dict)
    per_subject_phase: dict = field(default_factory=dict)
    misclassified: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "overall_accuracy": self.overall_accuracy,
            "confusion": {"counts": self.confusion.counts.tolist(),
                          "normalized": self.confusion.normalized.tolist()},
            "per_subject": self.per_subject,
            "per_subject_phase": self.per_subject_phase,
            "predictions": self.predictions,
            "misclassified": self.misclassified,
            "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["model"], d["predictions"], d["overall_accuracy"],
                   ConfusionMatrix(np.asarray(d["confusion"]["counts"], dtype=np.int64)),
                   d["per_subject"], d["per_subject_phase"], d["misclassified"], d.get("warnings", []))


def build_report(model: str, subjects, slice_indices, truths, preds) -> EvalReport:
    truths = _labels(truths, "truths")
    preds = _labels(preds, "predictions")
    order = sorted(range(len(truths)), key=lambda i: (subjects[i], int(truths[i]), int(slice_indices[i])))
    rows = [{"subject_id": subjects[i], "slice_index": int(slice_indices[i]),
             "true": PhaseLabel(int(truths[i])).wire_name, "predicted": PhaseLabel(int(preds[i])).wire_name}
            for i in order]
    by_subject, by_group = defaultdict(list), defaultdict(list)
    for r in rows:
        hit = r["true"] == r["predicted"]
        by_subject[r["subject_id"]].append(hit)
        by_group[f"{r['subject_id']}/{r['true']}"].append(hit)
    cm = confusion(preds, truths)
    report = EvalReport(
        model=model,
        predictions=rows,
        overall_accuracy=accuracy(preds, truths),
        confusion=cm,
        per_subject={k: float(np.mean(v)) for k, v in sorted(by_subject.items())},
        per_subject_phase={k: float(np.mean(v)) for k, v in sorted(by_group.items())},
        misclassified=[r for r in rows if r["true"] != r["predicted"]],
    )
    assert abs(report.overall_accuracy - cm.accuracy) < 1e-12
    return report


def evaluate_model(bundle, manifest: DatasetManifest, out_dir=None, batch_size: int = 64,
                   max_images: int = 200) -> EvalReport:
    """Classify every slice of ``manifest`` in inference mode and summarize."""
    from .networks import predict_phase

    slices = load_slices(manifest)
    if len(slices) == 0:
        raise InvalidInputError("test manifest holds no slices")
    preds = predict_phase(bundle, slices.pixels, batch_size)
    report = build_report(bundle.kind, slices.subject_ids, slices.slice_indices, slices.labels, preds)
    phases = defaultdict(set)
    for e in manifest.entries:
        phases[e.subject_id].add(int(e.phase))
    unpaired = sorted(s for s, ph in phases.items() if len(ph) != NUM_PHASES)
    if unpaired:
        msg = f"{len(unpaired)} test subject(s) lack some phases: {', '.join(unpaired[:5])}"
        warnings.warn(msg)
        report.warnings.append(msg)
    if out_dir is not None:
        write_report(report, out_dir, slices=slices, preds=preds, max_images=max_images)
    return report


def write_report(report: EvalReport, out_dir, slices=None, preds=None, max_images: int = 200) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    (out_dir / "confusion.txt").write_text(report.confusion.table() + "\n")
    if slices is not None and preds is not None:
        wrong = np.flatnonzero(np.asarray(preds) != slices.labels)[:max_images]
        img_dir = out_dir / "misclassified"
        for i in wrong:
            stem = (f"{slices.subject_ids[i]}_s{int(slices.slice_indices[i]):03d}_"
                    f"true-{PhaseLabel(int(slices.labels[i])).wire_name}_"
                    f"pred-{PhaseLabel(int(preds[i])).wire_name}")
            write_pgm(slices.pixels[i], img_dir / f"{stem}.pgm")
            np.save(img_dir / f"{stem}.npy", slices.pixels[i])
    return out_dir / "report.json"


def read_report(path) -> EvalReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return EvalReport.from_dict(json.loads(path.read_text()))


def compare_reports(report_a: EvalReport, report_b: EvalReport) -> dict:
    """Pair per-subject accuracies of two reports and run the paired t-test."""
    subjects = sorted(report_a.per_subject)
    if subjects != sorted(report_b.per_subject):
        raise InvalidInputError("reports cover different subject sets")
    a = [report_a.per_subject[s] for s in subjects]
    b = [report_b.per_subject[s] for s in subjects]
    res = paired_ttest(a, b)
    return {
        "model_a": report_a.model, "model_b": report_b.model,
        "mean_accuracy_a": float(np.mean(a)), "mean_accuracy_b": float(np.mean(b)),
        "overall_accuracy_a": report_a.overall_accuracy, "overall_accuracy_b": report_b.overall_accuracy,
        "n_subjects": len(subjects), "t": res.t, "p": res.p, "df": res.df, "degenerate": res.degenerate,
    }
