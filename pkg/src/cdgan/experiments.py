"""Desk-scale phantom experiments comparing the contrast GAN with the baselines.

A :class:`Regime` fixes how the phantom data are generated and how much of it
the models see in training. :func:`run_experiment` trains every requested
model for every seed on one shared dataset, evaluates each on the paired test
subjects and returns a :class:`ComparisonResult` whose ``table()`` is a
model-by-model summary with mean accuracies and per-phase recalls.

>>> from cdgan.experiments import EASY, run_experiment       # doctest: +SKIP
>>> res = run_experiment(EASY, ["cdgan", "resnet"], [0], "runs/easy")   # doctest: +SKIP
>>> print(res.table())                                        # doctest: +SKIP
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .ct_ingest import DatasetManifest, PhaseLabel, load_slices, phase_code, read_manifest, write_manifest
from .evaluate import EvalReport, compare_reports, evaluate_model, read_report
from .networks import argmax_phase, discriminate, synthesize
from .phantom import PhantomSpec, generate_dataset
from .trainer import TrainConfig, train


@dataclass(frozen=True)
class Regime:
    name: str
    enhancement_overlap: float = 0.0
    label_noise: float = 0.0
    # 36 subjects: 30 unpaired training volumes (10 per phase), 6 paired test subjects
    subjects_per_phase: int = 12
    split_fraction: float = 5 / 6
    slices_per_volume: int = 20
    # training slices kept per volume (centered); None keeps all
    train_slices_per_volume: Optional[int] = None
    iterations: int = 2000
    image_size: tuple = (64, 64)
    phantom_seed: int = 0

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(image_size=self.image_size, slices_per_volume=self.slices_per_volume,
                           enhancement_overlap=self.enhancement_overlap, label_noise=self.label_noise,
                           seed=self.phantom_seed)


EASY = Regime("easy")
# 10 train volumes per phase x 4 slices = 40 training slices per phase
HARD = Regime("hard", enhancement_overlap=0.6, label_noise=0.05, train_slices_per_volume=4)
DEGENERATE = Regime("degenerate", enhancement_overlap=1.0, iterations=500)


def restrict_slices(manifest: DatasetManifest, per_volume: int, slices_per_volume: int) -> DatasetManifest:
    """Keep ``per_volume`` central slices of every volume in ``manifest``."""
    start = (slices_per_volume - per_volume) // 2
    entries = [dataclasses.replace(e, slice_range=(start, start + per_volume - 1)) for e in manifest.entries]
    return DatasetManifest(entries, manifest.split, manifest.root)


def prepare_data(regime: Regime, root) -> tuple:
    """Generate (or reuse) the regime's phantoms under ``root``; returns (train, test) manifests."""
    root = Path(root)
    data = root / "data"
    if not (data / "test.jsonl").exists():
        generate_dataset(regime.phantom_spec(), regime.subjects_per_phase, regime.split_fraction, data)
    train_m, test_m = read_manifest(data / "train.jsonl"), read_manifest(data / "test.jsonl")
    if regime.train_slices_per_volume is not None:
        train_m = restrict_slices(train_m, regime.train_slices_per_volume, regime.slices_per_volume)
        write_manifest(train_m, data / "train_restricted.jsonl")
    return train_m, test_m


@dataclass
class RunOutcome:
    model: str
    seed: int
    report: EvalReport
    checkpoint: Path
    # wall-clock seconds of training plus evaluation, as first measured
    seconds: float
    bundle: object = field(default=None, repr=False)
    reused: bool = False


def run_model(model: str, regime: Regime, train_m, test_m, out_dir, seed: int = 0,
              iterations: Optional[int] = None, reuse: bool = True) -> RunOutcome:
    """Train one model with one seed and evaluate it; a finished run is reused when ``reuse``."""
    out_dir = Path(out_dir)
    iters = iterations or regime.iterations
    cfg = TrainConfig(iterations=iters, seed=seed, checkpoint_interval=iters)
    final = out_dir / "checkpoints" / f"iter_{iters:07d}.ckpt"
    t0 = time.time()
    timing = out_dir / "timing.json"
    if reuse and final.exists() and (out_dir / "eval" / "report.json").exists() and timing.exists():
        from .networks import load_checkpoint
        bundle = load_checkpoint(final)
        report = read_report(out_dir / "eval")
        seconds = json.loads(timing.read_text())["seconds"]
        return RunOutcome(model, seed, report, final, seconds, bundle, reused=True)
    result = train(cfg, train_m, out_dir, model=model)
    report = evaluate_model(result.state.bundle, test_m, out_dir=out_dir / "eval")
    seconds = time.time() - t0
    timing.write_text(json.dumps({"seconds": seconds}) + "\n")
    return RunOutcome(model, seed, report, result.final_checkpoint, seconds, result.state.bundle)


@dataclass
class ComparisonResult:
    regime: Regime
    runs: list

    def by_model(self) -> dict:
        out = {}
        for r in self.runs:
            out.setdefault(r.model, []).append(r)
        return out

    @property
    def seconds(self) -> float:
        return float(sum(r.seconds for r in self.runs))

    def mean_accuracy(self, model: str) -> float:
        return float(np.mean([r.report.overall_accuracy for r in self.by_model()[model]]))

    def pooled_report(self, model: str) -> EvalReport:
        """Per-subject accuracies averaged over seeds, for paired testing across models."""
        runs = self.by_model()[model]
        base = runs[0].report
        subjects = sorted(base.per_subject)
        per_subject = {s: float(np.mean([r.report.per_subject[s] for r in runs])) for s in subjects}
        counts = sum(r.report.confusion.counts for r in runs)
        from .evaluate import ConfusionMatrix
        return EvalReport(model, [], self.mean_accuracy(model), ConfusionMatrix(counts), per_subject)

    def compare(self, model_a: str, model_b: str) -> dict:
        return compare_reports(self.pooled_report(model_a), self.pooled_report(model_b))

    def table(self) -> str:
        names = [p.wire_name for p in PhaseLabel]
        head = f"{'model':<24}{'seeds':>6}{'mean acc':>10}{'sd':>8}" + "".join(f"{n:>16}" for n in names)
        lines = [f"regime: {self.regime.name}", head]
        for model, runs in self.by_model().items():
            accs = [r.report.overall_accuracy for r in runs]
            counts = sum(r.report.confusion.counts for r in runs)
            rows = counts.sum(axis=1)
            recall = np.divide(np.diag(counts), rows, out=np.zeros(3), where=rows > 0)
            sd = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
            lines.append(f"{model:<24}{len(runs):>6}{np.mean(accs):>10.4f}{sd:>8.4f}"
                         + "".join(f"{v:>16.3f}" for v in recall))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "regime": dataclasses.asdict(self.regime),
            "runs": [{"model": r.model, "seed": r.seed, "accuracy": r.report.overall_accuracy,
                      "confusion": r.report.confusion.counts.tolist(), "checkpoint": str(r.checkpoint),
                      "seconds": r.seconds, "reused": r.reused} for r in self.runs],
        }


def run_experiment(regime: Regime, models, seeds, root, iterations: Optional[int] = None,
                   reuse: bool = True) -> ComparisonResult:
    root = Path(root)
    train_m, test_m = prepare_data(regime, root)
    runs = [run_model(m, regime, train_m, test_m, root / f"{m}_seed{s}", seed=s,
                      iterations=iterations, reuse=reuse)
            for m in models for s in seeds]
    res = ComparisonResult(regime, runs)
    (root / "summary.json").write_text(json.dumps(res.to_dict(), indent=1) + "\n")
    (root / "table.txt").write_text(res.table() + "\n")
    return res


def conditioning_check(bundle, manifest: DatasetManifest, batch_size: int = 64) -> dict:
    """How strongly the generator's output follows its phase code.

    Every held-out slice is re-rendered in all three phases. Returns the
    discriminator's accuracy at labeling ``G(x, c)`` as ``c`` and the mean
    absolute pixel difference between renderings with different codes.
    """
    slices = load_slices(manifest)
    hits, n, diffs = 0, 0, []
    with torch.no_grad():
        for i in range(0, len(slices), batch_size):
            x = torch.from_numpy(slices.pixels[i:i + batch_size])
            outs = []
            for k in range(3):
                y = synthesize(bundle, x, phase_code([k] * x.shape[0]))
                pred = argmax_phase(discriminate(bundle, y[:, None]).cls_probs.double().numpy())
                hits += int(np.sum(pred == k))
                n += x.shape[0]
                outs.append(y)
            for a in range(3):
                for b in range(a + 1, 3):
                    diffs.append((outs[a] - outs[b]).abs().mean(dim=(1, 2)))
    return {"code_accuracy": hits / n, "mean_abs_diff": float(torch.cat(diffs).mean())}
