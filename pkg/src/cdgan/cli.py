"""Command-line entry point: ``cdgan <command> [flags]``.

Commands::

    gen-phantoms  --config SPEC.json --out DIR
    train         --config CFG.json --train-manifest M [--eval-manifest M] --model KIND --out DIR
    eval          --checkpoint C --test-manifest M --out DIR
    compare       REPORT_A REPORT_B [--out DIR]
    synthesize    --checkpoint C --input SLICE --target-phase PHASE|all --out DIR

Every command writes ``run_record.json`` next to its outputs. Flags override
config-file values, which override built-in defaults; the record stores the
resolved values. When ``--out`` is omitted, outputs go under
``$CDGAN_OUTPUT_ROOT/<command>`` (default root ``cdgan_runs``).

Exit codes: 0 success, 2 usage or validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .baselines import MODEL_ALIASES, BaselineConfig
from .ct_ingest import PhaseLabel, phase_code, read_manifest, read_volume, window_and_scale, write_pgm
from .errors import CDGANError, NumericError
from .evaluate import compare_reports, evaluate_model, read_report
from .networks import NetConfig, load_checkpoint, synthesize
from .phantom import PhantomSpec, generate_dataset
from .trainer import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
MODELS = ("cdgan",) + tuple(MODEL_ALIASES)
OUTPUT_ROOT_ENV = "CDGAN_OUTPUT_ROOT"
RUN_RECORD = "run_record.json"

log = logging.getLogger("cdgan")


class UsageError(CDGANError):
    pass


def _load_json(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return d


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "cdgan_runs")) / args.command


def _write_record(out: Path, args, config: dict, seed, artifacts: dict, t0: float) -> Path:
    record = {
        "command": args.command,
        "argv": list(args.argv),
        "config": config,
        "seed": seed,
        "artifacts": {k: [str(p) for p in v] if isinstance(v, list) else str(v) for k, v in artifacts.items()},
        "wall_clock_s": round(time.time() - t0, 3),
        "version": __version__,
    }
    out.mkdir(parents=True, exist_ok=True)
    path = out / RUN_RECORD
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return path


def _require(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


# --- commands ----------------------------------------------------------------

def cmd_gen_phantoms(args) -> int:
    t0 = time.time()
    raw = _load_json(args.config)
    subjects = int(raw.pop("subjects_per_phase", 10))
    split = float(raw.pop("split_fraction", 0.8))
    masks = bool(raw.pop("masks", False))
    spec = PhantomSpec.from_dict(raw)
    if args.seed is not None:
        spec.seed = args.seed
    out = _out_dir(args)
    train_m, test_m = generate_dataset(spec, subjects, split, out, masks=masks)
    config = {"spec": spec.to_dict(), "subjects_per_phase": subjects, "split_fraction": split, "masks": masks}
    _write_record(out, args, config, spec.seed,
                  {"train_manifest": out / "train.jsonl", "test_manifest": out / "test.jsonl"}, t0)
    print(f"wrote {len(train_m)} train and {len(test_m)} test volumes to {out}")
    return EXIT_OK


def _train_configs(args):
    raw = _load_json(args.config)
    net = raw.pop("net", None)
    base = raw.pop("baseline", None)
    cfg = TrainConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    cfg.validate()
    return cfg, net, base


def cmd_train(args) -> int:
    t0 = time.time()
    cfg, net, base = _train_configs(args)
    train_m = read_manifest(_require(args.train_manifest, "train-manifest"))
    eval_m = read_manifest(_require(args.eval_manifest, "eval-manifest")) if args.eval_manifest else None
    out = _out_dir(args)
    model = args.model
    net_cfg = base_cfg = None
    if model == "cdgan":
        net_cfg = NetConfig.from_dict(net) if net is not None else None
    else:
        preset = BaselineConfig.preset(model, image_size=_image_size(train_m)).to_dict()
        preset.update(base or {})
        base_cfg = BaselineConfig.from_dict(preset)
    resume = _require(args.resume, "resume") if args.resume else None
    try:
        result = train(cfg, train_m, out, eval_manifest=eval_m, model=model if model == "cdgan" else base_cfg.kind,
                       net_config=net_cfg, baseline_config=base_cfg, resume=resume)
    except NumericError as exc:
        _write_record(out, args, {"train": cfg.to_dict()}, cfg.seed,
                      {"diagnostic": exc.snapshot_path or out}, t0)
        print(f"numeric failure: {exc}; diagnostic batch at {exc.snapshot_path}", file=sys.stderr)
        return EXIT_NUMERIC
    model_cfg = result.state.bundle.config.to_dict()
    config = {"train": cfg.to_dict(), "model": model, "model_config": model_cfg,
              "train_manifest": str(args.train_manifest), "eval_manifest": args.eval_manifest,
              "resume": str(resume) if resume else None}
    _write_record(out, args, config, cfg.seed,
                  {"checkpoints": result.checkpoints, "metrics": result.metrics_path}, t0)
    print(f"trained {model} to iteration {result.state.iteration}; checkpoint {result.final_checkpoint}")
    return EXIT_OK


def _image_size(manifest):
    first = read_volume(manifest.resolve(manifest.entries[0]))
    return tuple(first.voxels.shape[1:])


def cmd_eval(args) -> int:
    t0 = time.time()
    bundle = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    manifest = read_manifest(_require(args.test_manifest, "test-manifest"))
    out = _out_dir(args)
    report = evaluate_model(bundle, manifest, out_dir=out)
    _write_record(out, args, {"checkpoint": str(args.checkpoint), "test_manifest": str(args.test_manifest)}, None,
                  {"report": out / "report.json", "confusion": out / "confusion.txt"}, t0)
    print(report.confusion.table())
    return EXIT_OK


def cmd_compare(args) -> int:
    t0 = time.time()
    a = read_report(_require(args.report_a, "report_a"))
    b = read_report(_require(args.report_b, "report_b"))
    summary = compare_reports(a, b)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _write_record(out, args, {"report_a": str(args.report_a), "report_b": str(args.report_b)}, None,
                  {"summary": out / "compare.json"}, t0)
    flag = f" (degenerate: {summary['degenerate']})" if summary["degenerate"] else ""
    print(f"{summary['model_a']}: mean per-subject accuracy {summary['mean_accuracy_a']:.4f}")
    print(f"{summary['model_b']}: mean per-subject accuracy {summary['mean_accuracy_b']:.4f}")
    print(f"paired t-test over {summary['n_subjects']} subjects: t = {summary['t']:.6g}, "
          f"p = {summary['p']:.6g}{flag}")
    return EXIT_OK


def _read_input_slice(path: Path, slice_index):
    if path.suffix == ".npy":
        x = np.load(path)
        if x.ndim == 3:
            x = x[slice_index or 0]
        return np.asarray(x, dtype=np.float32)
    vol = read_volume(path)
    idx = vol.voxels.shape[0] // 2 if slice_index is None else slice_index
    if not 0 <= idx < vol.voxels.shape[0]:
        raise UsageError(f"--slice-index {idx} outside 0..{vol.voxels.shape[0] - 1}")
    return window_and_scale(vol.voxels[idx])


def cmd_synthesize(args) -> int:
    t0 = time.time()
    bundle = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    if bundle.kind != "cdgan" or not bundle.has_generator:
        raise UsageError("no generator in checkpoint")
    x = _read_input_slice(_require(args.input, "input"), args.slice_index)
    phases = list(PhaseLabel) if args.target_phase == "all" else [PhaseLabel.from_wire(args.target_phase)]
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    written = []
    with torch.no_grad():
        y = synthesize(bundle, np.repeat(x[None], len(phases), axis=0), phase_code([int(p) for p in phases]))
    for p, img in zip(phases, y.double().numpy()):
        base = out / f"{stem}_to_{p.wire_name}"
        written.append(write_pgm(img, base.with_suffix(".pgm")))
        np.save(base.with_suffix(".npy"), img.astype(np.float32))
        written.append(base.with_suffix(".npy"))
    _write_record(out, args, {"checkpoint": str(args.checkpoint), "input": str(args.input),
                              "slice_index": args.slice_index, "target_phase": args.target_phase}, None,
                  {"images": written}, t0)
    print(f"wrote {len(phases)} synthetic slice(s) to {out}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdgan", description="Contrast-phase CT classification with a contrast GAN.")
    p.add_argument("--version", action="version", version=f"cdgan {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
        return sp

    g = common(sub.add_parser("gen-phantoms", help="generate a phantom dataset"))
    g.add_argument("--config", help="phantom spec JSON (may include subjects_per_phase, split_fraction, masks)")
    g.add_argument("--seed", type=int)

    t = common(sub.add_parser("train", help="train the contrast GAN or a baseline"))
    t.add_argument("--config", help="training config JSON (optional 'net' and 'baseline' sections)")
    t.add_argument("--model", default="cdgan", choices=MODELS)
    t.add_argument("--train-manifest")
    t.add_argument("--eval-manifest")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")

    e = common(sub.add_parser("eval", help="evaluate a checkpoint on a test manifest"))
    e.add_argument("--checkpoint")
    e.add_argument("--test-manifest")

    c = common(sub.add_parser("compare", help="paired t-test between two evaluation reports"))
    c.add_argument("report_a")
    c.add_argument("report_b")

    s = common(sub.add_parser("synthesize", help="re-render a slice in a target phase"))
    s.add_argument("--checkpoint")
    s.add_argument("--input", help="volume header (.json) or slice array (.npy)")
    s.add_argument("--slice-index", type=int)
    s.add_argument("--target-phase", default="all",
                   choices=[ph.wire_name for ph in PhaseLabel] + ["all"])
    return p


COMMANDS = {
    "gen-phantoms": cmd_gen_phantoms,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "synthesize": cmd_synthesize,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CDGANError, ValueError, KeyError, IndexError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
