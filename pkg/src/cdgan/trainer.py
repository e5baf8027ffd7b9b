"""Alternating discriminator/generator training with checkpoint and resume.

One call to :func:`train_step` performs ``k`` discriminator updates followed by
one generator update. Synthetic images are detached for the discriminator
update. Generator and discriminator own separate Adam optimizers. The learning
rate follows a multiplicative step schedule.

Everything that influences the metrics log (network init, batch order, target
codes, optimizer moments) is derived from ``TrainConfig.seed`` and saved in
checkpoints, so a resumed run reproduces the uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import objectives as obj
from .ct_ingest import DatasetManifest, SliceSet, load_slices, phase_code
from .errors import ConfigurationError, NumericError
from .networks import (
    ModelBundle,
    NetConfig,
    build_cdgan,
    bundle_from_checkpoint,
    decode,
    discriminate,
    encode,
    read_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

TARGET_MODES = ("enumerate", "sample")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 8
    d_steps: int = 1
    iterations: int = 2000
    lr_decay: float = 0.1
    lr_decay_period: int = 100_000
    lambda_cls: float = 1.0
    lambda_synth_d: float = 1.0
    g_adv_saturating: bool = False
    seed: int = 0
    checkpoint_interval: int = 500
    target_codes: str = "enumerate"
    deterministic: bool = True
    eval_batch_size: int = 64

    def validate(self):
        if self.d_steps < 1:
            raise ConfigurationError("d_steps must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be at least 1")
        if not self.lr >= 0:
            raise ConfigurationError("lr must be non-negative")
        if self.lr_decay_period < 1 or not self.lr_decay > 0:
            raise ConfigurationError("lr_decay must be positive and lr_decay_period at least 1")
        if self.checkpoint_interval < 1:
            raise ConfigurationError("checkpoint_interval must be at least 1")
        if self.target_codes not in TARGET_MODES:
            raise ConfigurationError(f"target_codes must be one of {TARGET_MODES}")
        obj.LossWeights(self.lambda_cls, self.lambda_synth_d)
        return self

    @property
    def weights(self) -> obj.LossWeights:
        return obj.LossWeights(self.lambda_cls, self.lambda_synth_d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def lr_at(iteration: int, config: TrainConfig) -> float:
    if iteration < 0:
        raise ConfigurationError("iteration must be non-negative")
    return config.lr * config.lr_decay ** (iteration // config.lr_decay_period)


class EpochSampler:
    """Draws batches from shuffled permutations; a short tail is dropped."""

    def __init__(self, n: int, seed: int):
        if n < 1:
            raise ConfigurationError("cannot sample batches from an empty slice set")
        self.n = n
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 1])))
        self.perm = self.rng.permutation(n)
        self.pos = 0

    def next_indices(self, batch_size: int) -> np.ndarray:
        if self.pos + batch_size > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        take = min(batch_size, self.n)
        idx = self.perm[self.pos:self.pos + take]
        self.pos += take
        return idx

    def get_state(self) -> dict:
        return {"bit_generator": self.rng.bit_generator.state, "pos": self.pos, "n": self.n}

    def set_state(self, state: dict, perm: np.ndarray) -> None:
        self.rng.bit_generator.state = state["bit_generator"]
        self.pos = int(state["pos"])
        self.perm = np.asarray(perm, dtype=np.int64)


@dataclass
class Batch:
    x: torch.Tensor
    labels: torch.Tensor
    gen_source: torch.Tensor
    target_codes: torch.Tensor
    indices: np.ndarray

    @property
    def target_labels(self) -> torch.Tensor:
        return self.target_codes.argmax(dim=1)


def make_batch(slices: SliceSet, sampler: EpochSampler, config: TrainConfig) -> Batch:
    """Next real batch plus generator targets.

    In ``enumerate`` mode every slice is paired with all three phase codes
    (the generator batch is three times the real batch, slice-major); in
    ``sample`` mode each slice gets one uniformly drawn code.
    """
    if len(slices) == 0:
        raise ConfigurationError("training manifest holds no slices")
    idx = sampler.next_indices(config.batch_size)
    x = torch.from_numpy(slices.pixels[idx])[:, None]
    labels = torch.from_numpy(slices.labels[idx])
    b = len(idx)
    if config.target_codes == "enumerate":
        source = np.repeat(np.arange(b), 3)
        targets = np.tile(np.arange(3), b)
    else:
        source = np.arange(b)
        targets = sampler.rng.integers(0, 3, size=b)
    return Batch(x, labels, torch.from_numpy(source), torch.from_numpy(phase_code(targets)), idx)


@dataclass
class TrainState:
    bundle: ModelBundle
    optimizers: dict
    sampler: EpochSampler
    iteration: int = 0


def _adam(params, config: TrainConfig):
    return torch.optim.Adam(list(params), lr=config.lr, betas=(config.beta1, config.beta2))


def init_state(bundle: ModelBundle, n_slices: int, config: TrainConfig) -> TrainState:
    if bundle.kind == "cdgan":
        opts = {"G": _adam(bundle.parameters("G_enc", "G_dec"), config),
                "D": _adam(bundle.parameters("D"), config)}
    else:
        from .baselines import baseline_optimizers
        opts = baseline_optimizers(bundle, config)
    return TrainState(bundle, opts, EpochSampler(n_slices, config.seed))


def generate(bundle: ModelBundle, x, source, codes, training: bool):
    """Synthetic slices G(x[source], codes) as an (M, 1, H, W) tensor."""
    if bundle.config.decoder_skips:
        rep, feats = encode(bundle, x, training, return_features=True)
        feats = [f[source] for f in feats]
    else:
        rep, feats = encode(bundle, x, training), None
    return decode(bundle, rep[source], codes, training, skips=feats)[:, None]


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _batch_accuracy(logits, labels) -> float:
    return float((logits.detach().argmax(dim=1) == labels).double().mean())


def discriminator_losses(bundle: ModelBundle, x, labels, fake, target_labels, config: TrainConfig):
    """D-side loss terms for real slices ``x`` and fixed synthetic slices ``fake``.

    Returns ``(LossValues, d_total, real_cls_logits)``; tensors keep their graph.
    """
    if bundle.config.disc_norm != "batch":
        out = discriminate(bundle, torch.cat([x, fake]), training=True)
        n = x.shape[0]
        real_src, fake_src = out.src_logits[:n], out.src_logits[n:]
        real_cls, fake_cls = out.cls_logits[:n], out.cls_logits[n:]
    else:
        ro, fo = discriminate(bundle, x, training=True), discriminate(bundle, fake, training=True)
        real_src, fake_src, real_cls, fake_cls = ro.src_logits, fo.src_logits, ro.cls_logits, fo.cls_logits
    lv = obj.LossValues(
        adv_d=obj.adv_loss_d(real_src, fake_src),
        cls_real=obj.cls_loss_from_logits(real_cls, labels),
        cls_fake_d=obj.cls_loss_from_logits(fake_cls, target_labels),
    )
    lv.d_total = obj.d_objective(lv, config.weights)
    return lv, lv.d_total, real_cls


def generator_losses(bundle: ModelBundle, x, source, codes, config: TrainConfig):
    """G-side loss terms; returns ``(adv_g, cls_fake, g_total, fake_cls_logits)``."""
    fake = generate(bundle, x, source, codes, training=True)
    fo = discriminate(bundle, fake, training=True)
    adv_g = obj.adv_loss_g(fo.src_logits, saturating=config.g_adv_saturating)
    cls_fake = obj.cls_loss_from_logits(fo.cls_logits, codes.argmax(dim=1))
    g_total = obj.g_objective(obj.LossValues(adv_g=adv_g, cls_fake=cls_fake), config.weights)
    return adv_g, cls_fake, g_total, fo.cls_logits


def cdgan_step(state: TrainState, batch: Batch, config: TrainConfig):
    bundle = state.bundle
    d_net = bundle.modules["D"]
    lr = lr_at(state.iteration, config)
    for opt in state.optimizers.values():
        for group in opt.param_groups:
            group["lr"] = lr
    dtype = next(d_net.parameters()).dtype
    x = batch.x.to(dtype)
    codes = batch.target_codes.to(dtype)

    for _ in range(config.d_steps):
        with torch.no_grad():
            fake = generate(bundle, x, batch.gen_source, codes, training=True)
        lv, d_total, real_cls = discriminator_losses(bundle, x, batch.labels, fake, batch.target_labels, config)
        _check_loss(d_total, "discriminator objective")
        state.optimizers["D"].zero_grad(set_to_none=True)
        d_total.backward()
        state.optimizers["D"].step()
    acc_real = _batch_accuracy(real_cls, batch.labels)

    _set_requires_grad(d_net, False)
    try:
        lv.adv_g, lv.cls_fake, g_total, fake_cls = generator_losses(bundle, x, batch.gen_source, codes, config)
        _check_loss(g_total, "generator objective")
        state.optimizers["G"].zero_grad(set_to_none=True)
        g_total.backward()
        state.optimizers["G"].step()
    finally:
        _set_requires_grad(d_net, True)
    acc_fake = _batch_accuracy(fake_cls, batch.target_labels)

    lv.g_total = g_total
    values = obj.LossValues(**{k: float(v.detach()) if torch.is_tensor(v) else float(v)
                                 for k, v in lv.as_dict().items()})
    return values, {"acc_real": acc_real, "acc_fake": acc_fake, "lr": lr}


def _check_loss(value, what):
    if not bool(torch.isfinite(value.detach())):
        raise NumericError(f"non-finite {what}")


def train_step(state: TrainState, batch: Batch, config: TrainConfig):
    """Advance ``state`` by one iteration in place; returns ``(state, LossValues, extras)``."""
    if state.bundle.kind == "cdgan":
        values, extras = cdgan_step(state, batch, config)
    else:
        from .baselines import baseline_step
        values, extras = baseline_step(state, batch, config)
    state.iteration += 1
    return state, values, extras


# --- persistence -------------------------------------------------------------

def _optimizer_arrays(opts: dict):
    arrays, meta = {}, {}
    for name, opt in opts.items():
        sd = opt.state_dict()
        meta[name] = {"param_groups": sd["param_groups"], "state_keys": {}}
        for pid, st in sd["state"].items():
            meta[name]["state_keys"][str(pid)] = sorted(st)
            for key, val in st.items():
                arrays[f"opt.{name}.{pid}.{key}"] = val if torch.is_tensor(val) else torch.tensor(val)
    return arrays, meta


def _load_optimizers(opts: dict, meta: dict, arrays: dict):
    for name, opt in opts.items():
        m = meta[name]
        state = {}
        for pid, keys in m["state_keys"].items():
            state[int(pid)] = {k: torch.from_numpy(arrays[f"opt.{name}.{pid}.{k}"].copy()) for k in keys}
        opt.load_state_dict({"state": state, "param_groups": m["param_groups"]})


def save_state(path, state: TrainState, config: TrainConfig, extra_meta: Optional[dict] = None) -> Path:
    arrays, opt_meta = _optimizer_arrays(state.optimizers)
    arrays["sampler.perm"] = torch.from_numpy(np.asarray(state.sampler.perm, dtype=np.int64))
    meta = {
        "train_config": config.to_dict(),
        "optimizers": opt_meta,
        "sampler": state.sampler.get_state(),
    }
    meta.update(extra_meta or {})
    return save_checkpoint(path, state.bundle, state.iteration, arrays, meta)


def load_state(path, config: Optional[TrainConfig] = None):
    """Rebuild a :class:`TrainState` from a checkpoint; returns ``(state, config, meta)``."""
    meta, arrays = read_checkpoint(path)
    if "train_config" not in meta["extra"]:
        raise ConfigurationError(f"{path} holds no training state")
    extra = meta["extra"]
    config = config or TrainConfig.from_dict(extra["train_config"])
    bundle = bundle_from_checkpoint(meta, arrays)
    state = init_state(bundle, int(extra["sampler"]["n"]), config)
    _load_optimizers(state.optimizers, extra["optimizers"], arrays)
    state.sampler.set_state(extra["sampler"], arrays["sampler.perm"])
    state.iteration = int(meta["iteration"])
    return state, config, meta


def assert_finite_parameters(bundle: ModelBundle) -> None:
    for name, t in bundle.named_arrays().items():
        if t.is_floating_point() and not bool(torch.isfinite(t).all()):
            raise NumericError(f"parameter {name} became non-finite")


# --- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoints: list
    metrics_path: Path
    state: TrainState = field(repr=False)

    @property
    def final_checkpoint(self) -> Path:
        return self.checkpoints[-1]


def checkpoint_path(out_dir, iteration: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"iter_{iteration:07d}.ckpt"


def _truncate_metrics(path: Path, iteration: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines()
            if line.strip() and json.loads(line)["iteration"] <= iteration]
    path.write_text("".join(line + "\n" for line in keep))


def _snapshot_batch(out_dir: Path, batch: Batch, iteration: int) -> Path:
    path = out_dir / f"nonfinite_batch_iter{iteration:07d}.npz"
    np.savez(path, x=batch.x.numpy(), labels=batch.labels.numpy(),
             target_codes=batch.target_codes.numpy(), indices=batch.indices)
    return path


def build_model(model: str, image_size, net_config=None, baseline_config=None, seed: int = 0) -> ModelBundle:
    if model == "cdgan":
        cfg = net_config or NetConfig(image_size=tuple(image_size))
        return build_cdgan(cfg, seed=seed)
    from .baselines import BaselineConfig, build_baseline
    cfg = baseline_config or BaselineConfig.preset(model, image_size=tuple(image_size))
    return build_baseline(cfg, seed=seed)


def train(config: TrainConfig, train_manifest: DatasetManifest, out_dir, eval_manifest=None,
          model: str = "cdgan", net_config=None, baseline_config=None, resume=None) -> TrainResult:
    """Run (or resume) training and write checkpoints plus ``metrics.jsonl`` under ``out_dir``."""
    config.validate()
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"

    slices = load_slices(train_manifest)
    if len(slices) == 0:
        raise ConfigurationError("training manifest holds no slices")
    eval_slices = load_slices(eval_manifest) if eval_manifest is not None else None

    if resume is not None:
        state, _, _ = load_state(resume, config)
        if state.sampler.n != len(slices):
            raise ConfigurationError("resume checkpoint was trained on a different slice set")
        _truncate_metrics(metrics_path, state.iteration)
    else:
        bundle = build_model(model, slices.pixels.shape[1:], net_config, baseline_config, config.seed)
        state = init_state(bundle, len(slices), config)
        if metrics_path.exists():
            metrics_path.unlink()

    kind = state.bundle.kind
    checkpoints = []
    t0 = time.time()
    with open(metrics_path, "a") as mlog:
        while state.iteration < config.iterations:
            batch = make_batch(slices, state.sampler, config)
            try:
                _, values, extras = train_step(state, batch, config)
            except NumericError as exc:
                snap = _snapshot_batch(out_dir, batch, state.iteration + 1)
                raise NumericError(f"{exc} at iteration {state.iteration + 1}", snap) from exc
            rec = {"type": "step", "model": kind, "iteration": state.iteration}
            rec.update(values.as_dict())
            rec.update(extras)
            mlog.write(json.dumps(rec) + "\n")
            it = state.iteration
            if it % config.checkpoint_interval == 0 or it == config.iterations:
                mlog.flush()
                assert_finite_parameters(state.bundle)
                if eval_slices is not None:
                    mlog.write(json.dumps(_eval_record(state.bundle, eval_slices, it, config)) + "\n")
                    mlog.flush()
                path = save_state(checkpoint_path(out_dir, it), state, config, {"model": kind})
                checkpoints.append(path)
                log.info("iteration %d (%.1fs): checkpoint %s", it, time.time() - t0, path)
    if not checkpoints:
        checkpoints.append(save_state(checkpoint_path(out_dir, state.iteration), state, config, {"model": kind}))
    return TrainResult(checkpoints, metrics_path, state)


def _eval_record(bundle, eval_slices: SliceSet, iteration: int, config: TrainConfig) -> dict:
    from .evaluate import accuracy, confusion
    from .networks import predict_phase
    preds = predict_phase(bundle, eval_slices.pixels, config.eval_batch_size)
    cm = confusion(preds, eval_slices.labels)
    return {"type": "eval", "model": bundle.kind, "iteration": iteration,
            "accuracy": accuracy(preds, eval_slices.labels), "confusion": cm.counts.tolist()}
