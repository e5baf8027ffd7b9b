"""Comparison classifiers trained under the same harness as the contrast GAN.

Three kinds are available:

``unet_classifier``
    A UNet whose last feature map is globally average pooled into a fully
    connected 3-way head.
``resnet_classifier``
    A bottleneck residual network. The ``full`` preset is ResNet50
    (blocks 3-4-6-3, 7x7 stem, 512x512 input); the ``desk`` preset keeps the
    block family at 17 weight layers (stem, blocks 1-2-2, head) for 64x64
    phantoms and has 213,747 parameters.
``stargan_discriminator``
    The StarGAN PatchGAN discriminator (stride-2 4x4 convolutions with
    LeakyReLU and no normalization, a 3x3 realness head, and a phase head whose
    kernel covers the whole final map). Trained standalone by default; with
    ``full_loop=True`` it is trained together with the StarGAN generator.

All three plug into :func:`cdgan.trainer.train` and share its metrics-log and
checkpoint formats.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from . import objectives as obj
from .ct_ingest import NUM_PHASES
from .errors import ConfigurationError
from .networks import LEAKY_SLOPE, DiscriminatorOutput, ModelBundle, discriminate

KINDS = ("unet_classifier", "resnet_classifier", "stargan_discriminator")
MODEL_ALIASES = {"unet": "unet_classifier", "resnet": "resnet_classifier", "stargan_d": "stargan_discriminator"}
LAMBDA_REC = 10.0


@dataclass
class BaselineConfig:
    kind: str = "resnet_classifier"
    image_size: tuple = (64, 64)
    base_width: int = 16
    # resnet
    blocks: tuple = (1, 2, 2)
    stem: str = "conv3"
    # unet
    depth: int = 3
    # stargan discriminator / generator
    repeat_num: int = 4
    g_width: int = 16
    g_res_blocks: int = 6
    full_loop: bool = False
    num_phases: int = NUM_PHASES

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown baseline kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        h, w = self.image_size
        if self.kind == "stargan_discriminator":
            step = 2 ** self.repeat_num
            if h % step or w % step:
                raise ConfigurationError(f"image size {self.image_size} not divisible by 2**{self.repeat_num}")
        if self.kind == "unet_classifier" and (h % 2 ** self.depth or w % 2 ** self.depth):
            raise ConfigurationError(f"image size {self.image_size} not divisible by 2**{self.depth}")
        if self.stem not in ("conv3", "conv7_pool"):
            raise ConfigurationError("stem must be 'conv3' or 'conv7_pool'")
        return self

    @classmethod
    def preset(cls, kind: str, scale: str = "desk", image_size=None) -> "BaselineConfig":
        kind = MODEL_ALIASES.get(kind, kind)
        if kind not in KINDS:
            raise ConfigurationError(f"unknown baseline kind {kind!r}; valid kinds: {', '.join(KINDS)}")
        if scale == "desk":
            cfg = cls(kind=kind, image_size=(64, 64))
            if kind == "stargan_discriminator":
                cfg.base_width = 32
        elif scale == "full":
            cfg = cls(kind=kind, image_size=(512, 512), base_width=64, blocks=(3, 4, 6, 3),
                      stem="conv7_pool", depth=4, repeat_num=6, g_width=64)
        else:
            raise ConfigurationError("scale must be 'desk' or 'full'")
        if image_size is not None:
            cfg.image_size = tuple(image_size)
            if kind == "stargan_discriminator":
                # keep a 4x4 realness map where possible
                cfg.repeat_num = max(1, min(6, (min(cfg.image_size) // 4).bit_length() - 1))
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        d = dict(d)
        for key in ("image_size", "blocks"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# --- ResNet -------------------------------------------------------------------

class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch, planes, stride=1):
        super().__init__()
        out = planes * self.expansion
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, planes, 1, bias=False), nn.BatchNorm2d(planes), nn.ReLU(),
            nn.Conv2d(planes, planes, 3, stride, 1, bias=False), nn.BatchNorm2d(planes), nn.ReLU(),
            nn.Conv2d(planes, out, 1, bias=False), nn.BatchNorm2d(out),
        )
        self.shortcut = nn.Identity()
        if stride != 1 or in_ch != out:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out, 1, stride, bias=False), nn.BatchNorm2d(out))

    def forward(self, x):
        return torch.relu(self.body(x) + self.shortcut(x))


class ResNetClassifier(nn.Module):
    def __init__(self, cfg: BaselineConfig):
        super().__init__()
        w = cfg.base_width
        if cfg.stem == "conv7_pool":
            self.stem = nn.Sequential(nn.Conv2d(1, w, 7, 2, 3, bias=False), nn.BatchNorm2d(w), nn.ReLU(),
                                      nn.MaxPool2d(3, 2, 1))
        else:
            self.stem = nn.Sequential(nn.Conv2d(1, w, 3, 2, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU())
        layers, in_ch = [], w
        for i, n in enumerate(cfg.blocks):
            planes = w * 2 ** i
            for j in range(n):
                layers.append(Bottleneck(in_ch, planes, stride=2 if (i > 0 and j == 0) else 1))
                in_ch = planes * Bottleneck.expansion
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(in_ch, cfg.num_phases)

    def forward(self, x):
        h = self.layers(self.stem(x))
        return DiscriminatorOutput(None, self.fc(h.mean(dim=(2, 3))))


# --- UNet ---------------------------------------------------------------------

def _double_conv(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, 1, 1, bias=False), nn.BatchNorm2d(out_ch), nn.ReLU(),
        nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False), nn.BatchNorm2d(out_ch), nn.ReLU(),
    )


class UNetClassifier(nn.Module):
    def __init__(self, cfg: BaselineConfig):
        super().__init__()
        w, d = cfg.base_width, cfg.depth
        self.down = nn.ModuleList([_double_conv(1, w)])
        self.down.extend(_double_conv(w * 2 ** i, w * 2 ** (i + 1)) for i in range(d))
        self.up = nn.ModuleList(nn.ConvTranspose2d(w * 2 ** (i + 1), w * 2 ** i, 2, 2) for i in reversed(range(d)))
        self.merge = nn.ModuleList(_double_conv(w * 2 ** (i + 1), w * 2 ** i) for i in reversed(range(d)))
        self.pool = nn.MaxPool2d(2)
        self.fc = nn.Linear(w, cfg.num_phases)

    def forward(self, x):
        skips = []
        h = self.down[0](x)
        for block in self.down[1:]:
            skips.append(h)
            h = block(self.pool(h))
        for up, merge in zip(self.up, self.merge):
            h = merge(torch.cat([up(h), skips.pop()], dim=1))
        return DiscriminatorOutput(None, self.fc(h.mean(dim=(2, 3))))


# --- StarGAN ------------------------------------------------------------------

class StarGANDiscriminator(nn.Module):
    def __init__(self, cfg: BaselineConfig):
        super().__init__()
        layers, ch = [nn.Conv2d(1, cfg.base_width, 4, 2, 1), nn.LeakyReLU(LEAKY_SLOPE)], cfg.base_width
        for _ in range(1, cfg.repeat_num):
            layers += [nn.Conv2d(ch, ch * 2, 4, 2, 1), nn.LeakyReLU(LEAKY_SLOPE)]
            ch *= 2
        self.main = nn.Sequential(*layers)
        h, w = cfg.image_size
        k = (h // 2 ** cfg.repeat_num, w // 2 ** cfg.repeat_num)
        self.src = nn.Conv2d(ch, 1, 3, 1, 1, bias=False)
        self.cls = nn.Conv2d(ch, cfg.num_phases, k, bias=False)

    def forward(self, x):
        h = self.main(x)
        return DiscriminatorOutput(self.src(h)[:, 0], self.cls(h).flatten(1))


class _ResidualIN(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.InstanceNorm2d(ch, affine=True), nn.ReLU(),
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.InstanceNorm2d(ch, affine=True),
        )

    def forward(self, x):
        return x + self.main(x)


class StarGANGenerator(nn.Module):
    """Two stride-2 convolutions, residual blocks, two transposed convolutions, instance norm."""

    def __init__(self, cfg: BaselineConfig):
        super().__init__()
        w, c = cfg.g_width, cfg.num_phases
        layers = [nn.Conv2d(1 + c, w, 7, 1, 3, bias=False), nn.InstanceNorm2d(w, affine=True), nn.ReLU()]
        for _ in range(2):
            layers += [nn.Conv2d(w, w * 2, 4, 2, 1, bias=False), nn.InstanceNorm2d(w * 2, affine=True), nn.ReLU()]
            w *= 2
        layers += [_ResidualIN(w) for _ in range(cfg.g_res_blocks)]
        for _ in range(2):
            layers += [nn.ConvTranspose2d(w, w // 2, 4, 2, 1, bias=False),
                       nn.InstanceNorm2d(w // 2, affine=True), nn.ReLU()]
            w //= 2
        layers += [nn.Conv2d(w, 1, 7, 1, 3, bias=False), nn.Tanh()]
        self.main = nn.Sequential(*layers)

    def forward(self, x, code):
        c = code[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        return self.main(torch.cat([x, c], dim=1))


_BUILDERS = {
    "unet_classifier": UNetClassifier,
    "resnet_classifier": ResNetClassifier,
    "stargan_discriminator": StarGANDiscriminator,
}


def build_baseline(config: BaselineConfig, seed: int = 0) -> ModelBundle:
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        modules = {"D": _BUILDERS[config.kind](config)}
        if config.kind == "stargan_discriminator" and config.full_loop:
            modules["G"] = StarGANGenerator(config)
    return ModelBundle(config.kind, config, modules)


def baseline_optimizers(bundle: ModelBundle, config) -> dict:
    from .trainer import _adam
    return {name: _adam(mod.parameters(), config) for name, mod in bundle.modules.items()}


def baseline_step(state, batch, config):
    """One classifier update (or one StarGAN D+G update when a generator is present)."""
    from .trainer import _batch_accuracy, _check_loss, lr_at
    bundle = state.bundle
    lr = lr_at(state.iteration, config)
    for opt in state.optimizers.values():
        for group in opt.param_groups:
            group["lr"] = lr
    if "G" in bundle.modules:
        return _stargan_step(state, batch, config, lr)
    x = batch.x.to(next(bundle.modules["D"].parameters()).dtype)
    out = discriminate(bundle, x, training=True)
    loss = obj.cls_loss_from_logits(out.cls_logits, batch.labels)
    _check_loss(loss, "classification loss")
    state.optimizers["D"].zero_grad(set_to_none=True)
    loss.backward()
    state.optimizers["D"].step()
    v = float(loss.detach())
    values = obj.LossValues(cls_real=v, d_total=v)
    return values, {"acc_real": _batch_accuracy(out.cls_logits, batch.labels), "acc_fake": None, "lr": lr}


def _stargan_step(state, batch, config, lr):
    from .trainer import _batch_accuracy, _check_loss, _set_requires_grad
    bundle, weights = state.bundle, config.weights
    g_net, d_net = bundle.modules["G"], bundle.modules["D"]
    g_net.train(True)
    x = batch.x
    src_x = x[batch.gen_source]
    codes = batch.target_codes.to(x.dtype)
    orig_codes = torch.eye(NUM_PHASES, dtype=x.dtype)[batch.labels[batch.gen_source]]

    for _ in range(config.d_steps):
        with torch.no_grad():
            fake = g_net(src_x, codes)
        ro, fo = discriminate(bundle, x, training=True), discriminate(bundle, fake, training=True)
        lv = obj.LossValues(
            adv_d=obj.adv_loss_d(ro.src_logits, fo.src_logits),
            cls_real=obj.cls_loss_from_logits(ro.cls_logits, batch.labels),
        )
        d_total = lv.adv_d + weights.lambda_cls * lv.cls_real
        _check_loss(d_total, "discriminator objective")
        state.optimizers["D"].zero_grad(set_to_none=True)
        d_total.backward()
        state.optimizers["D"].step()

    _set_requires_grad(d_net, False)
    try:
        fake = g_net(src_x, codes)
        fo = discriminate(bundle, fake, training=True)
        lv.adv_g = obj.adv_loss_g(fo.src_logits, saturating=config.g_adv_saturating)
        lv.cls_fake = obj.cls_loss_from_logits(fo.cls_logits, batch.target_labels)
        rec = (g_net(fake, orig_codes) - src_x).abs().mean()
        g_total = obj.g_objective(lv, weights) + LAMBDA_REC * rec
        _check_loss(g_total, "generator objective")
        state.optimizers["G"].zero_grad(set_to_none=True)
        g_total.backward()
        state.optimizers["G"].step()
    finally:
        _set_requires_grad(d_net, True)
    lv.d_total, lv.g_total = d_total, g_total
    values = obj.LossValues(**{k: float(v.detach()) if torch.is_tensor(v) else float(v)
                                 for k, v in lv.as_dict().items()})
    return values, {"acc_real": _batch_accuracy(ro.cls_logits, batch.labels),
                    "acc_fake": _batch_accuracy(fo.cls_logits, batch.target_labels), "lr": lr}


def train_classifier(baseline_config: BaselineConfig, train_config, train_manifest, out_dir,
                     eval_manifest=None, resume: Optional[str] = None):
    """Train a baseline with cross-entropy on real slices through the shared loop."""
    from .trainer import train
    return train(train_config, train_manifest, out_dir, eval_manifest=eval_manifest,
                 model=baseline_config.kind, baseline_config=baseline_config, resume=resume)
