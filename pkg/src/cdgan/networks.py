"""Encoder, decoder and multi-domain discriminator of the contrast GAN.

The encoder is a conv/BN/ReLU stack ending in global average pooling; its
output is the representation vector. The decoder broadcasts
``[representation, phase code]`` over the lowest resolution and upsamples back
to image size. The discriminator is a PatchGAN trunk with two extra 3x3
convolutions, a patch realness head and a fully connected phase head.

Training/inference mode is always passed explicitly to the forward helpers.
"""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ct_ingest import NUM_PHASES, PhaseLabel
from .errors import ConfigurationError, FormatError, InvalidInputError

LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.1  # torch convention: running = (1 - m) * running + m * batch, i.e. EMA decay 0.9


@dataclass
class NetConfig:
    image_size: tuple = (64, 64)
    base_width: int = 32
    stages: int = 4
    rep_dim: int = 128
    num_phases: int = NUM_PHASES
    max_width_mult: int = 8
    decoder_skips: bool = False
    encoder_norm: str = "batch"
    decoder_norm: str = "batch"
    disc_norm: str = "none"
    init_std: float = 0.02

    def validate(self):
        h, w = self.image_size
        step = 2 ** self.stages
        if self.stages < 1 or h % step or w % step:
            raise ConfigurationError(f"image size {self.image_size} not divisible by 2**{self.stages}")
        if self.num_phases != NUM_PHASES:
            raise ConfigurationError("num_phases must be 3")
        if self.base_width < 1 or self.rep_dim < 1:
            raise ConfigurationError("base_width and rep_dim must be positive")
        for name in ("encoder_norm", "decoder_norm", "disc_norm"):
            if getattr(self, name) not in ("batch", "instance", "none"):
                raise ConfigurationError(f"{name} must be 'batch', 'instance' or 'none'")
        return self

    @property
    def seed_size(self) -> tuple:
        h, w = self.image_size
        return h // 2 ** self.stages, w // 2 ** self.stages

    def width(self, level: int) -> int:
        return self.base_width * min(2 ** level, self.max_width_mult)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels, momentum=BN_MOMENTUM)
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    return nn.Identity()


class Encoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(1, cfg.width(0), 3, 1, 1),
            norm_layer(cfg.encoder_norm, cfg.width(0)),
            nn.ReLU(),
        )
        self.down = nn.ModuleList()
        for i in range(cfg.stages):
            self.down.append(nn.Sequential(
                nn.Conv2d(cfg.width(i), cfg.width(i + 1), 4, 2, 1),
                norm_layer(cfg.encoder_norm, cfg.width(i + 1)),
                nn.ReLU(),
            ))
        self.to_rep = nn.Sequential(
            nn.Conv2d(cfg.width(cfg.stages), cfg.rep_dim, 3, 1, 1),
            norm_layer(cfg.encoder_norm, cfg.rep_dim),
            nn.ReLU(),
        )

    def forward(self, x):
        h = self.stem(x)
        feats = [h]
        for block in self.down:
            h = block(h)
            feats.append(h)
        rep = self.to_rep(h).mean(dim=(2, 3))
        return rep, feats


class Decoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        skip = cfg.decoder_skips
        top = cfg.width(cfg.stages)
        in_ch = cfg.rep_dim + cfg.num_phases + (top if skip else 0)
        self.seed = nn.Sequential(
            nn.Conv2d(in_ch, top, 3, 1, 1),
            norm_layer(cfg.decoder_norm, top),
            nn.ReLU(),
        )
        self.up = nn.ModuleList()
        for i in range(cfg.stages, 0, -1):
            out = cfg.width(i - 1)
            self.up.append(nn.Sequential(
                nn.ConvTranspose2d(cfg.width(i), out, 4, 2, 1),
                norm_layer(cfg.decoder_norm, out),
                nn.ReLU(),
            ))
        self.fuse = nn.ModuleList(
            nn.Conv2d(2 * cfg.width(i - 1), cfg.width(i - 1), 3, 1, 1)
            for i in range(cfg.stages, 0, -1)
        ) if skip else None
        self.out = nn.Conv2d(cfg.width(0), 1, 3, 1, 1)

    @property
    def input_channels(self) -> int:
        return self.seed[0].in_channels

    def forward(self, rep, code, skips=None):
        sh, sw = self.cfg.seed_size
        z = torch.cat([rep, code], dim=1)[:, :, None, None].expand(-1, -1, sh, sw)
        if self.fuse is not None:
            if skips is None:
                raise InvalidInputError("decoder was built with skips; encoder features required")
            z = torch.cat([z, skips[-1]], dim=1)
        h = self.seed(z)
        for i, block in enumerate(self.up):
            h = block(h)
            if self.fuse is not None:
                h = F.relu(self.fuse[i](torch.cat([h, skips[-2 - i]], dim=1)))
        return torch.tanh(self.out(h))


@dataclass
class DiscriminatorOutput:
    src_logits: Optional[torch.Tensor]
    cls_logits: torch.Tensor

    @property
    def cls_probs(self) -> torch.Tensor:
        return torch.softmax(self.cls_logits, dim=1)


class Discriminator(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        layers, ch = [], 1
        for i in range(cfg.stages):
            out = cfg.width(i)
            layers += [nn.Conv2d(ch, out, 4, 2, 1), norm_layer(cfg.disc_norm, out), nn.LeakyReLU(LEAKY_SLOPE)]
            ch = out
        for _ in range(2):
            layers += [nn.Conv2d(ch, ch, 3, 1, 1), nn.LeakyReLU(LEAKY_SLOPE)]
        self.trunk = nn.Sequential(*layers)
        self.src = nn.Conv2d(ch, 1, 3, 1, 1)
        sh, sw = cfg.seed_size
        self.cls = nn.Linear(ch * sh * sw, cfg.num_phases)

    def forward(self, x):
        h = self.trunk(x)
        return DiscriminatorOutput(self.src(h)[:, 0], self.cls(h.flatten(1)))


@dataclass
class ModelBundle:
    """Named sub-networks plus the configuration that built them.

    ``kind`` is ``"cdgan"`` for the contrast GAN or a baseline kind; ``modules``
    maps ``"G_enc"``, ``"G_dec"``, ``"D"`` (any subset) to torch modules.
    """

    kind: str
    config: object
    modules: dict

    @property
    def has_generator(self) -> bool:
        return ("G_enc" in self.modules and "G_dec" in self.modules) or "G" in self.modules

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for m in self.modules.values() for p in m.parameters())

    def parameters(self, *names):
        names = names or tuple(self.modules)
        for n in names:
            yield from self.modules[n].parameters()

    def named_arrays(self) -> dict:
        out = {}
        for name, mod in self.modules.items():
            for key, t in mod.state_dict().items():
                out[f"{name}.{key}"] = t
        return out

    def to(self, dtype):
        for m in self.modules.values():
            m.to(dtype)
        return self


def build_cdgan(cfg: Optional[NetConfig] = None, seed: int = 0) -> ModelBundle:
    cfg = (cfg or NetConfig()).validate()
    gen = torch.Generator().manual_seed(seed)
    modules = {"G_enc": Encoder(cfg), "G_dec": Decoder(cfg), "D": Discriminator(cfg)}
    for m in modules.values():
        _init_with(m, cfg.init_std, gen)
    return ModelBundle("cdgan", cfg, modules)


def _init_with(module: nn.Module, std: float, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def as_batch(x, image_size=None) -> torch.Tensor:
    """Coerce a slice or batch of slices to an (N, 1, H, W) float tensor."""
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x)
    if not t.is_floating_point():
        t = t.float()
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    if t.ndim != 4 or t.shape[1] != 1:
        raise ConfigurationError(f"expected slices shaped (N, H, W) or (N, 1, H, W), got {tuple(t.shape)}")
    if image_size is not None and tuple(t.shape[-2:]) != tuple(image_size):
        raise ConfigurationError(f"slice size {tuple(t.shape[-2:])} does not match configured {tuple(image_size)}")
    return t


def _dtype_of(module: nn.Module):
    return next(module.parameters()).dtype


def encode(bundle: ModelBundle, x, training: bool = False, return_features: bool = False):
    enc = bundle.modules["G_enc"]
    enc.train(training)
    x = as_batch(x, bundle.config.image_size).to(_dtype_of(enc))
    rep, feats = enc(x)
    return (rep, feats) if return_features else rep


def decode(bundle: ModelBundle, rep, code, training: bool = False, skips=None):
    dec = bundle.modules["G_dec"]
    dec.train(training)
    rep = torch.as_tensor(rep)
    code = torch.as_tensor(code).to(rep.dtype)
    if rep.ndim != 2 or code.ndim != 2 or rep.shape[0] != code.shape[0]:
        raise InvalidInputError(
            f"representation batch {tuple(rep.shape)} and code batch {tuple(code.shape)} disagree")
    return dec(rep, code, skips)[:, 0]


def synthesize(bundle: ModelBundle, x, code, training: bool = False):
    """G(x, c): encode then decode with the target phase code."""
    if bundle.config.decoder_skips:
        rep, feats = encode(bundle, x, training, return_features=True)
        return decode(bundle, rep, code, training, skips=feats)
    return decode(bundle, encode(bundle, x, training), code, training)


def discriminate(bundle: ModelBundle, x, training: bool = False) -> DiscriminatorOutput:
    d = bundle.modules["D"]
    d.train(training)
    size = getattr(bundle.config, "image_size", None)
    return d(as_batch(x, size).to(_dtype_of(d)))


def argmax_phase(probs) -> np.ndarray:
    """Row-wise argmax with ties resolved to the lowest phase index."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    return np.argmax(p, axis=1)


def predict_phase(bundle: ModelBundle, x, batch_size: int = 64) -> np.ndarray:
    x = as_batch(x)
    out = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            out.append(discriminate(bundle, x[i:i + batch_size]).cls_probs.double().numpy())
    return argmax_phase(np.concatenate(out))


def predict_one(bundle: ModelBundle, x) -> PhaseLabel:
    return PhaseLabel(int(predict_phase(bundle, x)[0]))


# --- checkpoint container -------------------------------------------------
#
# A zip archive holding ``meta.json`` (format version, bundle kind, config,
# iteration counter, free-form extras, array index) and one ``arrays/<name>.npy``
# per named array. Arrays are stored little-endian.

CHECKPOINT_FORMAT = 1


def save_checkpoint(path, bundle: ModelBundle, iteration: int = 0, extra_arrays: Optional[dict] = None,
                    extra_meta: Optional[dict] = None) -> Path:
    arrays = {k: v.detach().cpu().numpy() for k, v in bundle.named_arrays().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[k] = v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
    index = []
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            a = arrays[name]
            a = a.astype(a.dtype.newbyteorder("<")) if a.dtype.byteorder == ">" else a
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
            index.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        meta = {
            "format": CHECKPOINT_FORMAT,
            "kind": bundle.kind,
            "config": bundle.config.to_dict(),
            "iteration": int(iteration),
            "arrays": index,
            "extra": extra_meta or {},
        }
        info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, indent=1, sort_keys=True))
    tmp.replace(path)
    return path


def read_checkpoint(path):
    """Return ``(meta, arrays)`` from a checkpoint archive."""
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for item in meta["arrays"]:
                with zf.open(f"arrays/{item['name']}.npy") as fh:
                    arrays[item["name"]] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError) as exc:
        raise FormatError(f"{path}: not a valid checkpoint ({exc})") from exc
    return meta, arrays


def bundle_from_checkpoint(meta: dict, arrays: dict) -> ModelBundle:
    kind = meta["kind"]
    if kind == "cdgan":
        bundle = build_cdgan(NetConfig.from_dict(meta["config"]))
    else:
        from .baselines import BaselineConfig, build_baseline
        bundle = build_baseline(BaselineConfig.from_dict(meta["config"]))
    for name, mod in bundle.modules.items():
        prefix = name + "."
        state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
        mod.load_state_dict(state)
    return bundle


def load_checkpoint(path) -> ModelBundle:
    meta, arrays = read_checkpoint(path)
    return bundle_from_checkpoint(meta, arrays)
