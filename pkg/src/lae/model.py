"""Autoencoder with a partitioned latent space and CAM-based attention maps.

The encoder ends in global average pooling followed by a single affine
layer, so every latent unit has per-channel weights that double as CAM
weights. The latent vector is split into a "true" half and a "fake" half;
classification compares the mean absolute activation of the two halves,
and the fake half's activation-weighted CAMs form the forgery attention
map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    image_size: int = 256
    in_channels: int = 3
    channels: tuple[int, ...] = (64, 128, 256, 512)  # stride-2 conv widths
    extra_conv: bool = True      # trailing stride-1 conv at full depth
    d_z: int = 128
    disc_base: int = 64
    comparator: str = "desk"     # "desk" (fixed random stack) or "vgg16"
    comparator_weights: str | None = None

    def __post_init__(self):
        if self.d_z % 2 != 0:
            raise ValueError(f"d_z must be even, got {self.d_z}")
        stride = 2 ** len(self.channels)
        if self.image_size % stride != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by {stride}")

    @property
    def d_l(self) -> int:
        return self.channels[-1]

    @property
    def feature_size(self) -> int:
        return self.image_size // 2 ** len(self.channels)


def desk_config(image_size: int = 64, channels: tuple[int, ...] = (64, 128, 256, 512),
                d_z: int = 128, disc_base: int = 64) -> ModelConfig:
    return ModelConfig(image_size=image_size, channels=channels, d_z=d_z,
                       disc_base=disc_base, comparator="desk")


@dataclass
class EncoderOutput:
    z: torch.Tensor              # (B, d_z)
    feature_stack: torch.Tensor  # (B, d_l, h, w) last-conv activations
    gap_vector: torch.Tensor     # (B, d_l) spatial means


@dataclass
class LatentPartition:
    d_z: int
    true_idx: torch.Tensor = field(init=False)
    fake_idx: torch.Tensor = field(init=False)

    def __post_init__(self):
        if self.d_z % 2 != 0:
            raise ValueError("latent dimension must be even")
        half = self.d_z // 2
        self.true_idx = torch.arange(0, half)
        self.fake_idx = torch.arange(half, self.d_z)


def class_activations(z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean absolute activation of the true and fake latent halves.

    a_T = (2/d_z) * sum_{c in T} |z_c| and likewise a_F over the fake half.
    """
    d_z = z.shape[-1]
    half = d_z // 2
    a_t = 2.0 / d_z * z[..., :half].abs().sum(dim=-1)
    a_f = 2.0 / d_z * z[..., half:].abs().sum(dim=-1)
    return a_t, a_f


def predict_from_activations(a_t: torch.Tensor, a_f: torch.Tensor) -> torch.Tensor:
    """1 (true) iff a_T > a_F, else 0 (fake); ties are conservatively fake."""
    return (a_t > a_f).long()


class Encoder(nn.Module):

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        blocks: list[nn.Module] = []
        cin = cfg.in_channels
        for i, c in enumerate(cfg.channels):
            blocks.append(nn.Conv2d(cin, c, 4, stride=2, padding=1))
            if i > 0:  # first block carries no norm
                blocks.append(nn.BatchNorm2d(c))
            blocks.append(nn.ReLU(inplace=True))
            cin = c
        if cfg.extra_conv:
            blocks.append(nn.Conv2d(cin, cin, 3, stride=1, padding=1))
            blocks.append(nn.ReLU(inplace=True))
        self.features = nn.Sequential(*blocks)
        self.latent = nn.Linear(cfg.d_l, cfg.d_z)
        self.cfg = cfg

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, H, W) input, "
                             f"got {tuple(x.shape)}")
        stride = 2 ** len(self.cfg.channels)
        if x.shape[-1] % stride or x.shape[-2] % stride:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible "
                             f"by {stride}")
        feats = self.features(x)
        gap = feats.mean(dim=(2, 3))
        z = self.latent(gap)
        return EncoderOutput(z=z, feature_stack=feats, gap_vector=gap)


class Decoder(nn.Module):
    """Mirrored decoder: project to a small grid, then 2x upsample + conv."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        start = 4 if cfg.image_size >= 16 else 2
        n_up = int(math.log2(cfg.image_size // start))
        c0 = max(cfg.d_l // 2, 8)
        self.project = nn.Sequential(
            nn.ConvTranspose2d(cfg.d_z, c0, kernel_size=start),
            nn.BatchNorm2d(c0),
            nn.ReLU(inplace=True),
        )
        ups: list[nn.Module] = []
        cin = c0
        for i in range(n_up - 1):
            cout = max(c0 // 2 ** (i + 1), 8)
            ups += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(cin, cout, 3, padding=1),
                    nn.BatchNorm2d(cout),
                    nn.ReLU(inplace=True)]
            cin = cout
        ups += [nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(cin, cfg.in_channels, 3, padding=1),
                nn.Tanh()]
        self.ups = nn.Sequential(*ups)
        self.cfg = cfg

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.cfg.d_z:
            raise ValueError(f"expected (B, {self.cfg.d_z}) latent, got {tuple(z.shape)}")
        return self.ups(self.project(z[:, :, None, None]))


class Discriminator(nn.Module):
    """DCGAN-style realness discriminator with a terminal sigmoid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers: list[nn.Module] = []
        size = cfg.image_size
        cin = cfg.in_channels
        c = cfg.disc_base
        first = True
        while size > 4:
            layers.append(nn.Conv2d(cin, c, 4, stride=2, padding=1))
            if not first:
                layers.append(nn.BatchNorm2d(c))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            cin, c = c, min(c * 2, cfg.disc_base * 8)
            size //= 2
            first = False
        layers.append(nn.Conv2d(cin, 1, size, stride=1, padding=0))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x)).reshape(x.shape[0])


def _vgg16_prefix() -> nn.Sequential:
    # 3x3 conv stack through the tenth conv layer (pools after blocks 1-3)
    plan = [(3, 64), (64, 64), "M", (64, 128), (128, 128), "M",
            (128, 256), (256, 256), (256, 256), "M",
            (256, 512), (512, 512), (512, 512)]
    layers: list[nn.Module] = []
    for item in plan:
        if item == "M":
            layers.append(nn.MaxPool2d(2))
        else:
            cin, cout = item
            layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class Comparator(nn.Module):
    """Frozen feature extractor for the perceptual reconstruction term.

    "desk": a small fixed random conv stack (output 128 channels, stride 8).
    "vgg16": the classic 13-layer conv prefix cut after the tenth conv
    (output 512 channels, stride 8); random weights unless a state-dict
    file is supplied.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.comparator == "vgg16":
            self.net = _vgg16_prefix()
        elif cfg.comparator == "desk":
            self.net = nn.Sequential(
                nn.Conv2d(cfg.in_channels, 32, 3, stride=2, padding=1), nn.ReLU(inplace=True),
                nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(inplace=True),
                nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.ReLU(inplace=True),
                nn.Conv2d(128, 128, 3, stride=1, padding=1), nn.ReLU(inplace=True),
            )
        else:
            raise ValueError(f"unknown comparator kind {cfg.comparator!r}")
        if cfg.comparator_weights:
            state = torch.load(cfg.comparator_weights, map_location="cpu",
                               weights_only=True)
            self.net.load_state_dict(state)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def cam_unit_map(feature_stack: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Per-unit CAM: channel-weighted sum of last-conv activations.

    feature_stack is (B, d_l, h, w); weights is the unit's (d_l,) row of the
    latent affine layer. Returns (B, h, w).
    """
    return torch.einsum("k,bkhw->bhw", weights, feature_stack)


def upsample_bilinear(maps: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear upsampling of (B, h, w) maps to (B, size, size)."""
    return F.interpolate(maps[:, None], size=(size, size), mode="bilinear",
                         align_corners=False)[:, 0]


def minmax_normalize(maps: torch.Tensor) -> torch.Tensor:
    """Per-image min-max rescale to [0, 1]; constant maps become all zeros."""
    flat = maps.reshape(maps.shape[0], -1)
    lo = flat.min(dim=1).values[:, None, None]
    hi = flat.max(dim=1).values[:, None, None]
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    out = (maps - lo) / safe
    return torch.where(span.expand_as(maps) > 0, out, torch.zeros_like(maps))


@dataclass
class AttentionMap:
    values: torch.Tensor  # (B, H, W) in [0, 1]
    raw: torch.Tensor     # (B, h, w) pre-upsample


class LAEModel(nn.Module):
    """Encoder + decoder + discriminator + frozen comparator, with the
    latent partition decision rule and attention-map machinery."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.discriminator = Discriminator(cfg)
        self.comparator = Comparator(cfg)
        self.partition = LatentPartition(cfg.d_z)

    def encode(self, x: torch.Tensor) -> EncoderOutput:
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def discriminate(self, x: torch.Tensor) -> torch.Tensor:
        return self.discriminator(x)

    def comparator_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.comparator(x)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Per-image label: 1 (true) iff a_T > a_F, else 0 (fake; ties fake)."""
        a_t, a_f = class_activations(self.encode(x).z)
        return predict_from_activations(a_t, a_f)

    def attention_raw(self, enc: EncoderOutput) -> torch.Tensor:
        """Fake-half CAM mixture at feature resolution: sum_F |z_c| * M_c."""
        w = self.encoder.latent.weight  # (d_z, d_l)
        fake = self.partition.fake_idx.to(enc.z.device)
        w_f = w[fake]                            # (d_F, d_l)
        z_f = enc.z[:, fake].abs()               # (B, d_F)
        return torch.einsum("bc,ck,bkhw->bhw", z_f, w_f, enc.feature_stack)

    def attention_map(self, x: torch.Tensor) -> AttentionMap:
        enc = self.encode(x)
        raw = self.attention_raw(enc)
        up = upsample_bilinear(raw, x.shape[-1])
        return AttentionMap(values=minmax_normalize(up), raw=raw)


def tiny_config(image_size: int = 8, channels: tuple[int, ...] = (4, 6),
                d_z: int = 4) -> ModelConfig:
    """Minimal configuration used by gradient-check tests."""
    return ModelConfig(image_size=image_size, channels=channels,
                       extra_conv=False, d_z=d_z, disc_base=4, comparator="desk")
