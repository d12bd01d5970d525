"""Deformation encoder, marked-to-unmarked generator and patch discriminators."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .errors import ShapeError


@dataclass
class DeformationNetSpec:
    """Conv encoder (4 stride-2 kernel-4 stages) followed by 3 fully connected layers.

    ``fc_hidden`` holds the two hidden widths; the last layer always emits 2N values.
    """

    conv_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    fc_hidden: list[int] = field(default_factory=lambda: [512, 256])
    input_resolution: tuple[int, int] = (128, 128)

    def __post_init__(self):
        self.conv_channels = [int(c) for c in self.conv_channels]
        self.fc_hidden = [int(c) for c in self.fc_hidden]
        self.input_resolution = tuple(int(v) for v in self.input_resolution)
        if len(self.conv_channels) != 4:
            raise ShapeError(f"need exactly 4 conv stages, got {len(self.conv_channels)}")
        if len(self.fc_hidden) != 2:
            raise ShapeError(f"need exactly 2 hidden FC widths (3 FC layers), got {len(self.fc_hidden)}")
        h, w = self.input_resolution
        if h % 16 or w % 16:
            raise ShapeError(f"input resolution must be divisible by 16, got {self.input_resolution}")


@dataclass
class GanNetSpec:
    ngf: int = 64
    n_res_blocks: int = 6
    ndf: int = 64


class DeformationNet(nn.Module):
    """Regresses per-landmark offsets from an unmarked image.

    The final linear layer starts at zero, so an untrained network predicts the
    undeformed template.
    """

    def __init__(self, n_landmarks: int, spec: DeformationNetSpec | None = None):
        super().__init__()
        spec = spec or DeformationNetSpec()
        self.spec = spec
        self.n_landmarks = n_landmarks
        layers, c_in = [], 3
        for c_out in spec.conv_channels:
            layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            c_in = c_out
        self.encoder = nn.Sequential(*layers)
        h, w = spec.input_resolution
        flat = c_in * (h // 16) * (w // 16)
        f1, f2 = spec.fc_hidden
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, f1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(f1, f2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(f2, 2 * n_landmarks),
        )
        init_weights(self)
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = self.spec.input_resolution
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, h, w):
            raise ShapeError(f"deformation net expects (B, 3, {h}, {w}), got {tuple(x.shape)}")
        return self.head(self.encoder(x)).view(-1, self.n_landmarks, 2)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """Residual encoder-decoder: 7x7 stem, two stride-2 downsamplings, residual
    blocks, two transposed-conv upsamplings, 7x7 head with tanh."""

    def __init__(self, ngf: int = 64, n_blocks: int = 6):
        super().__init__()
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, ngf, 7),
            nn.InstanceNorm2d(ngf),
            nn.ReLU(inplace=True),
        ]
        c = ngf
        for _ in range(2):
            layers += [nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * c), nn.ReLU(inplace=True)]
            c *= 2
        layers += [ResidualBlock(c) for _ in range(n_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(c // 2),
                nn.ReLU(inplace=True),
            ]
            c //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(c, 3, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"generator expects (B, 3, H, W) with H, W divisible by 4, got {tuple(x.shape)}")
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """Patch classifier: kernel-4 convs with strides 2, 2, 2, 1 and a 1-channel
    stride-1 head. Emits raw scores; the loss applies the targets."""

    def __init__(self, ndf: int = 64):
        super().__init__()
        layers = [nn.Conv2d(3, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        c = ndf
        for stride in (2, 2, 1):
            layers += [
                nn.Conv2d(c, 2 * c, 4, stride=stride, padding=1),
                nn.InstanceNorm2d(2 * c),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            c *= 2
        layers.append(nn.Conv2d(c, 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"discriminator expects (B, 3, H, W), got {tuple(x.shape)}")
        if min(x.shape[2:]) < 24:
            raise ShapeError(f"discriminator needs at least 24x24 input, got {tuple(x.shape[2:])}")
        return self.model(x)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def score_map_size(size: int) -> int:
    """Spatial extent of the discriminator output for an input of ``size`` pixels."""
    for stride in (2, 2, 2, 1, 1):
        size = (size + 2 - 4) // stride + 1
    return size


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def spec_dict(deform: DeformationNetSpec, gan: GanNetSpec) -> dict:
    d = asdict(deform)
    d["input_resolution"] = list(d["input_resolution"])
    return {"deformation": d, "gan": asdict(gan)}
