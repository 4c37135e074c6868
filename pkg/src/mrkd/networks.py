"""Teacher encoder, one-class bottleneck, reversed student decoder and the
per-level generation modules."""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch
from torch import Tensor, nn
from torchvision import models

# name -> (torchvision constructor, block kind, channels of blocks 1..3, depths of blocks 1..3)
ARCHITECTURES = {
    "resnet18": ("resnet18", "basic", (64, 128, 256), (2, 2, 2)),
    "resnet50": ("resnet50", "bottleneck", (256, 512, 1024), (3, 4, 6)),
    "wide_resnet50": ("wide_resnet50_2", "bottleneck", (256, 512, 1024), (3, 4, 6)),
}

_IMAGENET_WEIGHTS = {
    "resnet18": "ResNet18_Weights",
    "resnet50": "ResNet50_Weights",
    "wide_resnet50": "Wide_ResNet50_2_Weights",
}


class ShapeError(ValueError):
    pass


def _conv_bn(cin: int, cout: int, stride: int = 1, k: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
    )


class ResidualBlock(nn.Module):
    """Basic (two 3x3) or bottleneck (1x1-3x3-1x1) residual block.

    ``upsample=True`` doubles the spatial size with a 2x2 transposed
    convolution in both branches, as in the reversed decoder.
    """

    def __init__(self, cin: int, cout: int, kind: str, upsample: bool = False, mid_ratio: int = 4) -> None:
        super().__init__()
        if kind == "basic":
            mid = cout
            first = (nn.ConvTranspose2d(cin, mid, 2, stride=2, bias=False) if upsample
                     else nn.Conv2d(cin, mid, 3, padding=1, bias=False))
            self.body = nn.Sequential(
                first, nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
                nn.Conv2d(mid, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout),
            )
        else:
            mid = cout // mid_ratio
            self.body = nn.Sequential(
                nn.Conv2d(cin, mid, 1, bias=False), nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
                (nn.ConvTranspose2d(mid, mid, 2, stride=2, bias=False) if upsample
                 else nn.Conv2d(mid, mid, 3, padding=1, bias=False)),
                nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
                nn.Conv2d(mid, cout, 1, bias=False), nn.BatchNorm2d(cout),
            )
        if upsample:
            self.shortcut = nn.Sequential(nn.ConvTranspose2d(cin, cout, 2, stride=2, bias=False), nn.BatchNorm2d(cout))
        elif cin != cout:
            self.shortcut = _conv_bn(cin, cout, k=1)
        else:
            self.shortcut = nn.Identity()
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.body(x) + self.shortcut(x))


class Teacher(nn.Module):
    """Frozen ResNet-family encoder tapped after blocks 1..3."""

    def __init__(self, backbone: str = "wide_resnet50", weights: str = "imagenet", seed: int = 0) -> None:
        super().__init__()
        if backbone not in ARCHITECTURES:
            raise ValueError(f"unknown backbone {backbone!r}")
        ctor_name, _, self.channels, _ = ARCHITECTURES[backbone]
        ctor = getattr(models, ctor_name)
        if weights == "imagenet":
            try:
                net = ctor(weights=getattr(models, _IMAGENET_WEIGHTS[backbone]).IMAGENET1K_V1)
            except Exception as exc:  # download or cache failure
                raise RuntimeError(
                    f"cannot load ImageNet weights for {backbone} ({exc}); "
                    "set teacher_weights to a local state-dict file or 'random'"
                ) from exc
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                net = ctor(weights=None)
            if weights != "random":
                state = torch.load(Path(weights), map_location="cpu", weights_only=True)
                net.load_state_dict(state, strict=False)
        self.backbone = backbone
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.blocks = nn.ModuleList([net.layer1, net.layer2, net.layer3])
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "Teacher":
        # always evaluation mode: batch-norm statistics stay frozen
        return super().train(False)

    @torch.no_grad()
    def forward(self, x: Tensor) -> list[Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"teacher expects [B, 3, H, W], got {tuple(x.shape)}")
        if x.shape[-1] % 16 or x.shape[-2] % 16:
            raise ShapeError(f"image side must be a multiple of 16, got {tuple(x.shape[-2:])}")
        x = self.stem(x)
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


class Bottleneck(nn.Module):
    """One-class embedding: fuse the three levels at the coarsest scale."""

    def __init__(self, backbone: str = "wide_resnet50", channels: tuple[int, int, int] | None = None,
                 kind: str | None = None) -> None:
        super().__init__()
        _, arch_kind, arch_channels, _ = ARCHITECTURES[backbone]
        c1, c2, c3 = channels or arch_channels
        kind = kind or arch_kind
        relu = lambda: nn.ReLU(inplace=True)  # noqa: E731
        self.down1 = nn.Sequential(_conv_bn(c1, c2, 2), relu(), _conv_bn(c2, c3, 2), relu())
        self.down2 = nn.Sequential(_conv_bn(c2, c3, 2), relu())
        self.fuse = ResidualBlock(3 * c3, c3, kind)
        self.out_channels = c3

    def forward(self, pyramid: list[Tensor]) -> Tensor:
        f1, f2, f3 = pyramid
        x = torch.cat([self.down1(f1), self.down2(f2), f3], dim=1)
        return self.fuse(x)


class StudentDecoder(nn.Module):
    """Mirror of the teacher run coarse to fine; returns levels fine-first."""

    def __init__(self, backbone: str = "wide_resnet50", channels: tuple[int, int, int] | None = None,
                 depths: tuple[int, int, int] | None = None, kind: str | None = None) -> None:
        super().__init__()
        _, arch_kind, arch_channels, arch_depths = ARCHITECTURES[backbone]
        c1, c2, c3 = channels or arch_channels
        d1, d2, d3 = depths or arch_depths
        kind = kind or arch_kind
        self.stage3 = nn.Sequential(*[ResidualBlock(c3, c3, kind) for _ in range(d3)])
        self.stage2 = nn.Sequential(ResidualBlock(c3, c2, kind, upsample=True),
                                    *[ResidualBlock(c2, c2, kind) for _ in range(d2 - 1)])
        self.stage1 = nn.Sequential(ResidualBlock(c2, c1, kind, upsample=True),
                                    *[ResidualBlock(c1, c1, kind) for _ in range(d1 - 1)])

    def forward(self, embedding: Tensor) -> list[Tensor]:
        f3 = self.stage3(embedding)
        f2 = self.stage2(f3)
        f1 = self.stage1(f2)
        return [f1, f2, f3]


class GenerationLevel(nn.Module):
    """3x3 conv -> ReLU -> 3x3 conv, channel preserving."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.ReLU()
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(self.act(self.conv1(x)))


class MRKDModel(nn.Module):
    def __init__(self, backbone: str = "wide_resnet50", teacher_weights: str = "imagenet", seed: int = 0) -> None:
        super().__init__()
        self.teacher = Teacher(backbone, teacher_weights, seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.bottleneck = Bottleneck(backbone)
            self.student = StudentDecoder(backbone)
            self.generators = nn.ModuleList([GenerationLevel(c) for c in self.teacher.channels])

    def trainable_modules(self) -> dict[str, nn.Module]:
        return {"bottleneck": self.bottleneck, "student": self.student, "generators": self.generators}

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for m in self.trainable_modules().values() for p in m.parameters()]

    def trainable_state(self) -> dict[str, Tensor]:
        return {
            f"{prefix}.{k}": v.detach().clone()
            for prefix, m in self.trainable_modules().items()
            for k, v in m.state_dict().items()
        }

    def load_trainable_state(self, state: dict[str, Tensor]) -> None:
        for prefix, m in self.trainable_modules().items():
            sub = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}
            m.load_state_dict(sub, strict=True)

    def decode(self, pyramid: list[Tensor]) -> list[Tensor]:
        return self.student(self.bottleneck(pyramid))
