"""Parallel 4-stage residual encoders, one per modality, with a cross-modal
channel attention unit refining the three stage outputs jointly after every
stage. Stage strides are 4/8/16/32, so a 224 input yields 56/28/14/7 maps.
"""

from __future__ import annotations

from dataclasses import dataclass

from torch import Tensor, nn

from .attention import CrossModalChannelAttention
from .data import MODALITIES
from .errors import DataError

Pyramid = dict[str, list[Tensor]]


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple[int, int, int, int] = (256, 512, 1024, 2048)
    block: str = "bottleneck"
    depths: tuple[int, int, int, int] = (3, 4, 6, 3)
    stem_channels: int = 64
    heads: int = 4
    modalities: tuple[str, ...] = MODALITIES
    share_weights: bool = False
    attention: bool = True

    @staticmethod
    def toy(
        widths: tuple[int, int, int, int] = (16, 32, 64, 128),
        heads: int = 4,
        stem_channels: int | None = None,
        **kwargs,
    ) -> "EncoderConfig":
        return EncoderConfig(
            widths=widths,
            block="basic",
            depths=(1, 1, 1, 1),
            stem_channels=stem_channels if stem_channels is not None else widths[0],
            heads=heads,
            **kwargs,
        )

    def validate(self) -> None:
        if len(self.widths) != 4 or len(self.depths) != 4:
            raise DataError("encoder needs exactly 4 stage widths and depths")
        if self.block not in ("basic", "bottleneck"):
            raise DataError(f"unknown block type {self.block!r}")
        if self.block == "bottleneck" and any(w % 4 for w in self.widths):
            raise DataError("bottleneck stage widths must be divisible by 4")
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown or not self.modalities:
            raise DataError(f"modalities must be a non-empty subset of {MODALITIES}")


def _group_norm(channels: int) -> nn.GroupNorm:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return nn.GroupNorm(g, channels)
    raise AssertionError("unreachable")


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = _group_norm(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _group_norm(out_ch)
            )

    def forward(self, x: Tensor) -> Tensor:
        out = self.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.relu(out + skip)


class BottleneckBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        mid = out_ch // 4
        self.conv1 = nn.Conv2d(in_ch, mid, 1, bias=False)
        self.norm1 = _group_norm(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.norm2 = _group_norm(mid)
        self.conv3 = nn.Conv2d(mid, out_ch, 1, bias=False)
        self.norm3 = _group_norm(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _group_norm(out_ch)
            )

    def forward(self, x: Tensor) -> Tensor:
        out = self.relu(self.norm1(self.conv1(x)))
        out = self.relu(self.norm2(self.conv2(out)))
        out = self.norm3(self.conv3(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.relu(out + skip)


def _make_stage(block: str, in_ch: int, out_ch: int, depth: int, stride: int) -> nn.Sequential:
    cls = BasicBlock if block == "basic" else BottleneckBlock
    layers = [cls(in_ch, out_ch, stride)]
    layers += [cls(out_ch, out_ch) for _ in range(depth - 1)]
    return nn.Sequential(*layers)


class _Branch(nn.Module):
    """Stem plus four residual stages for one modality."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, cfg.stem_channels, 7, stride=2, padding=3, bias=False),
            _group_norm(cfg.stem_channels),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        chans = [cfg.stem_channels, *cfg.widths]
        self.stages = nn.ModuleList(
            _make_stage(cfg.block, chans[i], chans[i + 1], cfg.depths[i], 1 if i == 0 else 2)
            for i in range(4)
        )


class TriEncoder(nn.Module):
    """Modality branches + per-stage joint attention refinement.

    ``encode`` requires every configured modality; ``encode_subset`` accepts
    any non-empty subset and restricts the attention graph to those nodes.
    Inputs must be square with side divisible by 32 (default 224).
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        if config.share_weights:
            shared = _Branch(config)
            self.branches = nn.ModuleDict({m: shared for m in config.modalities})
        else:
            self.branches = nn.ModuleDict({m: _Branch(config) for m in config.modalities})
        self.attend = nn.ModuleList(
            CrossModalChannelAttention(w, n_modalities=len(config.modalities), heads=config.heads)
            for w in config.widths
        )

    def _check_inputs(self, inputs: dict[str, Tensor], mods: tuple[str, ...]) -> None:
        for m in mods:
            if m not in inputs:
                raise DataError(f"missing input for modality {m!r}")
            x = inputs[m]
            if x.ndim != 4 or x.shape[1] != 3:
                raise DataError(f"{m}: expected (B, 3, H, W), got {tuple(x.shape)}")
            h, w = x.shape[2:]
            if h != w or h < 32 or h % 32:
                raise DataError(f"{m}: side must be square and a multiple of 32, got {h}x{w}")

    def forward(self, inputs: dict[str, Tensor], modalities: tuple[str, ...] | None = None) -> Pyramid:
        mods = tuple(modalities) if modalities is not None else self.config.modalities
        if not mods:
            raise DataError("at least one modality required")
        bad = [m for m in mods if m not in self.config.modalities]
        if bad:
            raise DataError(f"modalities {bad} not in encoder config {self.config.modalities}")
        self._check_inputs(inputs, mods)
        node_ids = tuple(self.config.modalities.index(m) for m in mods)
        feats = [self.branches[m].stem(inputs[m]) for m in mods]
        pyramid: Pyramid = {m: [] for m in mods}
        for i in range(4):
            feats = [self.branches[m].stages[i](f) for m, f in zip(mods, feats)]
            if self.config.attention:
                feats = self.attend[i](feats, node_ids)
            for m, f in zip(mods, feats):
                pyramid[m].append(f)
        return pyramid

    def encode(self, inputs: dict[str, Tensor]) -> Pyramid:
        return self.forward(inputs, self.config.modalities)

    def encode_subset(self, inputs: dict[str, Tensor]) -> Pyramid:
        mods = tuple(m for m in self.config.modalities if m in inputs)
        return self.forward(inputs, mods)
