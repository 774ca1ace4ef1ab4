"""Masked-reconstruction pretraining: structured patch masking, a light
skip-connected decoder per modality (bilinear upsampling + depthwise
separable convolutions), pixel reconstruction heads, and the masked MSE
objective that only scores masked pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
from torch import Tensor, nn

from .data import MODALITIES
from .encoder import EncoderConfig, Pyramid, TriEncoder
from .errors import DataError

DEFAULT_PATCH = 32


def make_mask(
    image_size: int, patch_size: int, ratio: float, rng: np.random.Generator
) -> np.ndarray:
    """Full-resolution binary mask (1 = kept, 0 = masked) over a patch grid.

    Exactly round(ratio * n_patches) patches are zeroed, chosen uniformly.
    """
    if image_size % patch_size:
        raise DataError(f"image size {image_size} not divisible by patch size {patch_size}")
    if not 0.0 <= ratio <= 1.0:
        raise DataError(f"masking ratio must be in [0, 1], got {ratio}")
    grid = image_size // patch_size
    n_patches = grid * grid
    n_masked = int(round(ratio * n_patches))
    flat = np.ones(n_patches, dtype=np.float32)
    flat[rng.permutation(n_patches)[:n_masked]] = 0.0
    return np.kron(flat.reshape(grid, grid), np.ones((patch_size, patch_size), dtype=np.float32))


def apply_mask(image: Tensor, mask: Tensor) -> Tensor:
    """Zero masked pixels; the mask broadcasts over leading/channel dims."""
    if image.shape[-2:] != mask.shape[-2:]:
        raise DataError(
            f"mask {tuple(mask.shape)} does not match image {tuple(image.shape)}"
        )
    return image * mask


@dataclass(frozen=True)
class DecoderConfig:
    width: int = 256
    patch_size: int = DEFAULT_PATCH
    mask_ratio: float = 0.7


class _UpBlock(nn.Module):
    """Bilinear x2 upsample followed by a depthwise separable convolution."""

    def __init__(self, width: int):
        super().__init__()
        self.depthwise = nn.Conv2d(width, width, 3, padding=1, groups=width)
        self.pointwise = nn.Conv2d(width, width, 1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: Tensor) -> Tensor:
        x = nn.functional.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.relu(self.pointwise(self.depthwise(x)))


class SkipDecoder(nn.Module):
    """Four decoder blocks consuming the encoder stages deepest-first.

    Block i adds the projected stage-i skip to the running state (zero before
    the first block), then upsamples x2, so a 224 input ends at 112.
    """

    def __init__(self, encoder_widths: tuple[int, int, int, int], width: int):
        super().__init__()
        self.proj = nn.ModuleList(nn.Conv2d(c, width, 1) for c in encoder_widths)
        self.blocks = nn.ModuleList(_UpBlock(width) for _ in range(4))

    def forward(self, stages: list[Tensor]) -> Tensor:
        if len(stages) != 4:
            raise DataError(f"expected 4 stage maps, got {len(stages)}")
        state: Tensor | None = None
        for i in (3, 2, 1, 0):
            skip = self.proj[i](stages[i])
            if state is not None:
                if state.shape[-2:] != skip.shape[-2:]:
                    raise DataError(
                        f"stage {i + 1} skip {tuple(skip.shape[-2:])} does not match "
                        f"decoder state {tuple(state.shape[-2:])}"
                    )
                skip = skip + state
            state = self.blocks[i](skip)
        return state


class ReconstructionHead(nn.Module):
    """Final x2 upsample plus a pointwise projection back to 3 channels."""

    def __init__(self, width: int):
        super().__init__()
        self.out = nn.Conv2d(width, 3, 1)

    def forward(self, x: Tensor) -> Tensor:
        x = nn.functional.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.out(x)


def masked_mse(
    preds: Mapping[str, Tensor], targets: Mapping[str, Tensor], masks: Mapping[str, Tensor]
) -> Tensor:
    """Mean squared error per masked pixel, over batch and modalities.

    Unmasked pixels contribute exactly zero to both the loss and its
    gradient. Rejects an all-kept mask set (nothing to reconstruct).
    """
    total_sq = None
    total_n = 0.0
    for mod, pred in preds.items():
        target, mask = targets[mod], masks[mod]
        if pred.shape != target.shape:
            raise DataError(f"{mod}: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
        hole = (1.0 - mask).expand_as(pred)
        sq = ((pred - target) ** 2 * hole).sum()
        total_sq = sq if total_sq is None else total_sq + sq
        total_n += float(hole.sum())
    if total_sq is None or total_n == 0:
        raise DataError("masked loss undefined: no masked pixels (is the ratio 0?)")
    return total_sq / total_n


class MaskedPretrainModel(nn.Module):
    """Encoder plus per-modality skip decoders and reconstruction heads."""

    def __init__(self, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig):
        super().__init__()
        self.encoder = TriEncoder(encoder_cfg)
        self.decoder_cfg = decoder_cfg
        mods = encoder_cfg.modalities
        self.decoders = nn.ModuleDict(
            {m: SkipDecoder(encoder_cfg.widths, decoder_cfg.width) for m in mods}
        )
        self.heads = nn.ModuleDict({m: ReconstructionHead(decoder_cfg.width) for m in mods})

    def decode(self, pyramid: Pyramid) -> dict[str, Tensor]:
        return {m: self.decoders[m](stages) for m, stages in pyramid.items()}

    def reconstruct(self, decoded: dict[str, Tensor]) -> dict[str, Tensor]:
        return {m: self.heads[m](d) for m, d in decoded.items()}

    def forward(self, masked_inputs: dict[str, Tensor]) -> dict[str, Tensor]:
        return self.reconstruct(self.decode(self.encoder.encode(masked_inputs)))


def mask_batch(
    images: dict[str, Tensor],
    patch_size: int,
    ratio: float,
    seed: int,
    epoch: int,
    sample_indices: list[int],
) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    """Independent per-modality, per-sample masks; returns (masked, masks).

    Each mask is drawn from a generator keyed on (seed, epoch, dataset index,
    modality), so the same sample re-draws the same mask regardless of batch
    composition and resumed runs replay the original masking.
    """
    from .data import STREAM_MASK, rng_for

    masked, masks = {}, {}
    for mod, x in images.items():
        mod_idx = MODALITIES.index(mod)
        per_sample = [
            torch.from_numpy(
                make_mask(x.shape[-1], patch_size, ratio, rng_for(seed, STREAM_MASK, epoch, si, mod_idx))
            )
            for si in sample_indices
        ]
        mask = torch.stack(per_sample)[:, None, :, :].to(x.dtype)
        masks[mod] = mask
        masked[mod] = apply_mask(x, mask)
    return masked, masks
