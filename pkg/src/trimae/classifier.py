"""Stage-2 head: per-modality global average pooling, concatenation fusion
in fixed fundus/oct/vf order, and a two-layer ReLU classifier over the four
ordinal stages.
"""

from __future__ import annotations

from typing import Mapping

import torch
from torch import Tensor, nn

from .encoder import EncoderConfig, TriEncoder
from .errors import DataError

N_CLASSES = 4
HIDDEN_WIDTH = 512
LOG_FLOOR = 1e-12


def fuse(stage4: Mapping[str, Tensor], layout: tuple[str, ...]) -> Tensor:
    """Pool each stage-4 map and concatenate segments in ``layout`` order.

    A modality missing from ``stage4`` contributes a zero segment, keeping
    the fused width fixed for heads trained on the full layout.
    """
    if not stage4:
        raise DataError("fusion needs at least one stage-4 map")
    ref = next(iter(stage4.values()))
    segments = []
    for mod in layout:
        if mod in stage4:
            segments.append(stage4[mod].mean(dim=(-2, -1)))
        else:
            segments.append(ref.new_zeros(ref.shape[0], ref.shape[1]))
    return torch.cat(segments, dim=-1)


def ce_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Cross entropy with the predicted probability floored at 1e-12."""
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise DataError(f"labels out of range for {logits.shape[-1]} classes")
    probs = torch.softmax(logits, dim=-1)
    picked = probs.gather(-1, labels[:, None]).squeeze(-1)
    return -(picked.clamp_min(LOG_FLOOR).log()).mean()


class StageClassifier(nn.Module):
    """Encoder + fusion + two fully connected layers with ReLU.

    ``active`` fixes which modalities the head was sized for; forward may
    restrict evaluation to a subset of them, in which case the remaining
    fusion segments are zero.
    """

    def __init__(self, encoder_cfg: EncoderConfig, active: tuple[str, ...] | None = None):
        super().__init__()
        self.encoder = TriEncoder(encoder_cfg)
        self.active = tuple(active) if active is not None else encoder_cfg.modalities
        bad = [m for m in self.active if m not in encoder_cfg.modalities]
        if bad:
            raise DataError(f"active modalities {bad} not in encoder config")
        fused = sum(encoder_cfg.widths[-1] for _ in self.active)
        self.head = nn.Sequential(
            nn.Linear(fused, HIDDEN_WIDTH),
            nn.ReLU(inplace=True),
            nn.Linear(HIDDEN_WIDTH, N_CLASSES),
        )

    def forward(self, inputs: dict[str, Tensor], modalities: tuple[str, ...] | None = None) -> Tensor:
        mods = tuple(modalities) if modalities is not None else self.active
        bad = [m for m in mods if m not in self.active]
        if bad:
            raise DataError(f"modalities {bad} not active for this classifier ({self.active})")
        pyramid = self.encoder({m: inputs[m] for m in mods}, mods)
        stage4 = {m: pyramid[m][-1] for m in mods}
        return self.head(fuse(stage4, self.active))

    def predict_probs(self, inputs: dict[str, Tensor], modalities: tuple[str, ...] | None = None) -> Tensor:
        return torch.softmax(self.forward(inputs, modalities), dim=-1)
