"""Cross-modal channel attention over a small graph of modality branches.

Each modality's feature map is summarized with three poolings, embedded,
gated by a bank of heads that score its reliability, cross-examined against
the other modalities through relational graph attention (one learned
embedding per ordered modality pair), and finally turned into per-channel
sigmoid weights applied back to the feature map.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .errors import NumericError


def relation_index(i: int, j: int, n_nodes: int) -> int:
    """Index of the ordered pair (i, j), i != j, in a fixed enumeration."""
    if i == j:
        raise ValueError("relations are defined for distinct nodes only")
    return i * (n_nodes - 1) + (j if j < i else j - 1)


def apply_channel_weights(fmap: Tensor, weights: Tensor) -> Tensor:
    """Broadcast (B, C) weights over the spatial dims of a (B, C, h, w) map."""
    if fmap.shape[:2] != weights.shape:
        raise ValueError(f"channel mismatch: map {tuple(fmap.shape)} vs weights {tuple(weights.shape)}")
    return fmap * weights[:, :, None, None]


class CrossModalChannelAttention(nn.Module):
    """Joint channel re-weighting of up to ``n_modalities`` feature maps.

    ``forward`` takes one feature map per active modality plus the global
    node ids of those modalities, so a subset of branches (missing-modality
    ablations) keeps its pairwise relation embeddings. With a single active
    node the graph step is skipped and the gated embedding feeds the final
    projection directly.
    """

    def __init__(
        self,
        channels: int,
        n_modalities: int = 3,
        heads: int = 4,
        leaky_slope: float = 0.01,
        gem_p_init: float = 3.0,
        gem_eps: float = 1e-6,
    ):
        super().__init__()
        if heads < 1:
            raise ValueError(f"need at least one head, got {heads}")
        if n_modalities < 1:
            raise ValueError(f"need at least one modality, got {n_modalities}")
        self.channels = channels
        self.n_modalities = n_modalities
        self.heads = heads
        self.leaky_slope = leaky_slope
        self.gem_eps = gem_eps

        self.gem_p = nn.Parameter(torch.tensor(float(gem_p_init)))
        self.embed_fc = nn.Linear(3 * channels, channels)
        self.gates = nn.ModuleList(nn.Linear(channels, channels) for _ in range(heads))
        self.proj = nn.Parameter(torch.empty(heads, channels, channels))
        self.attn_vec = nn.Parameter(torch.empty(heads, 2 * channels))
        n_relations = max(1, n_modalities * (n_modalities - 1))
        # Zero relation embeddings make the initial attention relation-free.
        self.relations = nn.Parameter(torch.zeros(heads, n_relations, channels))
        self.out_fc = nn.Linear(channels, channels)

        bound = 1.0 / math.sqrt(channels)
        nn.init.uniform_(self.proj, -bound, bound)
        nn.init.uniform_(self.attn_vec, -1.0 / math.sqrt(2 * channels), 1.0 / math.sqrt(2 * channels))

    def summarize(self, fmap: Tensor) -> Tensor:
        """(B, C, h, w) -> (B, 3C): mean, max, and generalized-mean pooling."""
        if not torch.isfinite(fmap).all():
            raise NumericError("non-finite values in attention input")
        gap = fmap.mean(dim=(-2, -1))
        gmp = fmap.amax(dim=(-2, -1))
        gem = fmap.clamp_min(self.gem_eps).pow(self.gem_p).mean(dim=(-2, -1)).pow(1.0 / self.gem_p)
        return torch.cat([gap, gmp, gem], dim=-1)

    def embed(self, summary: Tensor) -> Tensor:
        if summary.shape[-1] != 3 * self.channels:
            raise ValueError(f"expected summary of length {3 * self.channels}, got {summary.shape[-1]}")
        return torch.sigmoid(self.embed_fc(summary))

    def gate(self, v: Tensor) -> Tensor:
        g = torch.stack([torch.sigmoid(gate(v)) for gate in self.gates]).mean(dim=0)
        return v * g

    def graph_attend(self, gated: Tensor, node_ids: tuple[int, ...]) -> Tensor:
        """(B, m, C) gated embeddings -> (B, m, C) neighbor aggregates.

        Scores use LeakyReLU(a . [W v_i || W v_j + R_ij]); the softmax runs
        over each node's neighbors (no self-loop) and messages W v_j + R_ij
        are averaged over heads.
        """
        b, m, c = gated.shape
        if m < 2:
            raise ValueError("graph attention needs at least two nodes")
        rel = torch.tensor(
            [
                [relation_index(i, j, self.n_modalities) if i != j else 0 for j in node_ids]
                for i in node_ids
            ],
            device=gated.device,
        )
        eye = torch.eye(m, dtype=torch.bool, device=gated.device)
        out = gated.new_zeros(b, m, c)
        for h in range(self.heads):
            wv = gated @ self.proj[h].T
            msg = wv[:, None, :, :] + self.relations[h][rel]
            a_src, a_dst = self.attn_vec[h, : self.channels], self.attn_vec[h, self.channels :]
            scores = (wv * a_src).sum(-1)[:, :, None] + (msg * a_dst).sum(-1)
            scores = nn.functional.leaky_relu(scores, negative_slope=self.leaky_slope)
            if not torch.isfinite(scores).all():
                raise NumericError("non-finite attention scores")
            alpha = torch.softmax(scores.masked_fill(eye, float("-inf")), dim=-1)
            out = out + (alpha[..., None] * msg).sum(dim=2)
        return out / self.heads

    def finalize_weights(self, u: Tensor) -> Tensor:
        return torch.sigmoid(self.out_fc(u))

    def forward(
        self, fmaps: list[Tensor], node_ids: tuple[int, ...] | None = None
    ) -> list[Tensor]:
        if node_ids is None:
            node_ids = tuple(range(self.n_modalities))
        if len(fmaps) != len(node_ids):
            raise ValueError(f"got {len(fmaps)} maps for {len(node_ids)} nodes")
        if len(fmaps) > self.n_modalities or not fmaps:
            raise ValueError(
                f"this unit handles 1..{self.n_modalities} modalities, got {len(fmaps)}"
            )
        gated = torch.stack([self.gate(self.embed(self.summarize(f))) for f in fmaps], dim=1)
        if len(fmaps) == 1:
            u = gated
        else:
            u = self.graph_attend(gated, node_ids)
        weights = self.finalize_weights(u)
        return [apply_channel_weights(f, weights[:, k]) for k, f in enumerate(fmaps)]
