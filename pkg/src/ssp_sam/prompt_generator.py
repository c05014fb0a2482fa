"""Gated fusion and the token-based prompt generator with its auxiliary box head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ssp_sam.backbones import mlp
from ssp_sam.errors import InvalidInputError


@dataclass
class PromptSet:
    res_tokens: torch.Tensor  # B x n_res x D'
    aux_token: torch.Tensor  # B x 1 x D'


def gated_fuse(enhanced_visual: torch.Tensor, phrase: torch.Tensor) -> torch.Tensor:
    """tanh(visual) * tanh(phrase), the phrase broadcast over patches. Entries lie in (-1, 1)."""
    if enhanced_visual.shape[-1] != phrase.shape[-1]:
        raise InvalidInputError(f"widths differ: {enhanced_visual.shape[-1]} vs {phrase.shape[-1]}")
    if phrase.ndim == 2:
        phrase = phrase.unsqueeze(1)
    return torch.tanh(enhanced_visual) * torch.tanh(phrase)


def sincos_2d(num_patches: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine table (num_patches x dim) over a square patch grid."""
    g = int(round(num_patches**0.5))
    if g * g != num_patches or dim % 4:
        raise InvalidInputError("sincos table needs a square grid and a width divisible by 4")
    ys, xs = torch.meshgrid(torch.arange(g, dtype=torch.float64), torch.arange(g, dtype=torch.float64), indexing="ij")
    freqs = 1.0 / (100.0 ** (torch.arange(dim // 4, dtype=torch.float64) / (dim // 4)))
    parts = []
    for coord in (xs.reshape(-1), ys.reshape(-1)):
        ang = coord[:, None] * freqs[None, :]
        parts += [ang.sin(), ang.cos()]
    return torch.cat(parts, dim=1).float()


class PromptGenerator(nn.Module):
    """Learnable [AUX] and [RES] tokens read the fused features through a transformer encoder.

    ``pg_type="mlp"`` skips the encoder: the projected fused features are average-pooled
    down to ``n_res`` tokens and their global mean stands in for the auxiliary token.
    """

    def __init__(self, prompt_dim: int, num_patches: int, n_res: int = 128, layers: int = 6, heads: int = 8,
                 ffn_mult: int = 4, pg_type: str = "encoder", spatial_init: bool = True):
        super().__init__()
        if n_res < 1:
            raise InvalidInputError("n_res must be >= 1")
        self.n_res = n_res
        self.pg_type = pg_type
        self.fss_mlp = mlp(prompt_dim, prompt_dim, prompt_dim, 3)
        if pg_type == "mlp":
            return
        self.res_tokens = nn.Parameter(torch.randn(1, n_res, prompt_dim) * 0.02)
        self.aux_token = nn.Parameter(torch.randn(1, 1, prompt_dim) * 0.02)
        pos = torch.randn(1, 1 + n_res + num_patches, prompt_dim) * 0.02
        if spatial_init:
            # patch slots start from a grid layout so the box head can read positions early
            pos[0, 1 + n_res:] = sincos_2d(num_patches, prompt_dim)
        self.pos_embed = nn.Parameter(pos)
        layer = nn.TransformerEncoderLayer(prompt_dim, heads, prompt_dim * ffn_mult, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(prompt_dim)

    def forward(self, fused: torch.Tensor) -> PromptSet:
        b = fused.shape[0]
        projected = self.fss_mlp(fused)
        if self.pg_type == "mlp":
            res = F.adaptive_avg_pool1d(projected.transpose(1, 2), self.n_res).transpose(1, 2)
            return PromptSet(res, projected.mean(dim=1, keepdim=True))
        seq = torch.cat([self.aux_token.expand(b, -1, -1), self.res_tokens.expand(b, -1, -1), projected], dim=1)
        if seq.shape[1] != self.pos_embed.shape[1]:
            raise InvalidInputError(f"sequence length {seq.shape[1]} != positional table {self.pos_embed.shape[1]}")
        out = self.norm(self.encoder(seq + self.pos_embed))
        # transformed patch positions are discarded
        return PromptSet(out[:, 1:1 + self.n_res], out[:, :1])


class BoxHead(nn.Module):
    def __init__(self, prompt_dim: int):
        super().__init__()
        self.mlp = mlp(prompt_dim, prompt_dim, 4, 3)

    def forward(self, aux_token: torch.Tensor) -> torch.Tensor:
        return regress_box(aux_token, self.mlp)


def regress_box(aux_token: torch.Tensor, head: nn.Module) -> torch.Tensor:
    """Normalized (cx, cy, w, h) in [0, 1]^4 from the auxiliary token."""
    return torch.sigmoid(head(aux_token.squeeze(1)))


def generate_prompts(fused: torch.Tensor, generator: PromptGenerator) -> PromptSet:
    return generator(fused)
