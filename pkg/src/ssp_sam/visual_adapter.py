"""Visual attention adapter.

Patch features are first gated by their cosine similarity to the sentence embedding,
then refined by a word-level cross-attention map pushed through a Gaussian-shaped
re-weighting with learnable amplitude ``alpha`` and width ``delta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ssp_sam.errors import InvalidInputError, NumericalError


@dataclass
class VisualAttentionState:
    sentence_sim: torch.Tensor  # B x N x 1, cosine in [-1, 1]
    selected: torch.Tensor  # B x N x D
    word_sim: torch.Tensor  # B x N x 1, broadcast over the prompt width
    enhanced: torch.Tensor  # B x N x D'


def cosine(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine similarity along ``dim``; a zero-norm operand gives 0."""
    return (F.normalize(a, dim=dim) * F.normalize(b, dim=dim)).sum(dim=dim, keepdim=True)


def sentence_similarity_map(patch_feats: torch.Tensor, sentence_emb: torch.Tensor) -> torch.Tensor:
    if patch_feats.ndim != 3 or sentence_emb.ndim != 2 or patch_feats.shape[-1] != sentence_emb.shape[-1]:
        raise InvalidInputError(f"incompatible shapes {tuple(patch_feats.shape)} and {tuple(sentence_emb.shape)}")
    return cosine(patch_feats, sentence_emb.unsqueeze(1).expand_as(patch_feats))


def select_features(patch_feats: torch.Tensor, sentence_sim: torch.Tensor) -> torch.Tensor:
    if sentence_sim.shape != (*patch_feats.shape[:2], 1):
        raise InvalidInputError(f"similarity map shape {tuple(sentence_sim.shape)} does not fit {tuple(patch_feats.shape)}")
    return patch_feats * sentence_sim


class CrossAttention(nn.Module):
    """Pre-norm multi-head attention, visual queries over word keys/values."""

    def __init__(self, dim: int, heads: int = 8):
        super().__init__()
        if dim % heads:
            raise InvalidInputError(f"width {dim} not divisible by {heads} heads")
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, queries: torch.Tensor, context: torch.Tensor, context_mask: torch.Tensor) -> torch.Tensor:
        kv = self.norm_kv(context)
        out, _ = self.attn(self.norm_q(queries), kv, kv, key_padding_mask=~context_mask, need_weights=False)
        return out


def word_attention_map(selected: torch.Tensor, word_feats: torch.Tensor, word_mask: torch.Tensor,
                       cross_attn: CrossAttention) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(word_sim, attended)``: per-patch cosine between the selected features and
    their word-attended summary, B x N x 1, plus the summary itself."""
    if selected.shape[-1] != word_feats.shape[-1]:
        raise InvalidInputError("visual and word widths differ")
    if not word_mask.any(dim=1).all():
        raise InvalidInputError("a row of word_mask is entirely padding")
    attended = cross_attn(selected, word_feats, word_mask)
    return cosine(selected, attended), attended


def gaussian_multiplier(word_sim: torch.Tensor, alpha: torch.Tensor, delta: torch.Tensor,
                        delta_min: float = 1e-3) -> torch.Tensor:
    delta_sq = torch.clamp(delta * delta, min=delta_min**2)
    return alpha * torch.exp(-((1.0 - word_sim) ** 2) / (2.0 * delta_sq))


def gaussian_enhance(selected: torch.Tensor, word_sim: torch.Tensor, fc: nn.Module, alpha: torch.Tensor,
                     delta: torch.Tensor, delta_min: float = 1e-3, enabled: bool = True) -> torch.Tensor:
    projected = fc(selected)
    if not enabled:
        return projected
    out = projected * gaussian_multiplier(word_sim, alpha, delta, delta_min)
    if not torch.isfinite(out).all():
        raise NumericalError("non-finite values after Gaussian enhancement")
    return out


class VisualAdapter(nn.Module):
    def __init__(self, feat_dim: int, prompt_dim: int, heads: int = 8, alpha_init: float = 1.0,
                 delta_init: float = 0.5, delta_min: float = 1e-3, gaussian: bool = True):
        super().__init__()
        self.alpha = nn.Parameter(torch.tensor(float(alpha_init)))
        self.delta = nn.Parameter(torch.tensor(float(delta_init)))
        self.delta_min = delta_min
        self.gaussian = gaussian
        self.fc = nn.Linear(feat_dim, prompt_dim)
        self.cross_attn = CrossAttention(feat_dim, heads)

    def forward(self, patch_feats, sentence_emb, word_feats, word_mask) -> VisualAttentionState:
        sentence_sim = sentence_similarity_map(patch_feats, sentence_emb)
        selected = select_features(patch_feats, sentence_sim)
        word_sim, _ = word_attention_map(selected, word_feats, word_mask, self.cross_attn)
        enhanced = gaussian_enhance(selected, word_sim, self.fc, self.alpha, self.delta, self.delta_min, self.gaussian)
        return VisualAttentionState(sentence_sim, selected, word_sim, enhanced)

    @torch.no_grad()
    def clamp_(self) -> None:
        """Keep |delta| >= delta_min after an optimizer step."""
        if self.delta.abs() < self.delta_min:
            self.delta.fill_(self.delta_min if self.delta >= 0 else -self.delta_min)
