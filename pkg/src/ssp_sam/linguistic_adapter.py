"""Linguistic attention adapter: phrase attention over context-aware word features."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from ssp_sam.errors import InvalidInputError


@dataclass
class PhraseAttention:
    weights: torch.Tensor  # B x 1 x L, zero on padding, rows sum to 1
    phrase: torch.Tensor  # B x 1 x D'


def project_context(word_feats: torch.Tensor, word_mask: torch.Tensor, proj_fc: nn.Module, gru: nn.GRU) -> torch.Tensor:
    """FC then a bidirectional GRU over each row's unpadded prefix; directions are summed.

    Padded positions come back as exact zeros.
    """
    lengths = word_mask.sum(dim=1)
    if (lengths == 0).any():
        raise InvalidInputError("empty sentence in batch")
    x = proj_fc(word_feats)
    packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
    out, _ = gru(packed)
    out, _ = pad_packed_sequence(out, batch_first=True, total_length=word_feats.shape[1])
    hidden = gru.hidden_size
    return out[..., :hidden] + out[..., hidden:]


def phrase_attention(context: torch.Tensor, word_mask: torch.Tensor, attn_fc: nn.Module) -> torch.Tensor:
    """Masked softmax of per-token scores, returned as B x 1 x L."""
    logits = attn_fc(context).squeeze(-1).masked_fill(~word_mask, float("-inf"))
    return torch.softmax(logits, dim=-1).unsqueeze(1)


def reweight_phrases(word_feats: torch.Tensor, weights: torch.Tensor, word_fc: nn.Module) -> torch.Tensor:
    return torch.bmm(weights, word_fc(word_feats))


class LinguisticAdapter(nn.Module):
    def __init__(self, feat_dim: int, prompt_dim: int, ctx_dim: int | None = None):
        super().__init__()
        ctx_dim = ctx_dim or feat_dim
        self.proj_fc = nn.Linear(feat_dim, ctx_dim)
        self.gru = nn.GRU(ctx_dim, ctx_dim, batch_first=True, bidirectional=True)
        self.word_fc = nn.Linear(feat_dim, prompt_dim)
        self.attn_fc = nn.Linear(ctx_dim, 1)

    def forward(self, word_feats: torch.Tensor, word_mask: torch.Tensor) -> PhraseAttention:
        context = project_context(word_feats, word_mask, self.proj_fc, self.gru)
        weights = phrase_attention(context, word_mask, self.attn_fc)
        return PhraseAttention(weights, reweight_phrases(word_feats, weights, self.word_fc))
