"""Small stand-ins for the frozen CLIP dual encoder and the SAM encoder/decoder.

Only the tensor interfaces matter downstream: CLIP yields patch features, word features
and a sentence embedding; SAM yields a grid of image embeddings and decodes prompt tokens
into full-resolution mask logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator

import torch
from torch import nn

from ssp_sam.config import BackboneConfig
from ssp_sam.errors import InvalidInputError


@dataclass
class FeatureBundle:
    """Frozen-backbone outputs for one batch."""

    patch_feats: torch.Tensor  # B x N x D
    sentence_emb: torch.Tensor  # B x D
    word_feats: torch.Tensor  # B x L x D
    word_mask: torch.Tensor  # B x L, True = real token
    sam_feats: torch.Tensor  # B x C x h x w

    def __len__(self) -> int:
        return self.patch_feats.shape[0]

    def _map(self, fn) -> "FeatureBundle":
        return FeatureBundle(**{f.name: fn(getattr(self, f.name)) for f in fields(self)})

    def index(self, idx) -> "FeatureBundle":
        return self._map(lambda t: t[idx])

    def to(self, *args, **kwargs) -> "FeatureBundle":
        return self._map(lambda t: t.to(*args, **kwargs))

    def double(self) -> "FeatureBundle":
        return self._map(lambda t: t.double() if t.is_floating_point() else t)

    @classmethod
    def cat(cls, bundles: list["FeatureBundle"]) -> "FeatureBundle":
        return cls(**{f.name: torch.cat([getattr(b, f.name) for b in bundles]) for f in fields(cls)})

    def check(self) -> "FeatureBundle":
        for f in fields(self):
            t = getattr(self, f.name)
            if t.is_floating_point() and not torch.isfinite(t).all():
                raise InvalidInputError(f"{f.name} contains non-finite values")
        if not self.word_mask.any(dim=1).all():
            raise InvalidInputError("every row of word_mask needs at least one real token")
        return self


def check_images(images: torch.Tensor, cfg: BackboneConfig) -> None:
    s = cfg.image_size
    if images.ndim != 4 or tuple(images.shape[1:]) != (3, s, s):
        raise InvalidInputError(f"expected images of shape Bx3x{s}x{s}, got {tuple(images.shape)}")
    if images.numel() and (images.min() < 0 or images.max() > 1):
        raise InvalidInputError("pixel values must lie in [0, 1]")


def check_tokens(token_ids: torch.Tensor, word_mask: torch.Tensor, cfg: BackboneConfig) -> None:
    if token_ids.ndim != 2 or token_ids.shape[1] != cfg.max_tokens:
        raise InvalidInputError(f"expected token ids of shape Bx{cfg.max_tokens}, got {tuple(token_ids.shape)}")
    if word_mask.shape != token_ids.shape:
        raise InvalidInputError("word_mask shape differs from token_ids")
    if (token_ids < 0).any() or (token_ids >= cfg.vocab_size).any():
        raise InvalidInputError(f"token id outside vocabulary of size {cfg.vocab_size}")
    if not word_mask.any(dim=1).all():
        raise InvalidInputError("empty expression (all positions padded)")
    # padding must be a suffix
    if (word_mask[:, 1:] & ~word_mask[:, :-1]).any():
        raise InvalidInputError("word_mask must mark a prefix of real tokens")


def _encoder(dim: int, heads: int, layers: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(dim, heads, dim * 2, dropout=0.0, batch_first=True, norm_first=True)
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


class ClipVisual(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.feat_dim, cfg.patch_size, cfg.patch_size)
        self.pos = nn.Parameter(torch.randn(1, cfg.num_patches, cfg.feat_dim) * 0.02)
        self.blocks = _encoder(cfg.feat_dim, cfg.clip_heads, cfg.clip_layers)
        self.ln_post = nn.LayerNorm(cfg.feat_dim)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.patch_embed(images).flatten(2).transpose(1, 2) + self.pos
        patch_feats = self.ln_post(self.blocks(x))
        return patch_feats, patch_feats.mean(dim=1)


class ClipText(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.feat_dim)
        self.pos = nn.Parameter(torch.randn(1, cfg.max_tokens, cfg.feat_dim) * 0.02)
        self.blocks = _encoder(cfg.feat_dim, cfg.clip_heads, cfg.clip_layers)
        self.ln_final = nn.LayerNorm(cfg.feat_dim)

    def forward(self, token_ids: torch.Tensor, word_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.embed(token_ids) + self.pos
        word_feats = self.ln_final(self.blocks(x, src_key_padding_mask=~word_mask))
        w = word_mask.to(word_feats.dtype).unsqueeze(-1)
        sentence = (word_feats * w).sum(dim=1) / w.sum(dim=1)
        return word_feats, sentence


class SamEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.sam_channels
        self.patch_embed = nn.Conv2d(3, c, cfg.patch_size, cfg.patch_size)
        self.pos = nn.Parameter(torch.randn(1, cfg.num_patches, c) * 0.02)
        self.blocks = _encoder(c, 8, cfg.sam_layers)
        self.neck = nn.LayerNorm(c)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        b, g = images.shape[0], self.cfg.grid_size
        x = self.patch_embed(images).flatten(2).transpose(1, 2) + self.pos
        x = self.neck(self.blocks(x))
        return x.transpose(1, 2).reshape(b, -1, g, g)


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


def mlp(in_dim: int, hidden: int, out_dim: int, layers: int = 3) -> nn.Sequential:
    dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
    mods: list[nn.Module] = []
    for i in range(layers):
        mods.append(nn.Linear(dims[i], dims[i + 1]))
        if i < layers - 1:
            mods.append(nn.ReLU())
    return nn.Sequential(*mods)


class TwoWayBlock(nn.Module):
    """Token self-attention, token->image, MLP, image->token (post-norm, SAM style).

    Prompt tokens carry no positional encoding, so the block is permutation-equivariant
    over tokens and the image update is permutation-invariant.
    """

    def __init__(self, dim: int, heads: int = 8, mlp_dim: int | None = None):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim or 2 * dim), nn.ReLU(), nn.Linear(mlp_dim or 2 * dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, image, image_pe):
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens, need_weights=False)[0])
        keys = image + image_pe
        tokens = self.norm2(tokens + self.cross_t2i(tokens, keys, image, need_weights=False)[0])
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(image + self.cross_i2t(keys, tokens, tokens, need_weights=False)[0])
        return tokens, image


class MaskDecoder(nn.Module):
    """Two-way attention between prompt tokens and image embeddings, then a hypernetwork
    dot product against upsampled embeddings. Output: B x 1 x H x W logits."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.sam_channels
        self.mask_token = nn.Parameter(torch.randn(1, 1, c) * 0.02)
        self.image_pe = nn.Parameter(torch.randn(1, cfg.num_patches, c) * 0.02)
        self.blocks = nn.ModuleList(TwoWayBlock(c) for _ in range(cfg.decoder_depth))
        self.final_attn = nn.MultiheadAttention(c, 8, batch_first=True)
        self.final_norm = nn.LayerNorm(c)
        stages = int(math.log2(cfg.patch_size))
        up: list[nn.Module] = []
        ch = c
        for i in range(stages):
            nxt = c // 4 if i == 0 else c // 8
            up.append(nn.ConvTranspose2d(ch, nxt, 2, 2))
            if i == 0:
                up.append(LayerNorm2d(nxt))
            up.append(nn.GELU())
            ch = nxt
        self.upscale = nn.Sequential(*up)
        self.out_ch = ch
        self.hyper = mlp(c, c, ch, 3)

    def forward(self, sam_feats: torch.Tensor, prompt_tokens: torch.Tensor) -> torch.Tensor:
        b, c, h, w = sam_feats.shape
        if prompt_tokens.ndim != 3 or prompt_tokens.shape[-1] != c:
            raise InvalidInputError(f"prompt width {prompt_tokens.shape[-1]} does not match decoder width {c}")
        if prompt_tokens.shape[0] != b or prompt_tokens.shape[1] < 1:
            raise InvalidInputError("need >= 1 prompt token per image and matching batch sizes")
        tokens = torch.cat([self.mask_token.expand(b, -1, -1), prompt_tokens], dim=1)
        image = sam_feats.flatten(2).transpose(1, 2)
        for blk in self.blocks:
            tokens, image = blk(tokens, image, self.image_pe)
        keys = image + self.image_pe
        tokens = self.final_norm(tokens + self.final_attn(tokens, keys, image, need_weights=False)[0])
        up = self.upscale(image.transpose(1, 2).reshape(b, c, h, w))
        hyper = self.hyper(tokens[:, 0])
        return torch.einsum("bc,bchw->bhw", hyper, up).unsqueeze(1)


class BoxPromptEncoder(nn.Module):
    """Box corners -> two prompt tokens via random Fourier features (used only while
    warm-starting the SAM stand-in)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.sam_channels
        gen = torch.Generator().manual_seed(cfg.seed + 17)
        self.register_buffer("gaussian", torch.randn(2, c // 2, generator=gen))
        self.corner_embed = nn.Parameter(torch.randn(2, c) * 0.02)

    def forward(self, boxes_xyxy: torch.Tensor) -> torch.Tensor:
        corners = boxes_xyxy.reshape(-1, 2, 2)
        proj = 2 * math.pi * (2 * corners - 1) @ self.gaussian
        return torch.cat([proj.sin(), proj.cos()], dim=-1) + self.corner_embed


class Backbones(nn.Module):
    """All frozen stand-ins in one container."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.clip_visual = ClipVisual(cfg)
        self.clip_text = ClipText(cfg)
        self.sam_encoder = SamEncoder(cfg)
        self.mask_decoder = MaskDecoder(cfg)
        self.box_prompt = BoxPromptEncoder(cfg)

    def encoder_parameters(self) -> Iterator[nn.Parameter]:
        for mod in (self.clip_visual, self.clip_text, self.sam_encoder, self.box_prompt):
            yield from mod.parameters()

    def freeze_encoders(self) -> None:
        for p in self.encoder_parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def extract(self, images: torch.Tensor, token_ids: torch.Tensor, word_mask: torch.Tensor) -> FeatureBundle:
        patch_feats, _ = encode_image_clip(self, images)
        word_feats, sentence = encode_text_clip(self, token_ids, word_mask)
        sam_feats = encode_image_sam(self, images)
        return FeatureBundle(patch_feats, sentence, word_feats, word_mask, sam_feats)


def encode_image_clip(bb: Backbones, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Patch features (B x N x D) and their mean-pooled embedding (B x D)."""
    check_images(images, bb.cfg)
    return bb.clip_visual(images)


def encode_text_clip(bb: Backbones, token_ids: torch.Tensor, word_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Word features (B x L x D) and the masked-mean sentence embedding (B x D)."""
    check_tokens(token_ids, word_mask, bb.cfg)
    return bb.clip_text(token_ids, word_mask)


def encode_image_sam(bb: Backbones, images: torch.Tensor) -> torch.Tensor:
    check_images(images, bb.cfg)
    return bb.sam_encoder(images)


def decode_masks(bb: Backbones, sam_feats: torch.Tensor, prompt_tokens: torch.Tensor) -> torch.Tensor:
    return bb.mask_decoder(sam_feats, prompt_tokens)
