"""The full pipeline: frozen backbones + semantic-spatial prompt encoder + mask decoder."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ssp_sam.backbones import Backbones, FeatureBundle, decode_masks
from ssp_sam.config import BackboneConfig, ModelConfig
from ssp_sam.linguistic_adapter import LinguisticAdapter, PhraseAttention
from ssp_sam.prompt_generator import BoxHead, PromptGenerator, PromptSet, gated_fuse
from ssp_sam.visual_adapter import VisualAdapter, VisualAttentionState


@dataclass
class ModelOutput:
    mask_logits: torch.Tensor  # B x 1 x H x W
    box: torch.Tensor  # B x 4, (cx, cy, w, h)
    prompts: PromptSet
    fused: torch.Tensor
    visual: VisualAttentionState | None = None
    phrase: PhraseAttention | None = None


class SSPEncoder(nn.Module):
    """Adapters, gated fusion, prompt generator and box head; everything that is trained."""

    def __init__(self, bcfg: BackboneConfig, mcfg: ModelConfig):
        super().__init__()
        self.mcfg = mcfg
        d, dp = bcfg.feat_dim, bcfg.prompt_dim
        self.visual_adapter = VisualAdapter(d, dp, mcfg.adapter_heads, mcfg.alpha_init, mcfg.delta_init,
                                            mcfg.delta_min, mcfg.gaussian)
        self.linguistic_adapter = LinguisticAdapter(d, dp, mcfg.ctx_dim)
        self.prompt_generator = PromptGenerator(dp, bcfg.num_patches, mcfg.n_res, mcfg.encoder_layers,
                                                mcfg.encoder_heads, mcfg.ffn_mult, mcfg.pg_type)
        self.box_head = BoxHead(dp)

    def forward(self, feats: FeatureBundle) -> tuple[PromptSet, torch.Tensor, torch.Tensor, VisualAttentionState | None, PhraseAttention | None]:
        va = self.visual_adapter
        if self.mcfg.use_visual_adapter:
            visual = va(feats.patch_feats, feats.sentence_emb, feats.word_feats, feats.word_mask)
            enhanced = visual.enhanced
        else:
            # raw CLIP patch features, only projected
            visual = None
            enhanced = va.fc(feats.patch_feats)
        la = self.linguistic_adapter
        if self.mcfg.use_linguistic_adapter:
            phrase = la(feats.word_feats, feats.word_mask)
            phrase_feat = phrase.phrase
        else:
            phrase = None
            phrase_feat = la.word_fc(feats.sentence_emb).unsqueeze(1)
        fused = gated_fuse(enhanced, phrase_feat)
        prompts = self.prompt_generator(fused)
        box = self.box_head(prompts.aux_token)
        return prompts, box, fused, visual, phrase

    def clamp_(self) -> None:
        self.visual_adapter.clamp_()


class SSPSAM(nn.Module):
    def __init__(self, backbones: Backbones, mcfg: ModelConfig):
        super().__init__()
        mcfg.validate()
        self.backbones = backbones
        self.ssp = SSPEncoder(backbones.cfg, mcfg)

    @property
    def decoder(self) -> nn.Module:
        return self.backbones.mask_decoder

    def forward(self, feats: FeatureBundle) -> ModelOutput:
        prompts, box, fused, visual, phrase = self.ssp(feats)
        logits = decode_masks(self.backbones, feats.sam_feats, prompts.res_tokens)
        return ModelOutput(logits, box, prompts, fused, visual, phrase)

    def forward_images(self, images: torch.Tensor, token_ids: torch.Tensor, word_mask: torch.Tensor) -> ModelOutput:
        return self(self.backbones.extract(images, token_ids, word_mask))
