"""Brief pretraining of the backbone stand-ins, done once and cached, then frozen.

* CLIP stand-in: region/expression contrastive matching plus a per-patch term, so the
  cosine between a patch feature and the sentence embedding is informative.
* SAM stand-in: class-agnostic box-prompted segmentation of single objects, so the mask
  decoder arrives with a working prompt -> mask mapping before it is frozen.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ssp_sam.backbones import Backbones
from ssp_sam.config import BackboneConfig
from ssp_sam.losses import dice_loss, focal_loss
from ssp_sam.synthdata import generate_samples, mask_to_corners, realize_expression, render, tokenize

log = logging.getLogger(__name__)

WARMSTART_DATA_SEED = 900_000  # kept apart from every dataset seed used for SSP training
WARMSTART_VERSION = 2  # bump when the warm-start recipe changes so cached weights are rebuilt


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _region_pairs(samples, cfg: BackboneConfig):
    """One (image index, expression, patch coverage) triple per object of every scene."""
    g, p = cfg.grid_size, cfg.patch_size
    img_idx, ids, wmask, cover = [], [], [], []
    for i, s in enumerate(samples):
        _, obj_masks = render(s.scene)
        for k, m in enumerate(obj_masks):
            tok, wm = tokenize(realize_expression(s.scene, (k,)), cfg.max_tokens)
            img_idx.append(i)
            ids.append(tok)
            wmask.append(wm)
            cover.append(m.reshape(g, p, g, p).mean(axis=(1, 3)).reshape(-1))
    return (torch.tensor(img_idx), torch.tensor(np.stack(ids)), torch.tensor(np.stack(wmask)),
            torch.tensor(np.stack(cover), dtype=torch.float32))


def warmstart_clip(bb: Backbones, samples, epochs: int, lr: float, batch_size: int = 32, seed: int = 0) -> list[float]:
    """Region/expression contrastive matching.

    Every object gets its own expression. Patch features pooled over the object's region
    are contrasted against all expressions in the batch (other objects of the same image
    act as hard negatives), and a per-patch logistic term pushes the patch/sentence cosine
    up on covered patches and down elsewhere.
    """
    if epochs <= 0:
        return []
    images = torch.tensor(np.stack([s.image for s in samples]))
    img_idx, ids, wmask, cover = _region_pairs(samples, bb.cfg)
    params = list(bb.clip_visual.parameters()) + list(bb.clip_text.parameters())
    logit_scale = torch.nn.Parameter(torch.tensor(np.log(1 / 0.07), dtype=torch.float32))
    dense = torch.nn.Parameter(torch.tensor([10.0, -5.0]))
    opt = torch.optim.Adam(params + [logit_scale, dense], lr=lr)
    gen = torch.Generator().manual_seed(seed)
    history = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for batch in _batches(len(samples), batch_size, gen):
            pick = torch.isin(img_idx, batch).nonzero().squeeze(1)
            local = torch.searchsorted(batch.sort().values, img_idx[pick])
            patches, _ = bb.clip_visual(images[batch.sort().values])
            patches = F.normalize(patches, dim=-1)[local]  # M x N x D
            _, sent = bb.clip_text(ids[pick], wmask[pick])
            sent = F.normalize(sent, dim=-1)
            w = cover[pick]
            region = F.normalize((patches * w.unsqueeze(-1)).sum(1) / w.sum(1, keepdim=True), dim=-1)
            scores = sent @ region.t() * logit_scale.exp().clamp(max=100)
            target = torch.arange(len(pick))
            loss = (F.cross_entropy(scores, target) + F.cross_entropy(scores.t(), target)) / 2
            cos = torch.einsum("mnd,md->mn", patches, sent)
            loss = loss + F.binary_cross_entropy_with_logits(dense[0] * cos + dense[1], (w > 0.25).float())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(pick)
            count += len(pick)
        history.append(total / count)
        log.info("clip warm-start epoch %d loss %.4f", epoch, history[-1])
    return history


def _object_pairs(samples, image_size: int):
    images, masks, boxes = [], [], []
    for s in samples:
        _, obj_masks = render(s.scene)
        for m in obj_masks:
            x1, y1, x2, y2 = mask_to_corners(m)
            images.append(s.image)
            masks.append(m)
            boxes.append([x1 / image_size, y1 / image_size, x2 / image_size, y2 / image_size])
    return (torch.tensor(np.stack(images)), torch.tensor(np.stack(masks)).float().unsqueeze(1),
            torch.tensor(boxes, dtype=torch.float32))


def warmstart_sam(bb: Backbones, samples, epochs: int, lr: float, batch_size: int = 32, seed: int = 0) -> list[float]:
    if epochs <= 0:
        return []
    images, masks, boxes = _object_pairs(samples, bb.cfg.image_size)
    params = [p for m in (bb.sam_encoder, bb.mask_decoder, bb.box_prompt) for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=lr)
    steps = epochs * ((len(images) + batch_size - 1) // batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
    gen = torch.Generator().manual_seed(seed + 1)
    history = []
    for epoch in range(epochs):
        total = 0.0
        for idx in _batches(len(images), batch_size, gen):
            feats = bb.sam_encoder(images[idx])
            logits = bb.mask_decoder(feats, bb.box_prompt(boxes[idx]))
            loss = 20 * focal_loss(logits, masks[idx]) + dice_loss(logits, masks[idx])
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, 1.0)
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        history.append(total / len(images))
        log.info("sam warm-start epoch %d loss %.4f", epoch, history[-1])
    return history


def backbone_digest(cfg: BackboneConfig) -> str:
    blob = json.dumps({**dataclasses.asdict(cfg), "recipe": WARMSTART_VERSION}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build_backbones(cfg: BackboneConfig, cache_dir: str | os.PathLike | None = None) -> Backbones:
    """Construct, warm-start and freeze the stand-ins, reusing a cached copy when present."""
    cfg.validate()
    path = Path(cache_dir) / f"backbones-{backbone_digest(cfg)}.pt" if cache_dir else None
    bb = Backbones(cfg)
    if path is not None and path.exists():
        bb.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    else:
        torch.manual_seed(cfg.seed)
        if cfg.warmstart_samples > 0 and (cfg.clip_warmstart_epochs > 0 or cfg.sam_warmstart_epochs > 0):
            samples = generate_samples(cfg.warmstart_samples, "res", seed=WARMSTART_DATA_SEED + cfg.seed,
                                       image_size=cfg.image_size, max_tokens=cfg.max_tokens,
                                       val_fraction=0.0, test_fraction=0.0)
            bb.train()
            warmstart_clip(bb, samples, cfg.clip_warmstart_epochs, cfg.warmstart_lr, seed=cfg.seed)
            warmstart_sam(bb, samples, cfg.sam_warmstart_epochs, cfg.warmstart_lr, seed=cfg.seed)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            torch.save(bb.state_dict(), tmp)
            os.replace(tmp, path)
    bb.eval()
    bb.freeze_encoders()
    return bb
