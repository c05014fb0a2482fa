"""Two-phase training: box-only pretraining, then joint finetuning with a decoder freeze window.

Backbone encoders never train. Their outputs are computed once per split and cached,
which is exact because nothing upstream of the cache receives gradients.
"""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from ssp_sam.backbones import Backbones, FeatureBundle
from ssp_sam.config import RunConfig, save_config
from ssp_sam.errors import NumericalError
from ssp_sam.losses import total_loss
from ssp_sam.metrics import InstanceResult, MetricsReport, aggregate, binarize, evaluate_instance
from ssp_sam.model import SSPSAM
from ssp_sam.synthdata import Sample

log = logging.getLogger(__name__)

WEIGHTS_FORMAT_VERSION = 1
PHASES = ("pretrain", "finetune")
TRAINABLE, FROZEN_PHASE, ALWAYS_FROZEN = "trainable", "frozen-this-phase", "always-frozen"


@dataclass
class CachedSplit:
    ids: list[str]
    feats: FeatureBundle
    gt_masks: torch.Tensor  # B x 1 x H x W float
    gt_boxes: torch.Tensor  # B x 4
    no_target: torch.Tensor  # B bool

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx: torch.Tensor) -> "CachedSplit":
        return CachedSplit([self.ids[i] for i in idx.tolist()], self.feats.index(idx), self.gt_masks[idx],
                           self.gt_boxes[idx], self.no_target[idx])


def cache_features(bb: Backbones, samples: Sequence[Sample], batch_size: int = 256) -> CachedSplit:
    bundles = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images = torch.tensor(np.stack([s.image for s in chunk]))
        ids = torch.tensor(np.stack([s.token_ids for s in chunk]))
        wmask = torch.tensor(np.stack([s.word_mask for s in chunk]))
        bundles.append(bb.extract(images, ids, wmask).check())
    return CachedSplit(
        ids=[s.id for s in samples],
        feats=FeatureBundle.cat(bundles),
        gt_masks=torch.tensor(np.stack([s.gt_mask for s in samples])).float().unsqueeze(1),
        gt_boxes=torch.tensor(np.stack([s.gt_box for s in samples])).float(),
        no_target=torch.tensor([s.is_no_target for s in samples]),
    )


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warm-up from 0 to ``base_lr`` over ``warmup_steps``, then half-cosine decay to 0."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def select_checkpoint(history: Iterable[dict]) -> dict | None:
    """Entry with the highest ``val_giou``; the earliest epoch wins ties."""
    best = None
    for entry in history:
        if entry.get("val_giou") is None or not math.isfinite(entry["val_giou"]):
            continue
        if best is None or entry["val_giou"] > best["val_giou"]:
            best = entry
    return best


def _atomic_dir_write(target: Path, writer) -> None:
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=target.name + ".", dir=target.parent))
    try:
        writer(tmp)
        if target.exists():
            old = target.with_name(target.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(target, old)
            os.replace(tmp, target)
            shutil.rmtree(old)
        else:
            os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def save_checkpoint(path: str | os.PathLike, model: SSPSAM, cfg: RunConfig, phase: str, epoch: int,
                    val_giou: float | None, optimizer: torch.optim.Optimizer | None = None,
                    state: dict | None = None) -> Path:
    """Write ``weights.bin`` and ``manifest.json`` into ``path`` atomically."""
    path = Path(path)

    def write(tmp: Path) -> None:
        torch.save({
            "format_version": WEIGHTS_FORMAT_VERSION,
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "trainer": state or {},
        }, tmp / "weights.bin")
        manifest = {"config": cfg.to_dict(), "epoch": epoch, "val_giou": val_giou, "seed": cfg.train.seed,
                    "phase": phase, "format_version": WEIGHTS_FORMAT_VERSION}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    _atomic_dir_write(path, write)
    return path


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    blob = torch.load(path / "weights.bin", map_location="cpu", weights_only=False)
    if blob.get("format_version") != WEIGHTS_FORMAT_VERSION:
        raise ValueError(f"unsupported weights format {blob.get('format_version')}")
    return manifest, blob


def load_model(path: str | os.PathLike) -> tuple[SSPSAM, RunConfig, dict]:
    manifest, blob = read_checkpoint(path)
    cfg = RunConfig.from_dict(manifest["config"]).validate()
    bb = Backbones(cfg.backbone)
    model = SSPSAM(bb, cfg.model)
    model.load_state_dict(blob["model"])
    bb.freeze_encoders()
    model.eval()
    return model, cfg, manifest


@torch.no_grad()
def predict_logits(model: SSPSAM, data: CachedSplit, batch_size: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    model.eval()
    logits, boxes = [], []
    for i in range(0, len(data), batch_size):
        out = model(data.feats.index(slice(i, i + batch_size)))
        logits.append(out.mask_logits)
        boxes.append(out.box)
    return torch.cat(logits), torch.cat(boxes)


def evaluate(model: SSPSAM, data: CachedSplit, batch_size: int = 64,
             return_masks: bool = False) -> tuple[MetricsReport, list[InstanceResult], np.ndarray | None]:
    logits, _ = predict_logits(model, data, batch_size)
    preds = binarize(logits[:, 0].numpy())
    gts = data.gt_masks[:, 0].numpy() > 0.5
    results = [evaluate_instance(sid, p, g, bool(nt)) for sid, p, g, nt in zip(data.ids, preds, gts, data.no_target.tolist())]
    return aggregate(results), results, preds if return_masks else None


@dataclass
class PhaseState:
    phase: str
    epoch: int = 0  # next epoch to run
    step: int = 0
    history: list[dict] = field(default_factory=list)


class Trainer:
    def __init__(self, cfg: RunConfig, backbones: Backbones, train_data: CachedSplit, val_data: CachedSplit | None,
                 out_dir: str | os.PathLike | None = None):
        self.cfg = cfg.validate()
        self.train_data = train_data
        self.val_data = val_data
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(cfg.train.seed)
        self.model = SSPSAM(backbones, cfg.model)
        backbones.freeze_encoders()
        self.optimizer: torch.optim.Optimizer | None = None
        self.state: PhaseState | None = None
        self.history: list[dict] = []
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            save_config(cfg, self.out_dir / "config.yaml")

    # ------------------------------------------------------------ freezing

    def decoder_frozen(self, phase: str, epoch: int) -> bool:
        return phase == "pretrain" or epoch < self.cfg.train.decoder_freeze_epochs

    def audit(self, phase: str, epoch: int = 0) -> dict[str, str]:
        """Classify every parameter into exactly one of the three freeze classes."""
        bb = self.model.backbones
        always = {id(p) for p in bb.encoder_parameters()}
        decoder = {id(p) for p in bb.mask_decoder.parameters()}
        frozen_decoder = self.decoder_frozen(phase, epoch)
        out = {}
        for name, p in self.model.named_parameters():
            if id(p) in always:
                out[name] = ALWAYS_FROZEN
            elif id(p) in decoder:
                out[name] = FROZEN_PHASE if frozen_decoder else TRAINABLE
            else:
                out[name] = TRAINABLE
        return out

    def apply_freeze(self, phase: str, epoch: int) -> dict[str, str]:
        classes = self.audit(phase, epoch)
        for name, p in self.model.named_parameters():
            p.requires_grad_(classes[name] == TRAINABLE)
        return classes

    def optimizer_params(self) -> list[torch.nn.Parameter]:
        always = {id(p) for p in self.model.backbones.encoder_parameters()}
        return [p for p in self.model.parameters() if id(p) not in always]

    # ------------------------------------------------------------ phases

    def epochs_for(self, phase: str) -> int:
        return self.cfg.train.pretrain_epochs if phase == "pretrain" else self.cfg.train.finetune_epochs

    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_data) / self.cfg.train.batch_size)

    def start_phase(self, phase: str) -> None:
        tc = self.cfg.train
        self.optimizer = torch.optim.AdamW(self.optimizer_params(), lr=tc.lr, weight_decay=tc.weight_decay)
        self.state = PhaseState(phase)

    def epoch_order(self, phase: str, epoch: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(self.cfg.train.seed * 1000 + PHASES.index(phase) * 100 + epoch)
        return torch.randperm(len(self.train_data), generator=gen)

    def train_step(self, batch: CachedSplit, phase: str, lr: float) -> dict:
        """One optimizer step; frozen parameters are untouched bit for bit."""
        loss_cfg = replace(self.cfg.loss, beta=0.0 if phase == "pretrain" else 1.0)
        self.model.train()
        out = self.model(batch.feats)
        logits = out.mask_logits
        if logits.requires_grad:
            logits.retain_grad()
        loss, parts = total_loss(logits, batch.gt_masks, out.box, batch.gt_boxes, loss_cfg)
        if not math.isfinite(parts["total"]):
            raise NumericalError(f"non-finite loss in {phase}: {parts}", parts)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        trainable = [p for p in self.model.parameters() if p.requires_grad and p.grad is not None]
        grad_norm = torch.nn.utils.clip_grad_norm_(trainable, self.cfg.train.grad_clip) if trainable else torch.tensor(0.0)
        self.optimizer.step()
        self.model.ssp.clamp_()
        parts["lr"] = lr
        parts["grad_norm"] = float(grad_norm)
        parts["mask_grad_norm"] = 0.0 if logits.grad is None else float(logits.grad.norm())
        return parts

    def run_epoch(self) -> dict:
        st = self.state
        tc = self.cfg.train
        classes = self.apply_freeze(st.phase, st.epoch)
        spe = self.steps_per_epoch()
        total_steps = spe * self.epochs_for(st.phase)
        order = self.epoch_order(st.phase, st.epoch)
        losses = []
        for i in range(0, len(order), tc.batch_size):
            batch = self.train_data.batch(order[i:i + tc.batch_size])
            lr = lr_schedule(st.step, total_steps, tc.warmup_epochs * spe, tc.lr)
            parts = self.train_step(batch, st.phase, lr)
            parts.update(phase=st.phase, epoch=st.epoch, step=st.step)
            self._log(parts)
            losses.append(parts["total"])
            st.step += 1
        entry = {"event": "epoch", "phase": st.phase, "epoch": st.epoch, "mean_total": float(np.mean(losses)),
                 "first_total": losses[0], "decoder_frozen": self.decoder_frozen(st.phase, st.epoch),
                 "n_trainable": sum(1 for c in classes.values() if c == TRAINABLE)}
        if st.phase == "finetune" and self.val_data is not None:
            report, _, _ = evaluate(self.model, self._val_subset(), tc.eval_batch_size)
            entry.update(val_giou=report.giou, val=report.to_flat())
        st.history.append(entry)
        self._log(entry)
        st.epoch += 1
        return entry

    def _val_subset(self) -> CachedSplit:
        n = self.cfg.train.max_val_samples
        if n is None or n >= len(self.val_data):
            return self.val_data
        return self.val_data.batch(torch.arange(n))

    def run_phase(self, phase: str) -> list[dict]:
        if self.state is None or self.state.phase != phase:
            self.start_phase(phase)
        self._log({"event": "audit", "phase": phase, "epoch": self.state.epoch,
                   "classes": self.apply_freeze(phase, self.state.epoch)})
        best = select_checkpoint(self.history)
        while self.state.epoch < self.epochs_for(phase):
            entry = self.run_epoch()
            self.history.append(entry)
            if self.out_dir is not None:
                self.save(self.out_dir / "last", entry.get("val_giou"))
                if entry.get("val_giou") is not None and select_checkpoint(self.history) is entry and entry is not best:
                    best = entry
                    self.save(self.out_dir / "best", entry["val_giou"])
        return self.state.history

    def run(self, phases: Sequence[str] = PHASES) -> list[dict]:
        for phase in phases:
            if self.epochs_for(phase) > 0:
                self.run_phase(phase)
        return self.history

    # ------------------------------------------------------------ persistence

    def _log(self, record: dict) -> None:
        if self.out_dir is None:
            return
        with open(self.out_dir / "train_log.jsonl", "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def save(self, path: str | os.PathLike, val_giou: float | None = None) -> Path:
        st = self.state
        trainer_state = {"phase": st.phase, "epoch": st.epoch, "step": st.step, "history": st.history,
                         "all_history": self.history}
        return save_checkpoint(path, self.model, self.cfg, st.phase, st.epoch - 1, val_giou, self.optimizer,
                               trainer_state)

    def load(self, path: str | os.PathLike, resume: bool = True) -> dict:
        """Load weights; with ``resume`` also restore the optimizer and the phase position."""
        manifest, blob = read_checkpoint(path)
        self.model.load_state_dict(blob["model"])
        self.model.backbones.freeze_encoders()
        ts = blob.get("trainer") or {}
        if resume and ts:
            self.start_phase(ts["phase"])
            if blob.get("optimizer") is not None:
                self.optimizer.load_state_dict(blob["optimizer"])
            self.state = PhaseState(ts["phase"], ts["epoch"], ts["step"], list(ts["history"]))
            self.history = list(ts.get("all_history", []))
        return manifest
