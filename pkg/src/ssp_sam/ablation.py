"""Multi-seed ablation runs over config overrides, summarised as mean/std validation gIoU."""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from ssp_sam.backbones import Backbones
from ssp_sam.config import RunConfig, apply_overrides, check_override_keys
from ssp_sam.errors import ConfigError, NumericalError
from ssp_sam.trainer import CachedSplit, Trainer, select_checkpoint

log = logging.getLogger(__name__)


@dataclass
class AblationSpec:
    name: str
    overrides: dict[str, Any] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("ablation variant needs a name")
        if not self.seeds:
            raise ConfigError(f"variant {self.name!r} has no seeds")
        check_override_keys(self.overrides)


@dataclass
class SeedRun:
    seed: int
    config_hash: str
    giou: float | None
    status: str = "ok"
    error: str | None = None


@dataclass
class VariantResult:
    name: str
    runs: list[SeedRun]

    @property
    def gious(self) -> list[float]:
        return [r.giou for r in self.runs if r.status == "ok"]

    @property
    def mean(self) -> float | None:
        return float(np.mean(self.gious)) if self.gious else None

    @property
    def std(self) -> float | None:
        g = self.gious
        return float(np.std(g, ddof=1)) if len(g) > 1 else (0.0 if g else None)

    @property
    def status(self) -> str:
        ok = len(self.gious)
        return "ok" if ok == len(self.runs) else ("failed" if ok == 0 else "partial")

    def to_dict(self) -> dict:
        return {"name": self.name, "mean_giou": self.mean, "std_giou": self.std, "status": self.status,
                "runs": [asdict(r) for r in self.runs]}


def load_specs(path: str | os.PathLike) -> tuple[dict[str, Any], list[AblationSpec]]:
    """Read ``ablations.json``: ``{"base": {key: value}, "variants": [{"name", "overrides", "seeds"}]}``.

    A bare list of variants is accepted too.
    """
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, list):
        raw = {"variants": raw}
    if not isinstance(raw, dict) or not isinstance(raw.get("variants"), list):
        raise ConfigError(f"{path}: expected a 'variants' list")
    base = raw.get("base", {}) or {}
    check_override_keys(base)
    specs = [AblationSpec(v["name"], v.get("overrides", {}), v.get("seeds", [0, 1, 2])) for v in raw["variants"]]
    if len({s.name for s in specs}) != len(specs):
        raise ConfigError("variant names must be unique")
    return base, specs


def variant_config(base: RunConfig, spec: AblationSpec, seed: int) -> RunConfig:
    cfg = copy.deepcopy(base)
    apply_overrides(cfg, spec.overrides)
    cfg.train.seed = seed
    return cfg.validate()


def run_seed(cfg: RunConfig, backbones: Backbones, train: CachedSplit, val: CachedSplit,
             out_dir: str | os.PathLike | None = None) -> float:
    """Train one configuration and return its selected validation gIoU."""
    # the decoder trains after its freeze window, so every run gets its own copy
    trainer = Trainer(cfg, copy.deepcopy(backbones), train, val, out_dir)
    history = trainer.run()
    best = select_checkpoint(history)
    if best is None:
        raise NumericalError("no finite validation gIoU recorded")
    return float(best["val_giou"])


def run_ablation(specs: Sequence[AblationSpec], base: RunConfig, backbones: Backbones, train: CachedSplit,
                 val: CachedSplit, out_dir: str | os.PathLike | None = None,
                 runner: Callable[..., float] = run_seed) -> list[VariantResult]:
    """Run every variant for each of its seeds. Diverging runs are recorded and skipped."""
    results = []
    for spec in specs:
        runs = []
        for seed in spec.seeds:
            cfg = variant_config(base, spec, seed)
            digest = cfg.digest()
            run_dir = Path(out_dir) / spec.name / f"seed{seed}" if out_dir is not None else None
            log.info("variant %s seed %d config %s", spec.name, seed, digest)
            try:
                giou = runner(cfg, backbones, train, val, run_dir)
                if not np.isfinite(giou):
                    raise NumericalError(f"non-finite gIoU {giou}")
                runs.append(SeedRun(seed, digest, giou))
            except NumericalError as exc:
                log.warning("variant %s seed %d failed: %s", spec.name, seed, exc)
                runs.append(SeedRun(seed, digest, None, "failed", str(exc)))
        results.append(VariantResult(spec.name, runs))
    if out_dir is not None:
        write_results(results, out_dir)
    return results


def format_table(results: Sequence[VariantResult]) -> str:
    header = ("variant", "mean_giou", "std", "seeds", "status")
    rows = [header]
    for r in results:
        rows.append((r.name, "-" if r.mean is None else f"{r.mean:.4f}", "-" if r.std is None else f"{r.std:.4f}",
                     f"{len(r.gious)}/{len(r.runs)}", r.status))
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows) + "\n"


def write_results(results: Sequence[VariantResult], out_dir: str | os.PathLike) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt = out / "ablation_results.txt"
    txt.write_text(format_table(results))
    js = out / "ablation_results.json"
    js.write_text(json.dumps([r.to_dict() for r in results], indent=2) + "\n")
    return txt, js
