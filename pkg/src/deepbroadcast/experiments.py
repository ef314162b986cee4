"""Train every variant of an experiment case, sweep it and collect the results."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Optional

from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import Dataset, load_cifar10, synthetic_dataset
from .evaluation import SweepResult, sweep
from .plotting import emit_plots
from .trainer import train

log = logging.getLogger(__name__)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "synthetic":
        return synthetic_dataset(seed=cfg.trainer.seed)
    return load_cifar10(cfg.data_dir)


def sweep_checkpoint(ckpt: Checkpoint, cfg: ExperimentConfig, ds: Dataset, grid=None, repeats=None) -> SweepResult:
    model = ckpt.build_model()
    n = cfg.eval.max_test_items
    return sweep(
        model, ds.test_images[:n], ds.test_labels[:n], cfg.tasks, cfg.channels,
        grid if grid is not None else cfg.eval.grid,
        seed=cfg.trainer.seed, repeats=repeats or cfg.eval.repeats, batch_size=cfg.eval.batch_size,
        variant=ckpt.variant, inf_csi_db=max(cfg.trainer.snr_list),
    )


def run_case(cfg: ExperimentConfig, ds: Dataset, out_dir=None, variants=None) -> Dict[str, SweepResult]:
    """Train and sweep each variant; with ``out_dir`` write run dirs, CSV and charts."""
    out_dir = Path(out_dir or cfg.output_dir) / cfg.preset
    results, combined = {}, SweepResult()
    for variant in variants or cfg.variants:
        log.info("training %s (%s)", variant, cfg.preset)
        ckpt = train(cfg, ds, variant=variant, run_dir=out_dir / variant)
        results[variant] = sweep_checkpoint(ckpt, cfg, ds)
        combined.extend(results[variant])
    emit_plots(combined, out_dir)
    return results


def combined(results: Dict[str, SweepResult], variants: Optional[list] = None) -> SweepResult:
    out = SweepResult()
    for v in variants or results:
        out.extend(SweepResult(list(results[v].records)))
    return out
