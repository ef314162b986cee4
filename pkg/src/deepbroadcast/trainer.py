"""Training loop: per-batch SNR sampling, broadcast through simulated channels, IB loss, update.

All randomness is drawn from named :class:`RngStream` streams keyed by the
epoch, so a run resumed from an epoch-``k`` checkpoint replays exactly the
draws an uninterrupted run would have made.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .channel import RngStream, transmit
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, TrainConfig, config_from_dict, dump_config
from .data import Dataset, batches
from .nets import ModelConfig, build_variant
from .objective import broadcast_ib_loss, kl_to_standard_normal, task_loss

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainingDiverged", "ConfigMismatch", "sample_snrs", "train", "resume", "build_model"]


class TrainingDiverged(RuntimeError):
    pass


class ConfigMismatch(ValueError):
    pass


def sample_snrs(rng: np.random.Generator, snr_list, n_users: int, mode="discrete") -> np.ndarray:
    """One SNR per user, drawn independently."""
    if mode == "continuous":
        return rng.uniform(min(snr_list), max(snr_list), size=n_users)
    return np.asarray(snr_list, dtype=np.float64)[rng.integers(0, len(snr_list), size=n_users)]


def build_model(cfg: ExperimentConfig, variant: str, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build_variant(variant, cfg.model)


def _optimizer_state(model, opt) -> dict:
    slots, step = {}, 0
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if st:
            slots[name] = {"exp_avg": st["exp_avg"], "exp_avg_sq": st["exp_avg_sq"]}
            step = int(st["step"])
    return {"step": step, "slots": slots}


def _restore_optimizer(model, opt, saved: dict):
    for name, p in model.named_parameters():
        if name in saved["slots"]:
            s = saved["slots"][name]
            opt.state[p] = {
                "step": torch.tensor(float(saved["step"])),
                "exp_avg": s["exp_avg"].clone(),
                "exp_avg_sq": s["exp_avg_sq"].clone(),
            }


class _Run:
    def __init__(self, cfg: ExperimentConfig, variant: str, ds: Dataset, run_dir: Optional[Path]):
        self.cfg, self.variant, self.run_dir = cfg, variant, run_dir
        tc = cfg.trainer
        n = tc.max_train_items
        self.images, self.labels = ds.train_images[:n], ds.train_labels[:n]
        self.model = build_model(cfg, variant, tc.seed)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=tc.lr)
        self.epoch = 0
        self.metrics = []

    def stream(self, user, purpose):
        return RngStream(self.cfg.trainer.seed, (user, f"{purpose}/{self.epoch}"))

    def run_epoch(self) -> dict:
        self.epoch += 1
        tc, model, cfg = self.cfg.trainer, self.model, self.cfg
        for g in self.opt.param_groups:
            g["lr"] = tc.lr * tc.lr_decay ** (self.epoch - 1)
        model.train()
        n_users = cfg.model.n_users
        shuffle = self.stream(-1, "shuffle").numpy()
        snr_rng = self.stream(-1, "snr").numpy()
        latent_gen = self.stream(-1, "latent").torch()
        chan_gens = [self.stream(i, "channel").torch() for i in range(n_users)]

        t0 = time.perf_counter()
        sums = {"loss": 0.0, "task": np.zeros(n_users), "kl": np.zeros(n_users), "correct": np.zeros(n_users)}
        seen, steps = 0, 0
        for x, targets in batches(self.images, self.labels, cfg.tasks, tc.batch_size, shuffle):
            snrs = sample_snrs(snr_rng, tc.snr_list, n_users, tc.snr_sampling)
            breakdown, outputs = self.step_loss(x, targets, snrs, latent_gen, chan_gens)
            if not torch.isfinite(breakdown.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {self.epoch} step {steps}: snrs={snrs.tolist()} "
                    f"breakdown={breakdown.as_dict()}"
                )
            self.opt.zero_grad(set_to_none=True)
            breakdown.total.backward()
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            self.opt.step()

            b = x.shape[0]
            seen += b
            steps += 1
            sums["loss"] += float(breakdown.total.detach()) * b
            sums["task"] += breakdown.task_losses.detach().numpy() * b
            sums["kl"] += breakdown.kls.detach().numpy() * b
            for i, (out, task) in enumerate(zip(outputs, cfg.tasks)):
                if task.kind == "classify":
                    sums["correct"][i] += float((out.argmax(-1) == targets[i]).sum())

        rec = {
            "epoch": self.epoch,
            "variant": self.variant,
            "loss": sums["loss"] / seen,
            "task_losses": (sums["task"] / seen).tolist(),
            "kls": (sums["kl"] / seen).tolist(),
            "train_accuracy": {
                t.name: sums["correct"][i] / seen for i, t in enumerate(cfg.tasks) if t.kind == "classify"
            },
            "lr": self.opt.param_groups[0]["lr"],
            "steps": steps,
            "wall_time": time.perf_counter() - t0,
        }
        self.metrics.append(rec)
        log.info("epoch %d loss %.5f %s", self.epoch, rec["loss"], rec["train_accuracy"])
        if self.run_dir is not None:
            with open(self.run_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            if self.epoch % tc.checkpoint_every == 0:
                save_checkpoint(self.checkpoint(), self.run_dir / "checkpoint.dbc")
        return rec

    def step_loss(self, x, targets, snrs, latent_gen=None, chan_gens=None):
        cfg, model = self.cfg, self.model
        n_users = cfg.model.n_users
        snr_mat = torch.as_tensor(snrs, dtype=x.dtype).unsqueeze(0).expand(x.shape[0], -1)
        tx = model.encode(x, snr_mat, generator=latent_gen)
        if tx.stats is not None:
            kls = [kl_to_standard_normal(s) for s in tx.stats]
        else:
            kls = [torch.zeros((), dtype=x.dtype)] * n_users
        losses, outputs = [], []
        for i, (signal, spec, task) in enumerate(zip(tx.signals, cfg.channels, cfg.tasks)):
            rx = transmit(signal, spec, chan_gens[i] if chan_gens else None, snr_db=float(snrs[i]))
            out = model.decode(rx.values, i)
            outputs.append(out)
            losses.append(task_loss(out, targets[i], task.kind))
        return broadcast_ib_loss(losses, kls, cfg.loss), outputs

    def checkpoint(self) -> Checkpoint:
        exp = self.cfg.to_dict()
        return Checkpoint(
            variant=self.variant,
            model_config=dataclasses.asdict(self.cfg.model),
            state={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            epoch=self.epoch,
            experiment=exp,
            metrics=list(self.metrics),
            optimizer=_optimizer_state(self.model, self.opt),
        )


def new_run_dir(cfg: ExperimentConfig, variant: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = Path(cfg.output_dir) / f"{variant}-{cfg.digest()}-{stamp}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def train(cfg: ExperimentConfig, ds: Dataset, variant: Optional[str] = None, run_dir=None,
          epochs: Optional[int] = None) -> Checkpoint:
    """Train ``variant`` (default: first in ``cfg.variants``) for ``cfg.trainer.epochs`` epochs.

    With ``run_dir`` (or ``run_dir=True`` for a fresh hashed directory) the resolved
    config, a JSON-lines metrics log and checkpoints are written there.
    """
    variant = variant or cfg.variants[0]
    if run_dir is True:
        run_dir = new_run_dir(cfg, variant)
    elif run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    if run_dir is not None:
        dump_config(cfg, run_dir / "config.yaml")
    run = _Run(cfg, variant, ds, run_dir)
    for _ in range(epochs or cfg.trainer.epochs):
        run.run_epoch()
    ckpt = run.checkpoint()
    if run_dir is not None:
        save_checkpoint(ckpt, run_dir / "checkpoint.dbc")
    return ckpt


def _diff(a, b, path=""):
    if isinstance(a, dict) and isinstance(b, dict):
        out = []
        for k in sorted(set(a) | set(b)):
            out += _diff(a.get(k), b.get(k), f"{path}.{k}" if path else k)
        return out
    return [] if a == b else [f"{path}: {a!r} != {b!r}"]


def resume(ckpt, ds: Dataset, epochs: int = 1, cfg: Optional[ExperimentConfig] = None, variant=None,
           run_dir=None) -> Checkpoint:
    """Continue training ``ckpt`` (a Checkpoint or path) for ``epochs`` more epochs.

    ``cfg`` / ``variant``, when given, must match what the checkpoint was trained
    with (apart from epoch count and output locations); otherwise the run is refused.
    """
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if variant is not None and variant != ckpt.variant:
        raise ConfigMismatch(f"checkpoint holds variant {ckpt.variant!r}, refusing to resume as {variant!r}")
    stored = config_from_dict(ckpt.experiment)
    if cfg is not None:
        a, b = stored.to_dict(), cfg.to_dict()
        for key in ("output_dir", "data_dir", "eval"):
            a.pop(key, None)
            b.pop(key, None)
        a["trainer"].pop("epochs")
        b["trainer"].pop("epochs")
        diff = _diff(a, b)
        if diff:
            raise ConfigMismatch("config differs from checkpoint:\n  " + "\n  ".join(diff))
    else:
        cfg = stored
    if ModelConfig(**ckpt.model_config) != cfg.model:
        raise ConfigMismatch("checkpoint model_config does not match experiment model")

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, ckpt.variant, ds, run_dir)
    run.model.load_state_dict(ckpt.state)
    if ckpt.optimizer is not None:
        _restore_optimizer(run.model, run.opt, ckpt.optimizer)
    run.epoch = ckpt.epoch
    run.metrics = list(ckpt.metrics)
    for _ in range(epochs):
        run.run_epoch()
    out = run.checkpoint()
    if run_dir is not None:
        save_checkpoint(out, run_dir / "checkpoint.dbc")
    return out
