"""SNR sweeps, accuracy / PSNR metrics and cross-variant comparison."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from .channel import ChannelSpec, RngStream, transmit
from .data import TaskSpec, batches

CSV_COLUMNS = ("variant", "user", "task", "snr_db", "metric", "value", "n", "seed")
PSNR_CAP = 100.0


@dataclass
class MetricsRecord:
    variant: str
    user: int
    task: str
    snr_db: float
    metric: str  # accuracy | psnr
    value: float
    n_samples: int
    seed: int
    std: float = 0.0

    def __post_init__(self):
        if self.metric == "accuracy" and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"accuracy {self.value} outside [0, 1]")

    @property
    def key(self):
        return (self.variant, self.user, self.task, self.metric)


@dataclass
class SweepResult:
    records: List[MetricsRecord] = field(default_factory=list)

    def extend(self, other: "SweepResult") -> "SweepResult":
        self.records.extend(other.records)
        return self

    def curves(self) -> Dict[tuple, List[MetricsRecord]]:
        out = defaultdict(list)
        for r in sorted(self.records, key=lambda r: (r.variant, r.user, r.snr_db)):
            out[r.key].append(r)
        return dict(out)

    def average(self, variant: str, user: int, metric: Optional[str] = None) -> float:
        """Arithmetic mean over the SNR grid (the legend number)."""
        vals = [r.value for r in self.records
                if r.variant == variant and r.user == user and (metric is None or r.metric == metric)]
        if not vals:
            raise KeyError((variant, user, metric))
        return float(np.mean(vals))

    def value(self, variant: str, user: int, snr_db: float) -> float:
        for r in self.records:
            if r.variant == variant and r.user == user and r.snr_db == snr_db:
                return r.value
        raise KeyError((variant, user, snr_db))

    @property
    def variants(self) -> List[str]:
        return sorted({r.variant for r in self.records})

    def grid(self, variant=None) -> List[float]:
        return sorted({r.snr_db for r in self.records if variant is None or r.variant == variant})


def psnr_per_image(pred: torch.Tensor, target: torch.Tensor, cap: float = PSNR_CAP) -> torch.Tensor:
    """PSNR of [0, 1]-scaled images, one value per image; zero MSE gives ``cap``."""
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes differ")
    mse = (pred.double() - target.double()).pow(2).flatten(1).mean(dim=1)
    val = -10.0 * torch.log10(mse)
    return torch.clamp(torch.where(mse == 0, torch.full_like(val, cap), val), max=cap)


def psnr(pred, target, cap: float = PSNR_CAP) -> float:
    return float(psnr_per_image(pred, target, cap).mean())


def _csi(s: float, inf_csi_db: float) -> float:
    return s if math.isfinite(s) else inf_csi_db


@torch.no_grad()
def sweep(model, images, labels10, tasks: Sequence[TaskSpec], channels: Sequence[ChannelSpec], snr_grid,
          seed: int = 0, repeats: int = 5, batch_size: int = 500, users: Optional[Iterable[int]] = None,
          variant: Optional[str] = None, inf_csi_db: float = 19.0) -> SweepResult:
    """Evaluate every user over ``snr_grid`` (all users' channels at the same SNR).

    Latents are deterministic (the mean) at evaluation.  Each grid point is run
    ``repeats`` times with independent channel draws; the record holds the mean
    and the standard deviation across repeats.
    """
    model.eval()
    n_users = len(tasks)
    users = list(range(n_users)) if users is None else list(users)
    for u in users:
        if not 0 <= u < n_users:
            raise IndexError(f"unknown user index {u}")
    variant = variant or getattr(model, "variant", "model")
    out = SweepResult()
    n = len(labels10)
    for s in snr_grid:
        s = float(s)
        gens = {(u, r): RngStream(seed, (u, f"eval/{s}/{r}")).torch() for u in users for r in range(repeats)}
        score = np.zeros((n_users, repeats))
        for x, targets in batches(images, labels10, tasks, batch_size):
            tx = model.encode(x, torch.full((x.shape[0], n_users), _csi(s, inf_csi_db)), sample=False)
            for u in users:
                for r in range(repeats):
                    rx = transmit(tx.signals[u], channels[u], gens[(u, r)], snr_db=s)
                    y = model.decode(rx.values, u)
                    if tasks[u].kind == "classify":
                        score[u, r] += float((y.argmax(-1) == targets[u]).sum())
                    else:
                        score[u, r] += float(psnr_per_image(y, targets[u]).sum())
        for u in users:
            vals = score[u] / n
            out.records.append(MetricsRecord(
                variant, u, tasks[u].name, s, "accuracy" if tasks[u].kind == "classify" else "psnr",
                float(vals.mean()), n, seed, float(vals.std()),
            ))
    return out


def evaluate_accuracy(model, images, labels10, tasks, channels, user: int, snr_grid, seed=0, repeats=5,
                      **kw) -> List[MetricsRecord]:
    if tasks[user].kind != "classify":
        raise ValueError(f"user {user} is not a classification task")
    return sweep(model, images, labels10, tasks, channels, snr_grid, seed, repeats, users=[user], **kw).records


def evaluate_psnr(model, images, labels10, tasks, channels, user: int, snr_grid, seed=0, repeats=1,
                  **kw) -> List[MetricsRecord]:
    if tasks[user].kind != "recover":
        raise ValueError(f"user {user} is not a recovery task")
    return sweep(model, images, labels10, tasks, channels, snr_grid, seed, repeats, users=[user], **kw).records


@torch.no_grad()
def noiseless_accuracy(model, images, labels10, tasks, user: int, batch_size=500, csi_db=19.0) -> float:
    """Accuracy with the channel bypassed entirely (receiver sees the transmitted symbols)."""
    model.eval()
    correct = 0
    for x, targets in batches(images, labels10, tasks, batch_size):
        tx = model.encode(x, torch.full((x.shape[0], len(tasks)), csi_db), sample=False)
        correct += int((model.decode(tx.signals[user], user).argmax(-1) == targets[user]).sum())
    return correct / len(labels10)


# --- comparison ---------------------------------------------------------------

@dataclass
class Comparison:
    reference: str
    averages: List[dict]  # variant, user, task, metric, average
    gaps: List[dict]  # variant, reference, user, task, metric, snr_db, gap

    def average(self, variant, user):
        for row in self.averages:
            if row["variant"] == variant and row["user"] == user:
                return row["average"]
        raise KeyError((variant, user))

    def gap(self, variant, user, snr_db):
        for row in self.gaps:
            if row["variant"] == variant and row["user"] == user and row["snr_db"] == snr_db:
                return row["gap"]
        raise KeyError((variant, user, snr_db))

    def format(self) -> str:
        users = sorted({(r["user"], r["task"], r["metric"]) for r in self.averages})
        head = ["variant"] + [f"user{u + 1}:{t}" for u, t, _ in users]
        lines = ["  ".join(f"{h:>16}" for h in head)]
        for v in dict.fromkeys(r["variant"] for r in self.averages):
            cells = [v]
            for u, t, m in users:
                avg = next(r["average"] for r in self.averages if r["variant"] == v and r["user"] == u)
                cells.append(f"{100 * avg:.2f}%" if m == "accuracy" else f"{avg:.2f} dB")
            lines.append("  ".join(f"{c:>16}" for c in cells))
        return "\n".join(lines)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "variant", "reference", "user", "task", "metric", "snr_db", "value"])
            for r in self.averages:
                w.writerow(["average", r["variant"], "", r["user"], r["task"], r["metric"], "", repr(r["average"])])
            for r in self.gaps:
                w.writerow(["gap", r["variant"], r["reference"], r["user"], r["task"], r["metric"],
                            repr(r["snr_db"]), repr(r["gap"])])
        return path


def compare_variants(results: Sequence[SweepResult], reference: Optional[str] = None) -> Comparison:
    """Per-task average table plus per-SNR gaps ``variant - reference``."""
    merged = SweepResult()
    for res in results:
        merged.extend(SweepResult(list(res.records)))
    if not merged.records:
        raise ValueError("nothing to compare")
    variants = list(dict.fromkeys(r.variant for r in merged.records))
    reference = reference or variants[0]
    if reference not in variants:
        raise ValueError(f"reference variant {reference!r} not in results")

    layout = {}
    for v in variants:
        layout[v] = sorted((r.user, r.task, r.metric, r.snr_db) for r in merged.records if r.variant == v)
    ref_layout = layout[reference]
    for v, lay in layout.items():
        if lay != ref_layout:
            raise ValueError(f"mismatched grids: {v!r} and {reference!r} differ in users, tasks or SNR points")

    averages = []
    for v in variants:
        for (var, user, task, metric), recs in merged.curves().items():
            if var == v:
                averages.append({"variant": v, "user": user, "task": task, "metric": metric,
                                 "average": float(np.mean([r.value for r in recs]))})
    gaps = []
    for v in variants:
        if v == reference:
            continue
        for user, task, metric, s in ref_layout:
            gaps.append({"variant": v, "reference": reference, "user": user, "task": task, "metric": metric,
                         "snr_db": s, "gap": merged.value(v, user, s) - merged.value(reference, user, s)})
    return Comparison(reference, averages, gaps)


# --- CSV ----------------------------------------------------------------------

def write_metrics_csv(result: SweepResult, path) -> Path:
    """One row per record plus a ``<metric>_std`` row carrying the spread across repeats."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in sorted(result.records, key=lambda r: (r.variant, r.user, r.snr_db)):
            w.writerow([r.variant, r.user, r.task, repr(r.snr_db), r.metric, repr(r.value), r.n_samples, r.seed])
            w.writerow([r.variant, r.user, r.task, repr(r.snr_db), f"{r.metric}_std", repr(r.std), r.n_samples, r.seed])
    return path


def read_metrics_csv(path) -> SweepResult:
    rows = list(csv.DictReader(open(path, newline="")))
    if rows and tuple(rows[0].keys()) != CSV_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {tuple(rows[0].keys())}")
    stds = {}
    out = SweepResult()
    for row in rows:
        key = (row["variant"], int(row["user"]), float(row["snr_db"]))
        if row["metric"].endswith("_std"):
            stds[key] = float(row["value"])
            continue
        out.records.append(MetricsRecord(row["variant"], int(row["user"]), row["task"], float(row["snr_db"]),
                                         row["metric"], float(row["value"]), int(row["n"]), int(row["seed"])))
    for r in out.records:
        r.std = stds.get((r.variant, r.user, r.snr_db), 0.0)
    return out
