"""Fast numerical self-checks: channel statistics, KL oracle, finite-difference gradients."""

from __future__ import annotations

import math
import time
from typing import Callable, Dict, List, Tuple

import numpy as np
import torch

from .channel import ChannelSpec, RngStream, sample_gain, transmit
from .nets import DeepBroadcast, tiny_config
from .objective import LossWeights, broadcast_ib_loss, kl_to_standard_normal, l1_loss, cross_entropy

GROUPS = (
    ("extractor.", "extractor"),
    (".lcas.", "lca"),
    (".halve.", "tce_conv"),
    (".pfg.", "pfg"),
    ("cfe.gcfs.", "gcf"),
    ("cfe.fuse", "fusion"),
    ("receivers.", "heads"),
)


def parameter_group(name: str) -> str:
    for needle, group in GROUPS:
        if needle in name or name.startswith(needle):
            return group
    return "other"


def empirical_snr_db(spec: ChannelSpec, snr_db: float, n_symbols=10**6, seed=0) -> Tuple[float, float]:
    """(empirical SNR of the received noise vs faded signal, mean |h|^2) on a unit-power input."""
    gen = RngStream(seed, (0, f"selftest/{spec.kind}/{snr_db}")).torch()
    z = torch.randn(1, n_symbols, generator=gen, dtype=torch.float64)
    z = z / z.pow(2).mean().sqrt()
    spec = ChannelSpec(spec.kind, spec.rician_a, snr_db, spec.fading_mode, equalize=False)
    rx = transmit(z, spec, gen)
    signal = rx.values - rx.noise
    gain_power = float(rx.realization.h.abs().pow(2).mean())
    return 10 * math.log10(float(signal.pow(2).mean()) / float(rx.noise.pow(2).mean())), gain_power


def mean_gain_power(spec: ChannelSpec, n=10**6, seed=0) -> float:
    real = sample_gain(spec, n, RngStream(seed, (0, f"gain/{spec.kind}")), dtype=torch.float64)
    return float(real.h.abs().pow(2).mean())


def monte_carlo_kl(mu: np.ndarray, sigma: np.ndarray, n=10**6, seed=0) -> float:
    """E_p[log p(z) - log q(z)] with p = N(mu, sigma^2), q = N(0, 1), summed over dims."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for m, s in zip(mu, sigma):
        z = m + s * rng.standard_normal(n)
        log_p = -0.5 * ((z - m) / s) ** 2 - np.log(s) - 0.5 * np.log(2 * np.pi)
        log_q = -0.5 * z**2 - 0.5 * np.log(2 * np.pi)
        total += float(np.mean(log_p - log_q))
    return total


def _tiny_problem(seed=0):
    cfg = tiny_config()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DeepBroadcast(cfg).double()
    gen = torch.Generator().manual_seed(seed + 1)
    x = torch.rand(1, 3, cfg.image_size, cfg.image_size, generator=gen, dtype=torch.float64)
    label = torch.tensor([1])
    snrs = torch.tensor([[3.0, 7.0]], dtype=torch.float64)
    channels = [ChannelSpec("rayleigh", snr_db=3.0), ChannelSpec("rician", rician_a=2.0, snr_db=7.0)]
    weights = LossWeights([0.6, 0.4], beta=0.3)

    def loss_fn():
        model.train()
        tx = model.encode(x, snrs, generator=torch.Generator().manual_seed(seed + 2), sample=True)
        kls = [kl_to_standard_normal(s) for s in tx.stats]
        outs = []
        for i, (sig, spec) in enumerate(zip(tx.signals, channels)):
            rx = transmit(sig, spec, RngStream(seed, (i, "gradcheck")))
            outs.append(model.decode(rx.values, i))
        losses = [cross_entropy(outs[0], label), l1_loss(outs[1], x)]
        return broadcast_ib_loss(losses, kls, weights).total

    return model, loss_fn


def finite_difference_check(model: torch.nn.Module, loss_fn: Callable, eps=1e-6) -> Dict[str, float]:
    """Relative error ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||) per parameter group."""
    model.zero_grad()
    loss_fn().backward()
    auto: Dict[str, List[float]] = {}
    numeric: Dict[str, List[float]] = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            group = parameter_group(name)
            flat = p.view(-1)
            g = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
            for k in range(flat.numel()):
                orig = float(flat[k])
                flat[k] = orig + eps
                up = float(loss_fn())
                flat[k] = orig - eps
                down = float(loss_fn())
                flat[k] = orig
                auto.setdefault(group, []).append(float(g[k]))
                numeric.setdefault(group, []).append((up - down) / (2 * eps))
    out = {}
    for group in auto:
        a, n = np.array(auto[group]), np.array(numeric[group])
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-30)
        out[group] = float(np.linalg.norm(a - n) / denom)
    return out


def gradient_check(seed=0) -> Dict[str, float]:
    model, loss_fn = _tiny_problem(seed)
    return finite_difference_check(model, loss_fn)


def objective_gradient_check(seed=0, eps=1e-6) -> float:
    """Composite-loss slopes w.r.t. task losses and KLs versus central differences."""
    rng = np.random.default_rng(seed)
    weights = LossWeights([0.15, 0.15, 0.7], beta=1e-2)
    losses = torch.tensor(rng.uniform(0.1, 3, 3), dtype=torch.float64, requires_grad=True)
    kls = torch.tensor(rng.uniform(0.1, 30, 3), dtype=torch.float64, requires_grad=True)
    broadcast_ib_loss(losses, kls, weights).total.backward()
    worst = 0.0
    for vec, grad in ((losses, losses.grad), (kls, kls.grad)):
        for k in range(3):
            bump = torch.zeros(3, dtype=torch.float64)
            bump[k] = eps
            with torch.no_grad():
                if vec is losses:
                    up = broadcast_ib_loss(losses + bump, kls, weights).total
                    down = broadcast_ib_loss(losses - bump, kls, weights).total
                else:
                    up = broadcast_ib_loss(losses, kls + bump, weights).total
                    down = broadcast_ib_loss(losses, kls - bump, weights).total
            fd = float(up - down) / (2 * eps)
            worst = max(worst, abs(fd - float(grad[k])) / max(abs(fd), abs(float(grad[k])), 1e-30))
    return worst


def run_selftest(echo=print) -> bool:
    """Run the quick suite and report one line per check; returns overall pass."""
    ok = True

    def report(name, passed, detail, t0):
        nonlocal ok
        ok &= passed
        echo(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.1f}s)")

    t0 = time.perf_counter()
    worst = 0.0
    for kind in ("awgn", "rayleigh", "rician"):
        for snr in (0.0, 7.0, 10.0):
            emp, _ = empirical_snr_db(ChannelSpec(kind), snr, n_symbols=2 * 10**5)
            worst = max(worst, abs(emp - snr))
    report("channel SNR", worst < 0.2, f"max |empirical - configured| = {worst:.4f} dB", t0)

    t0 = time.perf_counter()
    powers = [mean_gain_power(ChannelSpec(k), n=2 * 10**5) for k in ("awgn", "rayleigh", "rician")]
    report("channel gain power", all(0.99 <= p <= 1.01 for p in powers), f"E|h|^2 = {np.round(powers, 4).tolist()}", t0)

    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for j in range(5):
        mu, sigma = rng.normal(0, 1, 4), rng.uniform(0.3, 2.0, 4)
        closed = float(kl_to_standard_normal(torch.tensor(mu), torch.tensor(sigma)))
        worst = max(worst, abs(closed - monte_carlo_kl(mu, sigma, n=2 * 10**5, seed=j)) / closed)
    report("KL closed form vs Monte Carlo", worst < 0.02, f"max relative error {worst:.4%}", t0)

    t0 = time.perf_counter()
    errs = gradient_check()
    worst_group = max(errs, key=errs.get)
    report("gradient check", max(errs.values()) < 1e-4,
           f"worst group {worst_group} rel err {errs[worst_group]:.2e}", t0)

    t0 = time.perf_counter()
    err = objective_gradient_check()
    report("objective slopes", err < 1e-4, f"rel err {err:.2e}", t0)
    return ok
