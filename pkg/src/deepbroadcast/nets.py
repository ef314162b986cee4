"""Transmitter / receiver networks for task-oriented broadcast and the baseline systems.

Every system exposes the same two-step interface used by the trainer and the
evaluator::

    tx = model.encode(x, snrs)          # per-user signals (+ latent stats)
    y_i = model.decode(zhat_i, i)       # user i's task output

Broadcast systems hand the *same* tensor to every user; the unicast baseline
sends each user its own shorter signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .channel import power_normalize
from .objective import LatentStats

VARIANTS = ("deepbroadcast", "deepbroadcast_e2e", "mtoc", "mtoc_wlca", "mtoc_wgcf", "unicast", "deeprc")


class ModelConfigError(ValueError):
    pass


@dataclass
class HeadSpec:
    kind: str = "classify"  # classify | recover
    n_label: int = 10

    def __post_init__(self):
        if self.kind not in ("classify", "recover"):
            raise ModelConfigError(f"unknown head kind {self.kind!r}")
        if self.kind == "classify" and self.n_label < 2:
            raise ModelConfigError("classification heads need n_label >= 2")


@dataclass
class ModelConfig:
    n_users: int = 2
    heads: List[HeadSpec] = field(default_factory=lambda: [HeadSpec(), HeadSpec()])
    c1: int = 32
    h1: int = 8
    w1: int = 8
    c_tx: int = 16
    image_size: int = 32
    image_channels: int = 3
    extractor_width: int = 64
    decoder_width: int = 256
    gcf_hidden: int = 64
    fusion_hidden: int = 256
    mtoc_hidden: int = 512
    snr_scale: float = 0.1  # dB values are multiplied by this before entering any layer
    softmax_axis: str = "channel"  # channel | spatial
    deterministic_latent: bool = False

    def __post_init__(self):
        self.heads = [h if isinstance(h, HeadSpec) else HeadSpec(**h) for h in self.heads]
        if self.n_users < 1:
            raise ModelConfigError("n_users must be >= 1")
        if len(self.heads) != self.n_users:
            raise ModelConfigError(f"{len(self.heads)} heads for {self.n_users} users")
        if (self.c1 * self.h1 * self.w1) % 4:
            raise ModelConfigError("c1*h1*w1 must be divisible by 4")
        if self.c1 % 2:
            raise ModelConfigError("c1 must be even (the TCE conv halves the channel count)")
        if self.c_tx < 2 or self.c_tx % 2:
            raise ModelConfigError("c_tx must be even")
        if self.h1 != self.w1:
            raise ModelConfigError("only square feature maps are supported")
        ratio = self.image_size // self.h1
        if self.image_size % self.h1 or ratio & (ratio - 1):
            raise ModelConfigError("image_size / h1 must be a power of two")
        if self.softmax_axis not in ("channel", "spatial"):
            raise ModelConfigError(f"unknown softmax_axis {self.softmax_axis!r}")

    @property
    def c2(self) -> int:
        return self.c1 * self.h1 * self.w1 // 4

    @property
    def c3(self) -> int:
        return self.c2

    @property
    def n_down(self) -> int:
        return int(math.log2(self.image_size // self.h1))


def _snr_batch(snr, batch: int, like: torch.Tensor) -> torch.Tensor:
    snr = torch.as_tensor(snr, dtype=like.dtype)
    if snr.dim() == 0:
        snr = snr.expand(batch)
    return snr


class SemanticExtractor(nn.Module):
    """Stride-2 conv blocks down to (h1, w1), then two stride-1 blocks ending at c1 channels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        width = cfg.extractor_width
        layers, ch = [], cfg.image_channels
        for _ in range(cfg.n_down):
            layers += [nn.Conv2d(ch, width, 3, stride=2, padding=1), nn.ReLU()]
            ch = width
        layers += [nn.Conv2d(ch, width, 3, padding=1), nn.ReLU(), nn.Conv2d(width, cfg.c1, 3, padding=1)]
        self.net = nn.Sequential(*layers)
        self.out_shape = (cfg.c1, cfg.h1, cfg.w1)
        self.in_shape = (cfg.image_channels, cfg.image_size, cfg.image_size)

    def forward(self, x):
        if tuple(x.shape[1:]) != self.in_shape:
            raise ModelConfigError(f"expected images of shape {self.in_shape}, got {tuple(x.shape[1:])}")
        return self.net(x)


class LocalChannelAttention(nn.Module):
    """1x1-conv attention modulating a feature map by one user's SNR, with a residual path."""

    def __init__(self, c1: int, softmax_axis="channel", snr_scale=0.1):
        super().__init__()
        self.rho = nn.Conv2d(c1, c1, 1)
        self.g = nn.Conv2d(c1, c1, 1)
        self.eps = nn.Conv2d(1, c1, 1)
        self.out = nn.Conv2d(c1, c1, 1)
        self.softmax_axis = softmax_axis
        self.snr_scale = snr_scale

    def attention(self, f, snr):
        b, c, h, w = f.shape
        plane = (_snr_batch(snr, b, f) * self.snr_scale).view(b, 1, 1, 1).expand(b, 1, h, w)
        scores = self.eps(plane) * self.rho(f)
        if self.softmax_axis == "channel":
            return torch.softmax(scores, dim=1)
        return torch.softmax(scores.reshape(b, c, h * w), dim=-1).reshape(b, c, h, w)

    def forward(self, f, snr):
        return self.out(self.attention(f, snr) * self.g(f)) + f


class ProbabilityFeatureGenerator(nn.Module):
    def __init__(self, d_in: int, c2: int):
        super().__init__()
        self.mu = nn.Linear(d_in, c2)
        self.sigma = nn.Linear(d_in, c2)

    def forward(self, h) -> LatentStats:
        return LatentStats(self.mu(h), F.softplus(self.sigma(h)) + 1e-6)


class TaskChannelEncoder(nn.Module):
    """Per-user compressor: LCA stack, channel-halving conv, then a latent head.

    ``stochastic`` selects the (mu, sigma) head; otherwise a single affine map
    produces a deterministic latent.
    """

    def __init__(self, cfg: ModelConfig, use_lca=True, stochastic=True, n_lca=3):
        super().__init__()
        self.lcas = nn.ModuleList(
            LocalChannelAttention(cfg.c1, cfg.softmax_axis, cfg.snr_scale) for _ in range(n_lca if use_lca else 0)
        )
        self.halve = nn.Conv2d(cfg.c1, cfg.c1 // 2, 3, padding=1)
        d_half = cfg.c1 * cfg.h1 * cfg.w1 // 2
        self.stochastic = stochastic
        if stochastic:
            self.pfg = ProbabilityFeatureGenerator(d_half, cfg.c2)
        else:
            self.proj = nn.Linear(d_half, cfg.c2)

    def features(self, f, snr):
        for lca in self.lcas:
            f = lca(f, snr)
        return F.relu(self.halve(f)).flatten(1)

    def forward(self, f, snr):
        h = self.features(f, snr)
        return self.pfg(h) if self.stochastic else self.proj(h)


def reparameterize(stats: LatentStats, lam: torch.Tensor) -> torch.Tensor:
    if lam.shape[-1] != stats.mu.shape[-1]:
        raise ValueError(f"lambda has length {lam.shape[-1]}, expected {stats.mu.shape[-1]}")
    return stats.mu + stats.sigma * lam


class GlobalChannelFineTuning(nn.Module):
    """Gated key/value/query modulation of one user's latent by the full SNR vector."""

    def __init__(self, c2: int, n_users: int, hidden: int, snr_scale=0.1):
        super().__init__()
        self.ln = nn.LayerNorm(c2)
        self.key = nn.Linear(c2, c2)
        self.value = nn.Linear(c2, c2)
        self.query = nn.Sequential(
            nn.Linear(n_users, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, c2),
        )
        self.out = nn.Linear(c2, c2)
        self.n_users = n_users
        self.snr_scale = snr_scale

    def gates(self, zr, snrs):
        if snrs.shape[-1] != self.n_users:
            raise ValueError(f"SNR vector has {snrs.shape[-1]} entries, expected {self.n_users}")
        if zr.shape[-1] != self.ln.normalized_shape[0]:
            raise ValueError(f"latent has length {zr.shape[-1]}, expected {self.ln.normalized_shape[0]}")
        ln = self.ln(zr)
        m_k = torch.sigmoid(self.key(ln))
        m_v = self.value(ln)
        m_q = torch.sigmoid(self.query(snrs * self.snr_scale))
        return m_k, m_v, m_q

    def forward(self, zr, snrs):
        m_k, m_v, m_q = self.gates(zr, snrs)
        return self.out(zr + m_v * m_k * m_q)


class FeatureFusionEncoder(nn.Module):
    """Per-user fine-tuning, concatenation, two affine maps to c_tx, unit-power normalization."""

    def __init__(self, cfg: ModelConfig, use_gcf=True):
        super().__init__()
        self.gcfs = nn.ModuleList(
            GlobalChannelFineTuning(cfg.c2, cfg.n_users, cfg.gcf_hidden, cfg.snr_scale)
            for _ in range(cfg.n_users if use_gcf else 0)
        )
        self.fuse1 = nn.Linear(cfg.n_users * cfg.c2, cfg.fusion_hidden)
        self.fuse2 = nn.Linear(cfg.fusion_hidden, cfg.c_tx)

    def concat(self, zrs, snrs):
        if self.gcfs:
            zrs = [gcf(z, snrs) for gcf, z in zip(self.gcfs, zrs)]
        return torch.cat(zrs, dim=-1)

    def forward(self, zrs, snrs):
        return power_normalize(self.fuse2(self.fuse1(self.concat(zrs, snrs))))


class ClassifierReceiver(nn.Module):
    def __init__(self, d_in: int, width: int, n_label: int):
        super().__init__()
        self.channel_decoder = nn.Sequential(nn.Linear(d_in, width), nn.ReLU(), nn.Linear(width, width), nn.ReLU())
        self.executor = nn.Sequential(nn.Linear(width, width), nn.ReLU(), nn.Linear(width, n_label))

    def forward(self, zh):
        return self.executor(self.channel_decoder(zh))


class RecoveryReceiver(nn.Module):
    def __init__(self, d_in: int, cfg: ModelConfig):
        super().__init__()
        self.feature_shape = (cfg.c1, cfg.h1, cfg.w1)
        self.expand = nn.Sequential(
            nn.Linear(d_in, cfg.decoder_width), nn.ReLU(),
            nn.Linear(cfg.decoder_width, cfg.c1 * cfg.h1 * cfg.w1), nn.ReLU(),
        )
        width, ch, layers = cfg.extractor_width, cfg.c1, []
        for _ in range(cfg.n_down):
            layers += [nn.ConvTranspose2d(ch, width, 4, stride=2, padding=1), nn.ReLU()]
            ch = width
        layers += [nn.ConvTranspose2d(ch, cfg.image_channels, 3, padding=1), nn.Sigmoid()]
        self.deconv = nn.Sequential(*layers)

    def forward(self, zh):
        return self.deconv(self.expand(zh).view(-1, *self.feature_shape))


def _receiver(head: HeadSpec, d_in: int, cfg: ModelConfig) -> nn.Module:
    if head.kind == "classify":
        return ClassifierReceiver(d_in, cfg.decoder_width, head.n_label)
    return RecoveryReceiver(d_in, cfg)


@dataclass
class Transmission:
    signals: List[torch.Tensor]
    stats: Optional[List[LatentStats]] = None


class BroadcastSystem(nn.Module):
    variant = "base"
    has_latent_stats = False

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg

    def signal_length(self, user: int) -> int:
        return self.cfg.c_tx

    def _build_receivers(self):
        self.receivers = nn.ModuleList(
            _receiver(head, self.signal_length(i), self.cfg) for i, head in enumerate(self.cfg.heads)
        )

    def encode(self, x, snrs, generator=None, sample=None) -> Transmission:
        raise NotImplementedError

    def decode(self, zh, user: int):
        if not 0 <= user < len(self.receivers):
            raise IndexError(f"unknown user index {user}")
        if zh.shape[-1] != self.signal_length(user):
            raise ValueError(f"user {user} expects {self.signal_length(user)} symbols, got {zh.shape[-1]}")
        return self.receivers[user](zh)

    def forward(self, x, snrs):
        tx = self.encode(x, snrs)
        return [self.decode(s, i) for i, s in enumerate(tx.signals)]


class DeepBroadcast(BroadcastSystem):
    """Shared extractor, per-user TCEs, channel-aware fusion.

    The flags carve out the ablations: ``use_lca`` / ``use_gcf`` toggle the two
    channel-aware blocks, ``stochastic`` toggles the (mu, sigma) head and the KL
    term.  With ``stochastic`` and ``cfg.deterministic_latent`` the latent head
    is kept but ``z^r = mu`` everywhere.
    """

    def __init__(self, cfg: ModelConfig, use_lca=True, use_gcf=True, stochastic=True, variant="deepbroadcast"):
        super().__init__(cfg)
        self.variant = variant
        self.stochastic = stochastic
        self.has_latent_stats = stochastic
        self.extractor = SemanticExtractor(cfg)
        self.tces = nn.ModuleList(TaskChannelEncoder(cfg, use_lca, stochastic) for _ in range(cfg.n_users))
        self.cfe = FeatureFusionEncoder(cfg, use_gcf)
        self._build_receivers()

    def latents(self, x, snrs, generator=None, sample=None):
        """Return (refined latents, latent stats or None)."""
        snrs = _snr_matrix(snrs, x.shape[0], self.cfg.n_users, x)
        f = self.extractor(x)
        if sample is None:
            sample = self.training and not self.cfg.deterministic_latent
        zrs, stats = [], []
        for i, tce in enumerate(self.tces):
            out = tce(f, snrs[:, i])
            if self.stochastic:
                stats.append(out)
                if sample:
                    lam = torch.randn(out.mu.shape, generator=generator, dtype=out.mu.dtype)
                    out = reparameterize(out, lam)
                else:
                    out = out.mu
            zrs.append(out)
        return zrs, (stats if self.stochastic else None), snrs

    def encode(self, x, snrs, generator=None, sample=None) -> Transmission:
        zrs, stats, snrs = self.latents(x, snrs, generator, sample)
        z = self.cfe(zrs, snrs)
        return Transmission([z] * self.cfg.n_users, stats)


def _snr_matrix(snrs, batch, n_users, like):
    snrs = torch.as_tensor(snrs, dtype=like.dtype)
    if snrs.dim() == 1:
        snrs = snrs.unsqueeze(0).expand(batch, -1)
    if snrs.shape != (batch, n_users):
        raise ValueError(f"SNR matrix must be ({batch}, {n_users}), got {tuple(snrs.shape)}")
    return snrs


class StackedFCBroadcast(BroadcastSystem):
    """Shared extractor plus serial affine compression to c_tx; no CSI input (MTOC / DeepRC)."""

    def __init__(self, cfg: ModelConfig, variant="mtoc"):
        super().__init__(cfg)
        self.variant = variant
        self.extractor = SemanticExtractor(cfg)
        d = cfg.c1 * cfg.h1 * cfg.w1
        self.compress = nn.Sequential(
            nn.Linear(d, cfg.mtoc_hidden), nn.ReLU(),
            nn.Linear(cfg.mtoc_hidden, cfg.mtoc_hidden // 2), nn.ReLU(),
            nn.Linear(cfg.mtoc_hidden // 2, cfg.c_tx),
        )
        self._build_receivers()

    def encode(self, x, snrs=None, generator=None, sample=None) -> Transmission:
        z = power_normalize(self.compress(self.extractor(x).flatten(1)))
        return Transmission([z] * self.cfg.n_users)


class Unicast(BroadcastSystem):
    """N independent one-to-one JSCC links, each with ceil(c_tx / N) symbols."""

    variant = "unicast"

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.k = math.ceil(cfg.c_tx / cfg.n_users)
        d = cfg.c1 * cfg.h1 * cfg.w1
        self.extractors = nn.ModuleList(SemanticExtractor(cfg) for _ in range(cfg.n_users))
        self.compressors = nn.ModuleList(
            nn.Sequential(
                nn.Linear(d, cfg.mtoc_hidden), nn.ReLU(),
                nn.Linear(cfg.mtoc_hidden, cfg.mtoc_hidden // 2), nn.ReLU(),
                nn.Linear(cfg.mtoc_hidden // 2, self.k),
            )
            for _ in range(cfg.n_users)
        )
        self._build_receivers()

    def signal_length(self, user: int) -> int:
        return self.k

    def encode(self, x, snrs=None, generator=None, sample=None) -> Transmission:
        return Transmission([
            power_normalize(comp(ext(x).flatten(1))) for ext, comp in zip(self.extractors, self.compressors)
        ])


def build_variant(name: str, cfg: ModelConfig) -> BroadcastSystem:
    if name == "deepbroadcast":
        return DeepBroadcast(cfg)
    if name == "deepbroadcast_e2e":
        return DeepBroadcast(cfg, stochastic=False, variant=name)
    if name == "mtoc_wlca":
        return DeepBroadcast(cfg, use_gcf=False, stochastic=False, variant=name)
    if name == "mtoc_wgcf":
        return DeepBroadcast(cfg, use_lca=False, stochastic=False, variant=name)
    if name in ("mtoc", "deeprc"):
        return StackedFCBroadcast(cfg, variant=name)
    if name == "unicast":
        return Unicast(cfg)
    raise ModelConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")


def tiny_config(**overrides) -> ModelConfig:
    """Smallest consistent configuration, used for gradient checks."""
    base = dict(
        n_users=2, heads=[HeadSpec("classify", 2), HeadSpec("recover")],
        c1=2, h1=2, w1=2, c_tx=2, image_size=8, extractor_width=2,
        decoder_width=3, gcf_hidden=3, fusion_hidden=3, mtoc_hidden=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


def with_heads(cfg: ModelConfig, heads) -> ModelConfig:
    heads = [h if isinstance(h, HeadSpec) else HeadSpec(**h) for h in heads]
    return replace(cfg, n_users=len(heads), heads=heads)
