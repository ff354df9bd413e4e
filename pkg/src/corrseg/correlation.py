"""Linear correlation between modality representations and the KL loss that
ties each estimated representation to the true one."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeMismatchError

MODALITIES = ("FLAIR", "T1", "T1c", "T2")
DEFAULT_PAIRS = "FLAIR>T1,T1>T1c,T1c>T2"
Q_FLOOR = 1e-12


@dataclass(frozen=True)
class ModalityPairing:
    """Ordered (source, target) index pairs into the canonical modality list."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        for i, j in self.pairs:
            if i == j:
                raise ConfigError(f"pair ({i},{j}) maps a modality onto itself")

    @classmethod
    def parse(cls, text: str, names: Sequence[str] = MODALITIES) -> "ModalityPairing":
        lookup = {n.lower(): k for k, n in enumerate(names)}
        pairs = []
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            if ">" not in item:
                raise ConfigError(f"bad pair {item!r}, expected SRC>DST")
            src, dst = (s.strip().lower() for s in item.split(">", 1))
            if src not in lookup or dst not in lookup:
                raise ConfigError(f"unknown modality in pair {item!r}")
            pairs.append((lookup[src], lookup[dst]))
        if not pairs:
            raise ConfigError("empty pairing")
        return cls(tuple(pairs))

    @classmethod
    def default(cls, n_modalities: int = 4) -> "ModalityPairing":
        """Chain 0>1>2>...; three pairs for four modalities."""
        return cls(tuple((k, k + 1) for k in range(n_modalities - 1)))

    def format(self, names: Sequence[str] = MODALITIES) -> str:
        return ",".join(f"{names[i]}>{names[j]}" for i, j in self.pairs)

    def __len__(self):
        return len(self.pairs)


class CorrelationEstimator(nn.Module):
    """Predict per-channel (alpha, beta) from a bottleneck representation.

    Global average pool -> Linear(C, C) -> LeakyReLU(0.01) -> Linear(C, 2C);
    the first C outputs are alpha, the last C are beta.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.fc1 = nn.Linear(channels, channels)
        self.fc2 = nn.Linear(channels, 2 * channels)
        for lin in (self.fc1, self.fc2):
            nn.init.kaiming_uniform_(lin.weight, a=0.01, nonlinearity="leaky_relu")
            nn.init.zeros_(lin.bias)

    def forward(self, z: torch.Tensor):
        if z.dim() != 5 or z.shape[1] != self.channels:
            raise ShapeMismatchError(
                f"expected {self.channels}-channel rank-5 map, got {tuple(z.shape)}")
        pooled = z.mean(dim=(2, 3, 4))
        out = self.fc2(F.leaky_relu(self.fc1(pooled), 0.01))
        return out[:, : self.channels], out[:, self.channels:]


def linear_correlate(z: torch.Tensor, alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """F[b, c, x] = alpha[b, c] * Z[b, c, x] + beta[b, c].

    ``alpha``/``beta`` may be (C,) or (B, C).
    """
    c = z.shape[1]
    if alpha.shape[-1] != c or beta.shape[-1] != c:
        raise ShapeMismatchError(
            f"alpha/beta length {alpha.shape[-1]}/{beta.shape[-1]} != channels {c}")
    extra = (1,) * (z.dim() - 2)
    if alpha.dim() == 1:
        alpha, beta = alpha.view(1, c, *extra), beta.view(1, c, *extra)
    else:
        alpha, beta = alpha.view(-1, c, *extra), beta.view(-1, c, *extra)
    return alpha * z + beta


def to_distribution(fm: torch.Tensor) -> torch.Tensor:
    """Per-sample softmax over the flattened map; returns (B, n)."""
    return torch.softmax(fm.reshape(fm.shape[0], -1), dim=1)


def kl_divergence(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """KL(P || Q) per sample, P and Q being softmaxes of the flattened inputs.

    Q is floored at 1e-12 inside the log.
    """
    p_logits = p_logits.reshape(p_logits.shape[0], -1)
    q_logits = q_logits.reshape(q_logits.shape[0], -1)
    log_p = torch.log_softmax(p_logits, dim=1)
    log_q = torch.log_softmax(q_logits, dim=1).clamp(min=math.log(Q_FLOOR))
    return (log_p.exp() * (log_p - log_q)).sum(dim=1)


def correlation_loss(z_list: Sequence[torch.Tensor], f_list: Sequence[torch.Tensor],
                     pairing: ModalityPairing) -> torch.Tensor:
    """Mean over pairs and batch of KL(P(Z_target) || Q(F_target))."""
    if len(f_list) != len(pairing):
        raise ShapeMismatchError(f"{len(f_list)} estimates for {len(pairing)} pairs")
    terms = []
    for (_, j), f in zip(pairing.pairs, f_list):
        z = z_list[j]
        if z.shape != f.shape:
            raise ShapeMismatchError(f"estimate {tuple(f.shape)} vs target {tuple(z.shape)}")
        terms.append(kl_divergence(z, f))
    return torch.stack(terms).mean()


class CorrelationBlock(nn.Module):
    """One estimator per pair; produces F_j = alpha_i * Z_i + beta_i for each (i -> j)."""

    def __init__(self, channels: int, pairing: ModalityPairing):
        super().__init__()
        self.pairing = pairing
        self.estimators = nn.ModuleList(CorrelationEstimator(channels) for _ in pairing.pairs)

    def forward(self, z_list: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        out = []
        for (i, _), est in zip(self.pairing.pairs, self.estimators):
            alpha, beta = est(z_list[i])
            out.append(linear_correlate(z_list[i], alpha, beta))
        return out
