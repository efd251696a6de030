"""Sub-region-aware modality attention.

For every sub-region r a linear layer scores each modality's pooled
feature vector, ``e[m, r] = tanh(W_r . gap(f_m) + b_r)``; a softmax over
modalities turns the scores into weights and the fused map for r is the
weighted sum of the per-modality maps.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import InvalidInputError
from .model import N_REGIONS, FeatureMapSet, FusedFeatures

REGION_NAMES = ("NCR", "ED", "ET")


def global_average_pool(f: torch.Tensor) -> torch.Tensor:
    """(..., C, h, w) -> (..., C)."""
    return f.mean(dim=(-2, -1))


def energy(weight: torch.Tensor, bias, f_m: torch.Tensor) -> torch.Tensor:
    """Energy of feature map(s) ``f_m`` (..., C, h, w) for one sub-region.

    ``weight`` has shape (C,) (or (1, C)), ``bias`` is a scalar.
    """
    weight = torch.as_tensor(weight).reshape(-1)
    if f_m.dim() < 3 or f_m.shape[-3] != weight.shape[0]:
        raise InvalidInputError(
            f"feature map has {f_m.shape[-3] if f_m.dim() >= 3 else '?'} channels, "
            f"W_r expects {weight.shape[0]}"
        )
    return _pooled_energy(weight, bias, global_average_pool(f_m))


def _pooled_energy(weight: torch.Tensor, bias, pooled: torch.Tensor) -> torch.Tensor:
    return torch.tanh(pooled @ weight.to(pooled.dtype) + torch.as_tensor(bias, dtype=pooled.dtype))


def attention_weights(energies: torch.Tensor) -> torch.Tensor:
    """Softmax over the trailing (modality) axis, max-shifted for stability."""
    energies = torch.as_tensor(energies)
    if energies.dim() == 0 or energies.shape[-1] < 1:
        raise InvalidInputError("need at least one modality energy")
    if not torch.isfinite(energies).all():
        raise InvalidInputError("energies must be finite")
    shifted = energies - energies.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    # summing in sorted order makes the result independent of modality order
    return e / e.sort(dim=-1).values.sum(dim=-1, keepdim=True)


def fuse(features: torch.Tensor, alpha: torch.Tensor, atol: float = 1e-6) -> torch.Tensor:
    """Convex combination of per-modality maps.

    ``features`` is (..., M, C, h, w) and ``alpha`` is (..., M) summing to 1.
    """
    alpha = torch.as_tensor(alpha, dtype=features.dtype)
    if features.dim() < 4 or alpha.shape[-1] != features.shape[-4]:
        raise InvalidInputError(
            f"alpha has {alpha.shape[-1]} weights for {features.shape[-4] if features.dim() >= 4 else '?'} modalities"
        )
    if alpha.shape[:-1] != features.shape[:-4] and alpha.dim() != 1:
        raise InvalidInputError(
            f"alpha batch shape {tuple(alpha.shape[:-1])} does not match features {tuple(features.shape[:-4])}"
        )
    sums = alpha.detach().sum(-1)
    if not bool((sums - 1).abs().max() <= atol):
        raise InvalidInputError(f"attention weights must sum to 1, got {sums.tolist()}")
    terms = alpha[..., None, None, None] * features
    return terms.sort(dim=-4).values.sum(dim=-4)


class ModalityAttention(nn.Module):
    """One (W_r, b_r) pair per sub-region, zero-initialized (uniform attention)."""

    def __init__(self, channels: int, n_regions: int = N_REGIONS):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(n_regions, channels))
        self.bias = nn.Parameter(torch.zeros(n_regions))

    @property
    def channels(self) -> int:
        return self.weight.shape[1]

    def energies(self, per_modality: torch.Tensor) -> torch.Tensor:
        """(B, M, C, h, w) -> (B, M, R)."""
        if per_modality.dim() < 3 or per_modality.shape[-3] != self.channels:
            raise InvalidInputError(f"feature map channels do not match W_r ({self.channels})")
        pooled = global_average_pool(per_modality)  # pooled once, shared by all sub-regions
        return torch.stack(
            [_pooled_energy(self.weight[r], self.bias[r], pooled) for r in range(self.weight.shape[0])],
            dim=-1,
        )

    def forward(self, features: FeatureMapSet) -> torch.Tensor:
        """Attention weights alpha, shape (B, M, R)."""
        e = self.energies(features.per_modality)
        return attention_weights(e.transpose(-1, -2)).transpose(-1, -2)


def fuse_region(features: FeatureMapSet, alpha_r: torch.Tensor) -> FusedFeatures:
    """Apply one sub-region's (B, M) weights to both the main and skip maps."""
    return FusedFeatures(fuse(features.per_modality, alpha_r), fuse(features.skip, alpha_r))


def attend_and_fuse(params: ModalityAttention, features: FeatureMapSet):
    """Fuse features for every sub-region.

    Returns ``({region_index: FusedFeatures}, alpha)`` with alpha (B, M, R).
    """
    if features.per_modality.shape[2] != params.channels:
        raise InvalidInputError(
            f"features have {features.per_modality.shape[2]} channels, attention expects {params.channels}"
        )
    alpha = params(features)
    fused = {r: fuse_region(features, alpha[..., r]) for r in range(alpha.shape[-1])}
    return fused, alpha
