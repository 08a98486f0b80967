"""Contrastive projection head and cosine-similarity box classifier.

The array functions (:func:`encode`, :func:`cosine_logits`,
:func:`prototype_similarity_matrix`) are the reference surface; the
``nn.Module`` classes wrap the same maps for training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

DEFAULT_SCALE = 20.0
FULL_ROI_DIM = 1024
DEFAULT_ROI_DIM = 256
DEFAULT_EMBED_DIM = 128


@dataclass
class HeadParams:
    weight: np.ndarray  # (D_C, D_R)
    bias: np.ndarray  # (D_C,)

    @classmethod
    def init(cls, roi_dim: int = FULL_ROI_DIM, embed_dim: int = DEFAULT_EMBED_DIM,
             seed: int = 0) -> "HeadParams":
        rng = np.random.default_rng(seed)
        w = rng.normal(0.0, 1.0 / math.sqrt(roi_dim), size=(embed_dim, roi_dim))
        return cls(w, np.zeros(embed_dim))


@dataclass
class CosineClassifierWeights:
    prototypes: np.ndarray  # (num_classes, D_R), unnormalised
    scale: float = DEFAULT_SCALE

    def __post_init__(self):
        self.prototypes = np.atleast_2d(np.asarray(self.prototypes, dtype=np.float64))
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if np.any(np.linalg.norm(self.prototypes, axis=1) == 0):
            raise ValueError("zero-norm class prototype")


def encode(x: np.ndarray, params: HeadParams) -> np.ndarray:
    """Affine projection of RoI features onto the contrastive space.

    Works on one feature vector or a stack of them. The output is not
    normalised.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.weight.shape[1]:
        raise ValueError(f"feature dim {x.shape[-1]} != head input dim {params.weight.shape[1]}")
    return x @ params.weight.T + params.bias


def cosine_logits(x: np.ndarray, weights: CosineClassifierWeights) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != weights.prototypes.shape[1]:
        raise ValueError("feature dim does not match prototype dim")
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm RoI feature")
    w = weights.prototypes / np.linalg.norm(weights.prototypes, axis=1, keepdims=True)
    cos = (x / norms) @ w.T
    return weights.scale * np.clip(cos, -1.0, 1.0)


def prototype_similarity_matrix(weights: CosineClassifierWeights) -> np.ndarray:
    w = weights.prototypes
    if w.shape[0] < 2:
        raise ValueError("need at least two class prototypes")
    w = w / np.linalg.norm(w, axis=1, keepdims=True)
    sim = np.clip(w @ w.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


class ContrastiveHead(nn.Module):
    """Single affine layer D_R -> D_C."""

    def __init__(self, roi_dim: int, embed_dim: int = DEFAULT_EMBED_DIM):
        super().__init__()
        self.proj = nn.Linear(roi_dim, embed_dim)
        nn.init.normal_(self.proj.weight, 0.0, 1.0 / math.sqrt(roi_dim))
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)

    def params(self) -> HeadParams:
        return HeadParams(self.proj.weight.detach().double().numpy(),
                          self.proj.bias.detach().double().numpy())


class CosineClassifier(nn.Module):
    """Scaled cosine logits against one prototype per class.

    Row 0 is the background prototype; there is no bias.
    """

    def __init__(self, roi_dim: int, num_classes: int, scale: float = DEFAULT_SCALE):
        super().__init__()
        self.scale = scale
        self.weight = nn.Parameter(torch.empty(num_classes + 1, roi_dim))
        nn.init.normal_(self.weight, 0.0, 1.0 / math.sqrt(roi_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x / x.norm(dim=1, keepdim=True).clamp_min(1e-12)
        w = self.weight / self.weight.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return self.scale * x @ w.t()

    def expand(self, num_new: int, generator: torch.Generator) -> None:
        """Append ``num_new`` randomly initialised, unit-norm prototypes."""
        new = torch.randn(num_new, self.weight.shape[1], generator=generator)
        new = new / new.norm(dim=1, keepdim=True)
        self.weight = nn.Parameter(torch.cat([self.weight.detach(), new.to(self.weight.dtype)]))

    def weights(self) -> CosineClassifierWeights:
        return CosineClassifierWeights(self.weight.detach().double().numpy(), self.scale)
