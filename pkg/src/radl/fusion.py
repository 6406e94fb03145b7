"""Pixel-wise softmax fusion of background, instance, and relation branches.

At each pixel the branches whose mask is 1 form the active set; their
scalar logits are softmax-normalized over that set and the output is the
resulting convex combination of branch features.  Inactive branches
contribute exactly zero and receive zero gradient at that pixel.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import FeatureGrid
from .errors import MissingCache, NoBranches, ShapeMismatch
from .layout import MaskGrid

BACKGROUND = "background"
INSTANCE = "instance"
RELATION = "relation"


@dataclass
class FusionBranch:
    """One fusion input: a feature grid gated by a mask with a scalar logit."""

    kind: str
    feat: FeatureGrid
    mask: MaskGrid
    logit: float

    def __post_init__(self):
        if (self.feat.h, self.feat.w) != (self.mask.h, self.mask.w):
            raise ShapeMismatch(
                f"branch feat {self.feat.h}x{self.feat.w} does not match "
                f"mask {self.mask.h}x{self.mask.w}"
            )


@dataclass
class FuseCache:
    feats: np.ndarray    # (B, n_pix, d)
    masks: np.ndarray    # (B, n_pix)
    weights: np.ndarray  # (B, n_pix), zero where inactive


def fuse_forward(branches: Sequence[FusionBranch]) -> tuple[FeatureGrid, FuseCache]:
    branches = list(branches)
    if not branches:
        raise NoBranches("fusion requires at least one branch")
    ref = branches[0].feat
    for b in branches[1:]:
        if (b.feat.h, b.feat.w, b.feat.d) != (ref.h, ref.w, ref.d):
            raise ShapeMismatch("fusion branches must share feature grid shape")

    feats = np.stack([b.feat.values for b in branches])          # (B, n, d)
    masks = np.stack([b.mask.flat() for b in branches])          # (B, n)
    logits = np.array([b.logit for b in branches])[:, None]      # (B, 1)
    if not np.all(masks.sum(axis=0) > 0.0):
        raise NoBranches("every pixel needs at least one active branch")

    # Softmax over the active set only: subtract the per-pixel max of the
    # active logits, then renormalize with inactive entries held at zero.
    shifted = logits - np.where(masks > 0.0, logits, -np.inf).max(axis=0, keepdims=True)
    gated = np.where(masks > 0.0, np.exp(shifted) * masks, 0.0)
    weights = gated / gated.sum(axis=0, keepdims=True)

    out = np.einsum("bn,bnd->nd", weights, feats)
    return ref.like(out), FuseCache(feats=feats, masks=masks, weights=weights)


def fuse(branches: Sequence[FusionBranch]) -> FeatureGrid:
    """Per-pixel convex combination of active branch features."""
    return fuse_forward(branches)[0]


def fuse_backward(
    d_out: np.ndarray, cache: FuseCache | None
) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients (per-branch feature grads, per-branch logit grads).

    Logit gradients are zero at pixels where the branch is inactive; the
    per-pixel softmax Jacobian couples only branches active there.
    """
    if cache is None:
        raise MissingCache("fuse backward needs its forward cache")
    w = cache.weights
    d_feats = [w[b][:, None] * d_out for b in range(w.shape[0])]
    # g[b, p] = d_out(p) . feat_b(p)
    g = np.einsum("nd,bnd->bn", d_out, cache.feats)
    gbar = (w * g).sum(axis=0, keepdims=True)
    d_logits = (w * (g - gbar)).sum(axis=1)
    return d_feats, d_logits
