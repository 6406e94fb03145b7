"""Quick in-process property checks across the modules.

A fast smoke version of the pytest suite for `radl selftest`: each check
re-derives its expectation independently (brute force or closed form)
and runs in well under a second.
"""
from __future__ import annotations

import numpy as np

from .attention import FeatureGrid, scaled_dot_attention, scaled_dot_attention_forward
from .fusion import BACKGROUND, INSTANCE, FusionBranch, fuse, fuse_forward
from .layout import BBox, MaskGrid, rasterize_mask, total_mask
from .pipeline import NoiseSchedule, init_denoiser, sample
from .scenes import SceneConfig, make_scene
from .text import EmbedderConfig, embed_tokens

Check = tuple[str, bool, str]


def _check_total_mask_union(rng) -> Check:
    worst = True
    for _ in range(50):
        masks = [MaskGrid((rng.random((6, 6)) < 0.4).astype(float)) for _ in range(3)]
        got = total_mask(masks).values
        want = np.zeros((6, 6))
        for r in range(6):
            for c in range(6):
                want[r, c] = 1.0 if sum(m.values[r, c] for m in masks) > 0 else 0.0
        worst = worst and np.array_equal(got, want)
    return ("total_mask union vs brute force", worst, "50 random mask triples")


def _check_attention_oracle(rng) -> Check:
    worst = 0.0
    for _ in range(10):
        q = rng.standard_normal((4, 8))
        k = rng.standard_normal((5, 8))
        v = rng.standard_normal((5, 8))
        out = scaled_dot_attention(q, k, v)
        want = np.zeros_like(out)
        for i in range(4):
            logits = [float(q[i] @ k[j]) / np.sqrt(8) for j in range(5)]
            m = max(logits)
            e = [np.exp(l - m) for l in logits]
            z = sum(e)
            for j in range(5):
                want[i] += (e[j] / z) * v[j]
        worst = max(worst, float(np.max(np.abs(out - want))))
    return ("attention vs scalar oracle", worst <= 1e-12, f"max abs err {worst:.2e}")


def _check_softmax_rows(rng) -> Check:
    _, cache = scaled_dot_attention_forward(
        rng.standard_normal((6, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    )
    err = float(np.max(np.abs(cache.attn.sum(axis=1) - 1.0)))
    return ("attention rows sum to one", err <= 1e-12, f"max dev {err:.2e}")


def _check_fusion(rng) -> Check:
    ones = MaskGrid(np.ones((4, 4)))
    branches = [
        FusionBranch(BACKGROUND, FeatureGrid(4, 4, rng.standard_normal((16, 4))), ones, 0.3),
        FusionBranch(INSTANCE, FeatureGrid(4, 4, rng.standard_normal((16, 4))),
                     MaskGrid((rng.random((4, 4)) < 0.5).astype(float)), -0.7),
    ]
    _, cache = fuse_forward(branches)
    sums_ok = bool(np.all(np.abs(cache.weights.sum(axis=0) - 1.0) <= 1e-12))
    shifted = [FusionBranch(b.kind, b.feat, b.mask, b.logit + 1.234) for b in branches]
    shift_err = float(np.max(np.abs(fuse(branches).values - fuse(shifted).values)))
    ok = sums_ok and shift_err <= 1e-12
    return ("fusion weight sum and logit-shift invariance", ok, f"shift dev {shift_err:.2e}")


def _check_rasterize_area(rng) -> Check:
    ok = True
    for _ in range(30):
        x1, y1 = rng.uniform(0, 0.8, 2)
        x2 = rng.uniform(x1 + 0.05, 1.0)
        y2 = rng.uniform(y1 + 0.05, 1.0)
        box = BBox(float(x1), float(y1), float(x2), float(y2))
        m = rasterize_mask(box, 16, 16)
        ok = ok and abs(m.values.mean() - box.area) <= 4.0 / 16
    return ("rasterized area tracks box area", ok, "30 random boxes at 16x16")


def _check_embedder(rng) -> Check:
    cfg = EmbedderConfig(dim=8, seed=0)
    a = embed_tokens(["red", "square"], cfg).values
    b = embed_tokens(["red", "square"], cfg).values
    norms = np.linalg.norm(a, axis=1)
    ok = np.array_equal(a, b) and bool(np.all(np.abs(norms - 1.0) <= 1e-12))
    return ("embedder deterministic unit rows", ok, "2 tokens")


def _check_schedule_and_trace(rng) -> Check:
    sched = NoiseSchedule.make(6)
    mono = bool(np.all(np.diff(sched.betas) > 0) and np.all(np.diff(sched.alpha_bars) < 0))
    params = init_denoiser(0, d=4, image_size=8, t_train=12)
    scene = make_scene(3, SceneConfig(image_size=8, n_instances=(1, 1)))
    _, trace = sample(
        params, scene.layout, sched=sched, total_steps=6, radl_steps=3,
        rng_seed=1, embed_cfg=EmbedderConfig(dim=4, seed=0),
    )
    ok = mono and trace == [True] * 3 + [False] * 3
    return ("schedule monotone and activation trace", ok, f"trace {trace}")


def run_selftest(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = [
        _check_total_mask_union,
        _check_attention_oracle,
        _check_softmax_rows,
        _check_fusion,
        _check_rasterize_area,
        _check_embedder,
        _check_schedule_and_trace,
    ]
    return [(name, bool(ok), detail) for name, ok, detail in (fn(rng) for fn in checks)]
