"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The steering experiment (criteria 5 and 6) trains three model variants
once in a module fixture and evaluates held-out layouts; its learning rate
is an experiment parameter (see the repository notes), everything else
runs at package defaults.  All runs are seeded, so results are exact on a
given platform.
"""
import time

import numpy as np
import pytest

from radl.attention import (
    AttnProjection,
    FeatureGrid,
    attribute_enhancement_backward,
    attribute_enhancement_forward,
    fuse_residual_backward,
    instance_attention_backward,
    instance_attention_forward,
    masked_text_attention_backward,
    masked_text_attention_forward,
    relation_attention_backward,
    relation_attention_forward,
    scaled_dot_attention,
    scaled_dot_attention_backward,
    scaled_dot_attention_forward,
)
from radl.errors import PlacementFailure
from radl.evalmetrics import (
    Detection,
    detect,
    evaluate_images,
    iou,
    mean_iou,
    relation_acc,
    success_rate,
)
from radl.fusion import BACKGROUND, INSTANCE, FusionBranch, fuse, fuse_forward
from radl.layout import BBox, InstanceSpec, LayoutSpec, MaskGrid, Relation, rasterize_mask, total_mask
from radl.pipeline import (
    denoise_forward,
    gradcheck,
    init_denoiser,
    sample,
    train,
)
from radl.scenes import SceneConfig, make_scene
from radl.text import EmbedderConfig

EC = EmbedderConfig(dim=8, seed=0)
SCENE_CFG = SceneConfig()

# experiment parameter for criteria 5/6; package default stays at the
# reference value 1e-4 (see decisions notes on desk-scale trainability)
STEERING_LR = 5e-3
STEERING_STEPS = 2000
STEERING_SEED = 0


def announce(num: int, ok: bool, detail: str):
    print(f"\n[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}")


def scenes_from(seed0, count, cfg=SCENE_CFG):
    out, s = [], seed0
    while len(out) < count:
        try:
            out.append(make_scene(s, cfg))
        except PlacementFailure:
            pass
        s += 1
    return out


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return np.max(np.abs(a - b)) / denom


def attention_oracle(q, k, v):
    n_q, d = q.shape
    out = np.zeros((n_q, d))
    for i in range(n_q):
        logits = [float(q[i] @ k[j]) / np.sqrt(d) for j in range(k.shape[0])]
        m = max(logits)
        exps = [np.exp(l - m) for l in logits]
        z = sum(exps)
        for j in range(k.shape[0]):
            out[i] += (exps[j] / z) * v[j]
    return out


def fd_grad(fn, arr, d_out, eps=1e-5):
    num = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + eps
        up = float((fn() * d_out).sum())
        arr[idx] = orig - eps
        dn = float((fn() * d_out).sum())
        arr[idx] = orig
        num[idx] = (up - dn) / (2 * eps)
    return num


# --- criterion 1: attention oracle suite --------------------------------------

def test_criterion_1_attention_oracle():
    rng = np.random.default_rng(1001)
    start = time.time()
    worst = 0.0
    for _ in range(100):
        n_q = int(rng.integers(1, 9))
        n_k = int(rng.integers(1, 9))
        q = rng.standard_normal((n_q, 8))
        k = rng.standard_normal((n_k, 8))
        v = rng.standard_normal((n_k, 8))
        worst = max(worst, rel_err(scaled_dot_attention(q, k, v), attention_oracle(q, k, v)))
    elapsed = time.time() - start
    ok = worst <= 1e-12 and elapsed < 5.0
    announce(1, ok, f"100 oracle cases, max rel err {worst:.2e}, {elapsed:.2f}s")
    assert worst <= 1e-12
    assert elapsed < 5.0


# --- criterion 2: gradient suite -----------------------------------------------

def _op_backward_errors(rng):
    """Max FD relative error over every backward op on one seeded case."""
    errs = []
    d = 4
    feat = FeatureGrid(2, 3, rng.standard_normal((6, d)))
    emb_vals = rng.standard_normal((3, d))
    proj = AttnProjection.init(rng, d)
    mask = MaskGrid((rng.random((2, 3)) < 0.6).astype(float))
    d_out = rng.standard_normal((6, d))

    q = rng.standard_normal((3, d))
    k = rng.standard_normal((4, d))
    v = rng.standard_normal((4, d))
    d_small = rng.standard_normal((3, d))
    _, cache = scaled_dot_attention_forward(q, k, v)
    dq, dk, dv = scaled_dot_attention_backward(d_small, cache)
    for arr, an in ((q, dq), (k, dk), (v, dv)):
        errs.append(rel_err(an, fd_grad(lambda: scaled_dot_attention(q, k, v), arr, d_small)))

    from radl.text import EmbeddingSeq

    emb = EmbeddingSeq(emb_vals)
    out, cache = masked_text_attention_forward(feat, emb, proj, mask)
    grads = masked_text_attention_backward(d_out, cache)

    def run_mta():
        return masked_text_attention_forward(feat, emb, proj, mask)[0].values

    for arr, an in ((feat.values, grads["feat"]), (emb.values, grads["emb"]),
                    (proj.wq, grads["wq"]), (proj.wk, grads["wk"]), (proj.wv, grads["wv"])):
        errs.append(rel_err(an, fd_grad(run_mta, arr, d_out)))

    qlp = rng.standard_normal((6, d))
    out, cache = attribute_enhancement_forward(feat, qlp, proj)
    grads = attribute_enhancement_backward(d_out, cache)

    def run_ae():
        return attribute_enhancement_forward(feat, qlp, proj)[0].values

    for arr, an in ((qlp, grads["qlp"]), (feat.values, grads["feat"]),
                    (proj.wk, grads["wk"]), (proj.wv, grads["wv"])):
        errs.append(rel_err(an, fd_grad(run_ae, arr, d_out)))

    out, cache = instance_attention_forward(feat, emb, proj, mask)
    grads = instance_attention_backward(d_out, cache)

    def run_ia():
        return instance_attention_forward(feat, emb, proj, mask)[0].values

    errs.append(rel_err(grads["feat"], fd_grad(run_ia, feat.values, d_out)))

    da, db = fuse_residual_backward(d_out)
    errs.append(rel_err(da, d_out))

    out, cache = relation_attention_forward(feat, emb, proj, mask)
    grads = relation_attention_backward(d_out, cache)

    def run_rel():
        return relation_attention_forward(feat, emb, proj, mask)[0].values

    errs.append(rel_err(grads["emb"], fd_grad(run_rel, emb.values, d_out)))

    ones = MaskGrid(np.ones((2, 3)))
    branches = [
        FusionBranch(BACKGROUND, FeatureGrid(2, 3, rng.standard_normal((6, d))), ones, 0.2),
        FusionBranch(INSTANCE, FeatureGrid(2, 3, rng.standard_normal((6, d))), mask, -0.4),
    ]
    from radl.fusion import fuse_backward

    _, cache = fuse_forward(branches)
    d_feats, d_logits = fuse_backward(d_out, cache)
    errs.append(rel_err(d_feats[0], fd_grad(lambda: fuse(branches).values, branches[0].feat.values, d_out)))
    return max(errs)


def test_criterion_2_gradient_suite():
    start = time.time()
    cfg8 = SceneConfig(image_size=8, min_box=0.3, max_box=0.6)
    params = init_denoiser(0, d=8, image_size=8, t_train=50)
    worst_e2e = 0.0
    scenes = scenes_from(40, 20, cfg8)
    for i, scene in enumerate(scenes):
        t = 1 + (11 * i) % 50
        report = gradcheck(params, scene, t=t, eps=1e-5, rng_seed=i, embed_cfg=EC)
        worst_e2e = max(worst_e2e, max(report.max_rel_err.values()))
    worst_ops = 0.0
    for i in range(20):
        worst_ops = max(worst_ops, _op_backward_errors(np.random.default_rng(2000 + i)))
    elapsed = time.time() - start
    ok = worst_e2e < 1e-4 and worst_ops < 1e-4 and elapsed < 120.0
    announce(2, ok, f"20 scenes end-to-end max {worst_e2e:.2e}, per-op max {worst_ops:.2e}, {elapsed:.1f}s")
    assert worst_e2e < 1e-4
    assert worst_ops < 1e-4
    assert elapsed < 120.0


# --- criterion 3: mask and fusion invariants ------------------------------------

def test_criterion_3_mask_fusion_invariants():
    rng = np.random.default_rng(3003)
    for _ in range(1000):
        n = int(rng.integers(0, 5))
        masks = []
        for _ in range(n):
            x1, y1 = rng.uniform(0, 0.8, 2)
            box = BBox(float(x1), float(y1), float(rng.uniform(x1 + 0.05, 1)), float(rng.uniform(y1 + 0.05, 1)))
            masks.append(rasterize_mask(box, 8, 8))
        got = total_mask(masks, height=8, width=8).values
        want = (np.sum([m.values for m in masks], axis=0) > 0).astype(float) if masks else np.zeros((8, 8))
        assert np.array_equal(got, want)

    worst_sum = 0.0
    worst_shift = 0.0
    for seed in range(100):
        rng = np.random.default_rng(4000 + seed)
        ones = MaskGrid(np.ones((4, 4)))
        branches = [FusionBranch(BACKGROUND, FeatureGrid(4, 4, rng.standard_normal((16, 4))), ones, float(rng.standard_normal()))]
        for _ in range(2):
            branches.append(
                FusionBranch(
                    INSTANCE,
                    FeatureGrid(4, 4, rng.standard_normal((16, 4))),
                    MaskGrid((rng.random((4, 4)) < 0.5).astype(float)),
                    float(rng.standard_normal()),
                )
            )
        _, cache = fuse_forward(branches)
        worst_sum = max(worst_sum, float(np.max(np.abs(cache.weights.sum(axis=0) - 1.0))))
        shifted = [FusionBranch(b.kind, b.feat, b.mask, b.logit + 0.917) for b in branches]
        worst_shift = max(worst_shift, rel_err(fuse(branches).values, fuse(shifted).values))
    ok = worst_sum <= 1e-12 and worst_shift <= 1e-12
    announce(3, ok, f"1000 unions exact; weight-sum dev {worst_sum:.2e}, shift dev {worst_shift:.2e}")
    assert worst_sum <= 1e-12
    assert worst_shift <= 1e-12


# --- criterion 4: schedule conformance -------------------------------------------

def test_criterion_4_schedule_conformance():
    params = init_denoiser(0, d=8, image_size=32, t_train=200)
    scene = make_scene(0, SCENE_CFG)
    _, trace = sample(params, scene.layout, total_steps=60, radl_steps=30, rng_seed=0, embed_cfg=EC)
    trace_ok = trace == [True] * 30 + [False] * 30

    other = make_scene(2, SCENE_CFG)
    x = np.random.default_rng(1).standard_normal((3, 32, 32))
    a = denoise_forward(params, x, 77, scene.layout, False, EC)
    b = denoise_forward(params, x, 77, other.layout, False, EC)
    invariant_ok = np.array_equal(a, b)
    ok = trace_ok and invariant_ok
    announce(4, ok, f"trace 30 on + 30 off: {trace_ok}; off-path layout-invariant: {invariant_ok}")
    assert trace_ok
    assert invariant_ok


# --- criteria 5 and 6: steering experiment ---------------------------------------

@pytest.fixture(scope="module")
def steering():
    train_scenes = scenes_from(0, 256)
    held_out = scenes_from(100_000, 64)
    results = {}
    for variant in ("full", "text_attn_only", "no_relation"):
        params = init_denoiser(STEERING_SEED, d=8, image_size=32, t_train=200)
        train(
            params, train_scenes, steps=STEERING_STEPS, lr=STEERING_LR,
            warmup_steps=100, rng_seed=STEERING_SEED, batch_size=8,
            embed_cfg=EC, variant=variant, radl_train_mode="mirror",
        )
        pairs = []
        for i, scene in enumerate(held_out):
            img, _ = sample(
                params, scene.layout, total_steps=60, radl_steps=30,
                rng_seed=777 + i, embed_cfg=EC, variant=variant,
            )
            pairs.append((img, scene.layout))
        results[variant] = {
            "pairs": pairs,
            "report": evaluate_images(pairs, SCENE_CFG.palette),
        }
    return results


def test_criterion_5_steering(steering):
    # recorded from the first verified run (seed 0, 64 held-out layouts):
    # full mIoU 0.624, text-attn-only mIoU 0.311, full attribute accuracy 1.000
    full = steering["full"]["report"]
    ablation = steering["text_attn_only"]["report"]
    ok = (
        full.miou >= ablation.miou
        and full.miou >= 0.5
        and full.attribute_acc >= 0.7
    )
    announce(
        5, ok,
        f"full mIoU {full.miou:.3f} vs text-attn-only {ablation.miou:.3f}; "
        f"full attr {full.attribute_acc:.3f}",
    )
    assert full.miou >= ablation.miou
    assert full.miou >= 0.5
    assert full.attribute_acc >= 0.7


def test_criterion_6_relation_branch(steering):
    full_pairs = steering["full"]["pairs"][:32]
    norel_pairs = steering["no_relation"]["pairs"][:32]
    assert all(layout.relations for _, layout in full_pairs)

    def rel_score(pairs):
        scores = []
        for img, layout in pairs:
            dets = detect(img, SCENE_CFG.palette)
            scores.append(relation_acc(dets, layout.relations, layout))
        return float(np.mean(scores))

    full_rel = rel_score(full_pairs)
    norel_rel = rel_score(norel_pairs)
    ok = full_rel >= norel_rel
    announce(6, ok, f"relation acc full {full_rel:.3f} vs no-relation ablation {norel_rel:.3f}")
    assert full_rel >= norel_rel


# --- criterion 7: metric unit suite ------------------------------------------------

def test_criterion_7_metric_units():
    checks = []
    checks.append(iou(BBox(0.1, 0.2, 0.6, 0.8), BBox(0.1, 0.2, 0.6, 0.8)) == 1.0)
    checks.append(iou(BBox(0, 0, 0.3, 0.3), BBox(0.5, 0.5, 0.9, 0.9)) == 0.0)
    checks.append(iou(BBox(0, 0, 1, 1), BBox(0.5, 0, 1.0, 1.0)) == 0.5)

    scene = make_scene(0, SCENE_CFG)
    dets = detect(scene.image, SCENE_CFG.palette)
    rate, flags = success_rate(dets, scene.layout, scene.image)
    checks.append(rate == 1.0 and all(flags))
    rate_missing, flags_missing = success_rate(dets[:1], scene.layout, scene.image)
    checks.append(rate_missing == 0.0 and not all(flags_missing))

    checks.append(mean_iou([], scene.layout) == 0.0)
    layout = LayoutSpec(
        prompt="p",
        instances=(
            InstanceSpec("red square", BBox(0.1, 0.1, 0.4, 0.4)),
            InstanceSpec("blue square", BBox(0.1, 0.6, 0.4, 0.9)),
        ),
    )
    det_pair = [
        Detection(layout.instances[0].bbox, "red", 10),
        Detection(layout.instances[1].bbox, "blue", 10),
    ]
    checks.append(relation_acc(det_pair, [Relation(0, "above", 1)], layout) == 1.0)
    checks.append(relation_acc(det_pair, [Relation(0, "below", 1)], layout) == 0.0)
    checks.append(relation_acc(det_pair[:1], [Relation(0, "above", 1)], layout) == 0.0)

    ok = all(checks)
    announce(7, ok, f"{sum(checks)}/{len(checks)} exact metric checks")
    assert all(checks)


# --- criterion 8: determinism -------------------------------------------------------

def test_criterion_8_cli_determinism(tmp_path):
    import json as json_mod

    from radl.cli import main
    from radl.layout import serialize_layout
    from radl.scenes import write_corpus

    cfg8 = SceneConfig(image_size=8, min_box=0.3, max_box=0.5)
    write_corpus(tmp_path / "corpus.jsonl", scenes_from(0, 4, cfg8))
    cfg = {
        "d": 4, "image_size": 8, "t_train": 12, "t_sample": 6, "radl_steps": 3,
        "train_steps": 6, "batch_size": 2, "warmup": 2, "seed": 0,
        "checkpoint": str(tmp_path / "m.ckpt"), "corpus": str(tmp_path / "corpus.jsonl"),
        "out": str(tmp_path / "out"),
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json_mod.dumps(cfg), encoding="utf-8")
    layout_path = tmp_path / "layout.json"
    layout_path.write_text(serialize_layout(scenes_from(0, 1, cfg8)[0].layout), encoding="utf-8")

    assert main(["--config", str(cfg_path), "train"]) == 0
    ckpt1 = (tmp_path / "m.ckpt").read_bytes()
    assert main(["--config", str(cfg_path), "gen", str(layout_path)]) == 0
    img1 = (tmp_path / "out" / "img_000.ppm").read_bytes()

    assert main(["--config", str(cfg_path), "train"]) == 0
    ckpt2 = (tmp_path / "m.ckpt").read_bytes()
    assert main(["--config", str(cfg_path), "gen", str(layout_path)]) == 0
    img2 = (tmp_path / "out" / "img_000.ppm").read_bytes()

    ok = ckpt1 == ckpt2 and img1 == img2
    announce(8, ok, f"checkpoint identical: {ckpt1 == ckpt2}; image identical: {img1 == img2}")
    assert ckpt1 == ckpt2
    assert img1 == img2
