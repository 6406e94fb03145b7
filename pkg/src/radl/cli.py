"""Command-line entry point: generate, train, evaluate, gradcheck, selftest.

Exit codes are a stable contract: 0 ok, 2 input error, 3 missing artifact,
4 numeric failure, 5 gradcheck failure.  All randomness derives from the
single config seed; identical configs produce byte-identical outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import pipeline
from .checkpoint import load_tensors, save_tensors
from .errors import (
    InvalidBBox,
    MalformedDoc,
    NonFiniteLoss,
    PlacementFailure,
    RadlError,
    ShapeMismatch,
    TooManyInstances,
    UnknownColor,
)
from .evalmetrics import evaluate_images, load_hsv_table
from .imageio import read_ppm, write_ppm
from .layout import parse_layout
from .scenes import SceneConfig, make_scene, read_corpus
from .text import EmbedderConfig, default_verb_lexicon, load_verb_lexicon

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5

CKPT_SCHEMA = "radl-ckpt/1"


@dataclass
class RunConfig:
    """All knobs of a run; JSON config file first, flags override."""

    d: int = 8
    image_size: int = 32
    t_train: int = 200
    t_sample: int = 60
    radl_steps: int = 30
    train_steps: int = 2000
    lr: float = 1e-4
    warmup: int = 100
    weight_decay: float = 0.01
    batch_size: int = 8
    seed: int = 0
    embed_seed: int = 0
    variant: str = "full"
    radl_train_mode: str = "mirror"
    checkpoint: str = "radl.ckpt"
    corpus: str = "corpus.jsonl"
    lexicon: str | None = None
    hsv_table: str | None = None
    out: str = "out"
    threads: int = 0  # RADL_THREADS cap; 0 = auto (single process regardless)

    def __post_init__(self):
        if self.radl_steps > self.t_sample:
            raise MalformedDoc(
                f"radl_steps {self.radl_steps} exceeds t_sample {self.t_sample}"
            )
        if self.lr <= 0:
            raise MalformedDoc("lr must be > 0")

    def embedder(self) -> EmbedderConfig:
        lexicon = (
            load_verb_lexicon(self.lexicon) if self.lexicon else default_verb_lexicon()
        )
        return EmbedderConfig(dim=self.d, seed=self.embed_seed, verb_lexicon=lexicon)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    values: dict = {}
    if path is not None:
        try:
            raw = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            values = json.loads(raw)
        except json.JSONDecodeError as e:
            raise MalformedDoc(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(values, dict):
            raise MalformedDoc(f"config {path}: top level must be an object")
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(values) - known
        if unknown:
            raise MalformedDoc(f"config {path}: unknown keys {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    env_threads = os.environ.get("RADL_THREADS")
    if env_threads is not None:
        try:
            threads = int(env_threads)
        except ValueError:
            raise MalformedDoc(f"RADL_THREADS must be an integer, got {env_threads!r}")
        if threads < 0:
            raise MalformedDoc("RADL_THREADS must be >= 0")
        values["threads"] = threads
    return RunConfig(**values)


def _save_checkpoint(path, params, step: int, cfg: RunConfig, opt_m=None, opt_v=None):
    tensors = dict(pipeline.params_to_dict(params))
    if opt_m is not None:
        tensors.update({f"opt.m.{k}": v for k, v in opt_m.items()})
        tensors.update({f"opt.v.{k}": v for k, v in opt_v.items()})
    meta = {
        "schema": CKPT_SCHEMA,
        "d": params.d,
        "image_size": params.image_size,
        "t_train": params.t_train,
        "step": step,
        "embed_seed": cfg.embed_seed,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_tensors(path, tensors, meta)


def _load_checkpoint(path):
    tensors, meta = load_tensors(path)
    params = pipeline.params_from_dict(
        {k: v for k, v in tensors.items() if not k.startswith("opt.")},
        d=int(meta["d"]), image_size=int(meta["image_size"]), t_train=int(meta["t_train"]),
    )
    opt_m = {k[len("opt.m."):]: v for k, v in tensors.items() if k.startswith("opt.m.")}
    opt_v = {k[len("opt.v."):]: v for k, v in tensors.items() if k.startswith("opt.v.")}
    return params, meta, (opt_m or None), (opt_v or None)


def cmd_gen(cfg: RunConfig, layout_path: str, count: int) -> int:
    if not Path(cfg.checkpoint).exists():
        print(f"checkpoint not found: {cfg.checkpoint}", file=sys.stderr)
        return EXIT_MISSING
    params, meta, _, _ = _load_checkpoint(cfg.checkpoint)
    embed_cfg = EmbedderConfig(
        dim=params.d,
        seed=int(meta.get("embed_seed", cfg.embed_seed)),
        verb_lexicon=cfg.embedder().verb_lexicon,
    )
    layout = parse_layout(Path(layout_path).read_text(encoding="utf-8"))
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sched = pipeline.NoiseSchedule.make(cfg.t_sample)
    for i in range(count):
        seed_i = cfg.seed + i
        image, trace = pipeline.sample(
            params, layout, sched=sched, total_steps=cfg.t_sample,
            radl_steps=cfg.radl_steps, rng_seed=seed_i,
            embed_cfg=embed_cfg, variant=cfg.variant,
        )
        stem = f"img_{i:03d}"
        write_ppm(out_dir / f"{stem}.ppm", image)
        (out_dir / f"{stem}.trace.json").write_text(
            json.dumps(
                {
                    "image": f"{stem}.ppm",
                    "seed": seed_i,
                    "total_steps": cfg.t_sample,
                    "radl_steps": cfg.radl_steps,
                    "radl_on": trace,
                }
            )
            + "\n",
            encoding="utf-8",
        )
    return EXIT_OK


def cmd_train(cfg: RunConfig, resume: str | None = None) -> int:
    if not Path(cfg.corpus).exists():
        print(f"corpus not found: {cfg.corpus}", file=sys.stderr)
        return EXIT_MISSING
    dataset = read_corpus(cfg.corpus)
    if not dataset:
        print(f"corpus is empty: {cfg.corpus}", file=sys.stderr)
        return EXIT_INPUT

    if resume is not None:
        if not Path(resume).exists():
            print(f"resume checkpoint not found: {resume}", file=sys.stderr)
            return EXIT_MISSING
        params, meta, opt_m, opt_v = _load_checkpoint(resume)
        start_step = int(meta.get("step", 0))
    else:
        params = pipeline.init_denoiser(
            cfg.seed, d=cfg.d, image_size=cfg.image_size, t_train=cfg.t_train
        )
        opt_m = opt_v = None
        start_step = 0

    try:
        result = pipeline.train(
            params, dataset, steps=cfg.train_steps, lr=cfg.lr,
            warmup_steps=cfg.warmup, weight_decay=cfg.weight_decay,
            rng_seed=cfg.seed, batch_size=cfg.batch_size,
            embed_cfg=cfg.embedder(), variant=cfg.variant,
            start_step=start_step, opt_m=opt_m, opt_v=opt_v,
            radl_train_mode=cfg.radl_train_mode,
        )
    except NonFiniteLoss as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_NUMERIC

    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _save_checkpoint(cfg.checkpoint, params, result.step, cfg, result.opt_m, result.opt_v)
    with open(out_dir / "loss.csv", "w", encoding="utf-8") as fh:
        fh.write("step,loss,lr\n")
        for i, (loss, lr) in enumerate(zip(result.losses, result.lrs)):
            fh.write(f"{start_step + i},{loss!r},{lr!r}\n")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, images_dir: str, layouts_dir: str) -> int:
    images = {p.stem: p for p in sorted(Path(images_dir).glob("*.ppm"))}
    layouts = {p.stem: p for p in sorted(Path(layouts_dir).glob("*.json"))}
    if not images or set(images) != set(layouts):
        only_img = sorted(set(images) - set(layouts))
        only_lay = sorted(set(layouts) - set(images))
        print(
            "images and layouts must pair by filename stem; "
            f"unpaired images={only_img} layouts={only_lay}",
            file=sys.stderr,
        )
        return EXIT_INPUT

    table = load_hsv_table(cfg.hsv_table)
    pairs = []
    for stem in sorted(images):
        image = read_ppm(images[stem])
        layout = parse_layout(layouts[stem].read_text(encoding="utf-8"))
        pairs.append((image, layout))
    report = evaluate_images(pairs, SceneConfig().palette, table=table)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_json())
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, scenes: int = 5, inject_fault: bool = False) -> int:
    params = pipeline.init_denoiser(
        cfg.seed, d=cfg.d, image_size=cfg.image_size, t_train=cfg.t_train
    )
    scene_cfg = SceneConfig(image_size=cfg.image_size)
    embed_cfg = cfg.embedder()
    worst: dict[str, float] = {}
    ok = True
    produced = 0
    seed = cfg.seed
    while produced < scenes:
        try:
            scene = make_scene(seed, scene_cfg)
        except PlacementFailure:
            seed += 1
            continue
        t = 1 + (7 * produced) % cfg.t_train
        report = pipeline.gradcheck(
            params, scene, t=t, rng_seed=cfg.seed + produced,
            embed_cfg=embed_cfg, grad_fault=inject_fault,
        )
        for group, err in report.max_rel_err.items():
            worst[group] = max(worst.get(group, 0.0), err)
        ok = ok and report.passed
        produced += 1
        seed += 1
    for group in sorted(worst):
        flag = "ok  " if worst[group] <= 1e-4 else "FAIL"
        print(f"{flag} {group:14s} max_rel_err {worst[group]:.3e}")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_selftest(cfg: RunConfig, as_json: bool = False) -> int:
    from .selftest import run_selftest

    results = run_selftest(seed=cfg.seed)
    passed = all(ok for _, ok, _ in results)
    if as_json:
        print(
            json.dumps(
                {
                    "passed": passed,
                    "checks": [
                        {"name": name, "passed": ok, "detail": detail}
                        for name, ok, detail in results
                    ],
                }
            )
        )
    else:
        for name, ok, detail in results:
            print(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
    if not passed:
        failing = [name for name, ok, _ in results if not ok]
        print(f"selftest failed: {', '.join(failing)}", file=sys.stderr)
        return 1
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radl", description=__doc__)
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--steps", type=int, default=None,
                        help="training steps (train) or sampling steps (gen)")
    parser.add_argument("--radl-steps", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--resume", default=None, help="checkpoint to resume from")

    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen", help="sample images for a layout file")
    gen.add_argument("layout", help="layout JSON path")
    gen.add_argument("count", type=int, nargs="?", default=1)

    sub.add_parser("train", help="train on a scene corpus")

    ev = sub.add_parser("eval", help="evaluate images against layouts")
    ev.add_argument("images_dir")
    ev.add_argument("layouts_dir")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    gc.add_argument("--scenes", type=int, default=5)
    gc.add_argument("--inject-grad-fault", action="store_true",
                    help="negative-control hook: corrupt one gradient")

    sub.add_parser("selftest", help="run quick module property suites")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "out": args.out}
    if args.radl_steps is not None:
        overrides["radl_steps"] = args.radl_steps
    if args.steps is not None:
        if args.command == "gen":
            overrides["t_sample"] = args.steps
            # keep the invariant when shrinking the schedule below the default split
            if args.radl_steps is None:
                overrides["radl_steps"] = min(30, args.steps // 2)
        else:
            overrides["train_steps"] = args.steps

    try:
        cfg = load_config(args.config, overrides)
        if args.command == "gen":
            return cmd_gen(cfg, args.layout, args.count)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.images_dir, args.layouts_dir)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, scenes=args.scenes, inject_fault=args.inject_grad_fault)
        if args.command == "selftest":
            return cmd_selftest(cfg, as_json=args.json)
        raise AssertionError(f"unhandled command {args.command}")
    except FileNotFoundError as e:
        print(str(e), file=sys.stderr)
        return EXIT_MISSING
    except (MalformedDoc, InvalidBBox, TooManyInstances, ShapeMismatch, UnknownColor) as e:
        print(str(e), file=sys.stderr)
        return EXIT_INPUT
    except NonFiniteLoss as e:
        print(str(e), file=sys.stderr)
        return EXIT_NUMERIC
    except RadlError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INPUT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
