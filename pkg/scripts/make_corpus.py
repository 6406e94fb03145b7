#!/usr/bin/env python3
"""Generate a synthetic scene corpus (JSONL) plus optional eval material.

By default writes only the corpus file used by `radl train`.  With
--eval-dirs it also dumps each scene as a PPM/layout-JSON pair so that
`radl eval` can be exercised against ground-truth renders.
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from radl.errors import PlacementFailure
from radl.imageio import write_ppm
from radl.layout import serialize_layout
from radl.scenes import SceneConfig, make_scene, write_corpus


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="corpus.jsonl")
    parser.add_argument("--count", type=int, default=256)
    parser.add_argument("--seed", type=int, default=0, help="first generator seed")
    parser.add_argument("--image-size", type=int, default=32)
    parser.add_argument("--min-instances", type=int, default=2)
    parser.add_argument("--max-instances", type=int, default=2)
    parser.add_argument("--eval-dirs", default=None,
                        help="also write <dir>/images/*.ppm and <dir>/layouts/*.json")
    args = parser.parse_args()

    cfg = SceneConfig(
        image_size=args.image_size,
        n_instances=(args.min_instances, args.max_instances),
    )
    scenes = []
    seed = args.seed
    skipped = 0
    while len(scenes) < args.count:
        try:
            scenes.append(make_scene(seed, cfg))
        except PlacementFailure:
            skipped += 1
        seed += 1
    write_corpus(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out} (skipped {skipped} crowded seeds)")

    if args.eval_dirs:
        img_dir = Path(args.eval_dirs) / "images"
        lay_dir = Path(args.eval_dirs) / "layouts"
        img_dir.mkdir(parents=True, exist_ok=True)
        lay_dir.mkdir(parents=True, exist_ok=True)
        for i, scene in enumerate(scenes):
            write_ppm(img_dir / f"scene_{i:04d}.ppm", scene.image)
            (lay_dir / f"scene_{i:04d}.json").write_text(
                serialize_layout(scene.layout), encoding="utf-8"
            )
        print(f"wrote eval pairs under {args.eval_dirs}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
