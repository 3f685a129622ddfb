"""Command-line interface: training, evaluation, and flow-file utilities.

Every run-shaped subcommand reads a TrainConfig JSON file (--config) and
accepts repeated --set key=value overrides with dotted paths into the
config, e.g. --set seed=3 --set scene.max_disp=4. Failures exit nonzero
after printing one machine-readable JSON line on stderr.
"""

import argparse
import json
import sys
from pathlib import Path

import cv2
import numpy as np

from .diffcore import Tensor
from .errors import FormatError, OccflowError, ParameterError
from .flowio import (
    flow_to_color,
    generate_scene,
    read_flo,
    read_kitti_png,
    write_flo,
    write_kitti_png,
)
from .flowops import FramePair, boundary_dilated_warp, occlusion_mask, warp_bilinear
from .harness import TrainConfig, ablate, build_eval_set, evaluate, load_net, train


def _apply_overrides(tree, pairs):
    for spec in pairs or []:
        key, eq, raw = spec.partition("=")
        if not eq:
            raise ParameterError(f"override must look like key=value: {spec!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ParameterError(f"unknown config key {key!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ParameterError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return tree


def _load_config(args):
    if getattr(args, "config", None):
        tree = json.loads(Path(args.config).read_text())
        tree = TrainConfig.from_json(tree).to_json()  # normalize + validate shape
    else:
        tree = TrainConfig().to_json()
    tree = _apply_overrides(tree, getattr(args, "set", None))
    return TrainConfig.from_json(tree)


def _read_flow_file(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".flo":
        return read_flo(path)
    if suffix == ".png":
        return read_kitti_png(path)[0]
    raise FormatError(f"unsupported flow format {suffix!r} for {path}")


def _read_image(path):
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"could not read image {path}")
    if img.ndim == 2:
        img = img[:, :, None]
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    arr = np.moveaxis(img.astype(np.float64) / scale, 2, 0)[None]
    return arr, img.dtype, scale


def _write_image(path, arr, dtype, scale):
    out = np.moveaxis(np.clip(arr[0], 0.0, 1.0), 0, 2)
    data = np.rint(out * scale).astype(dtype)
    if data.shape[2] == 1:
        data = data[:, :, 0]
    if not cv2.imwrite(str(path), data):
        raise FormatError(f"could not write {path}")


def cmd_train(args):
    config = _load_config(args)
    result = train(config, args.workdir)
    print(json.dumps({"workdir": str(args.workdir),
                      "final": result.final_metrics.to_json()}))
    return 0


def cmd_eval(args):
    config = _load_config(args)
    net = load_net(config, args.checkpoint)
    scenes = build_eval_set(config)
    per_scene, agg = evaluate(net, scenes, config, dump_dir=args.dump_dir)
    if args.per_scene:
        Path(args.per_scene).write_text(
            json.dumps([m.to_json() for m in per_scene], indent=2))
    print(json.dumps(agg.to_json()))
    return 0


def cmd_ablate(args):
    config = _load_config(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    table = ablate(config, args.workdir, seeds=seeds)
    print((Path(args.workdir) / "ablation.txt").read_text(), end="")
    return 0


def cmd_warp(args):
    image, dtype, scale = _read_image(args.image)
    flow = _read_flow_file(args.flow)
    _, _, h, w = flow.shape
    if args.bdw:
        if args.p0 is None:
            raise ParameterError("--bdw needs --p0 ROW,COL for the crop offset")
        py, px = (int(v) for v in args.p0.split(","))
        raw = Tensor(image)
        pair = FramePair.from_raw(raw, raw, (py, px), h, w)
        warped, valid = boundary_dilated_warp(pair, flow, args.direction)
    else:
        if image.shape[2] != h or image.shape[3] != w:
            raise ParameterError(
                f"image {image.shape[2]}x{image.shape[3]} vs flow {h}x{w}; "
                "use --bdw with a crop offset to warp inside a larger frame")
        warped, valid = warp_bilinear(Tensor(image), flow)
    _write_image(args.out, warped.numpy() * valid.numpy(), dtype, scale)
    return 0


def cmd_occlusion(args):
    mask = occlusion_mask(_read_flow_file(args.forward),
                          _read_flow_file(args.backward))
    data = (mask.numpy()[0, 0] * 255).astype(np.uint8)
    if not cv2.imwrite(str(args.out), data):
        raise FormatError(f"could not write {args.out}")
    return 0


def cmd_viz(args):
    rgb = flow_to_color(_read_flow_file(args.flow), max_norm=args.max_norm)
    if not cv2.imwrite(str(args.out), rgb[:, :, ::-1]):
        raise FormatError(f"could not write {args.out}")
    return 0


def cmd_convert(args):
    src = Path(args.src).suffix.lower()
    dst = Path(args.dst).suffix.lower()
    if src == ".flo" and dst == ".png":
        write_kitti_png(read_flo(args.src), args.dst)
    elif src == ".png" and dst == ".flo":
        write_flo(read_kitti_png(args.src)[0], args.dst)
    else:
        raise FormatError(f"cannot convert {src!r} to {dst!r}; "
                          "use .flo and .png")
    return 0


def cmd_gen(args):
    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        scene = generate_scene(args.seed_base + i, config.scene)
        cs = scene.sample()
        stem = out / f"{i:05d}"
        _write_image(f"{stem}_img1.png", scene.raw1, np.uint16, 65535.0)
        _write_image(f"{stem}_img2.png", scene.raw2, np.uint16, 65535.0)
        write_flo(cs.flow_f, f"{stem}_flow_f.flo")
        write_flo(cs.flow_b, f"{stem}_flow_b.flo")
        for tag, mask in (("occ_f", cs.oracle_f), ("occ_b", cs.oracle_b)):
            cv2.imwrite(f"{stem}_{tag}.png",
                        (mask.numpy()[0, 0] * 255).astype(np.uint8))
    manifest = {"count": args.count, "seed_base": args.seed_base,
                "scene": config.to_json()["scene"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(json.dumps({"out": str(out), "count": args.count}))
    return 0


def _add_config_args(p):
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted config override, repeatable")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="occflow",
        description="unsupervised occlusion-inpainting optical flow")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the 3-stage training schedule")
    _add_config_args(p)
    p.add_argument("--workdir", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dump-dir", help="write flow color and error maps here")
    p.add_argument("--per-scene", help="write per-scene metrics JSON here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train the ablation grid")
    _add_config_args(p)
    p.add_argument("--workdir", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("warp", help="apply a flow file to an image")
    p.add_argument("--image", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bdw", action="store_true",
                   help="sample the full frame instead of zero-filling")
    p.add_argument("--p0", help="crop offset ROW,COL inside the image (BDW)")
    p.add_argument("--direction", choices=("forward", "backward"),
                   default="forward")
    p.set_defaults(fn=cmd_warp)

    p = sub.add_parser("occlusion",
                       help="consistency-check two flow files into a mask PNG")
    p.add_argument("--forward", required=True)
    p.add_argument("--backward", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_occlusion)

    p = sub.add_parser("viz", help="render a flow file as a color-wheel PNG")
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-norm", type=float)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("convert", help="convert between .flo and KITTI PNG")
    p.add_argument("src")
    p.add_argument("dst")
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("gen", help="write a synthetic dataset to disk")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed-base", type=int, default=0)
    p.set_defaults(fn=cmd_gen)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as err:  # noqa: BLE001 - single reporting point
        kind = type(err).__name__ if isinstance(err, OccflowError) else "Error"
        print(json.dumps({"error": kind, "message": str(err)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
