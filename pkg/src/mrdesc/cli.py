"""Command-line entry point.

Exit codes: 0 success, 2 input/IO error, 3 numerical divergence,
4 checkpoint incompatibility.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import eval as ev
from . import network
from . import patchpipe as pp
from . import train as tr

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4


class InputError(Exception):
    pass


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _echo(pairs) -> None:
    for k, v in pairs:
        print(f"# {k} = {v}")
    sys.stdout.flush()


# configuration

def _coerce(field: dataclasses.Field, raw: str):
    kind = field.type if isinstance(field.type, type) else {"int": int, "float": float, "bool": bool,
                                                             "str": str}.get(str(field.type), str)
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw.strip())


def read_config(path) -> dict[str, object]:
    """Parse ``key = value`` lines (``#`` comments) into TrainConfig fields."""
    fields = {f.name: f for f in dataclasses.fields(tr.TrainConfig)}
    out: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise InputError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(fields[key], value)
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def resolve_config(path=None, **overrides) -> tr.TrainConfig:
    values = read_config(path) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return tr.TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from None


# commands

def cmd_synth(args) -> int:
    _echo([("command", "synth"), ("points", args.points), ("per_point", args.per_point), ("seed", args.seed),
           ("image_size", args.image_size), ("kind", args.kind), ("out", args.out)])
    try:
        scene = ds.gen_synth(args.points, args.per_point, args.image_size, args.seed, args.out, kind=args.kind)
    except (ds.SceneError, OSError, ValueError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    print(f"patches\t{len(scene)}")
    print(f"matches\t{len(scene.matches)}")
    print(f"points\t{len(scene.groups())}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        config = resolve_config(args.config, epochs=args.epochs, seed=args.seed)
    except (InputError, OSError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    run_log = args.run_log or f"{args.out_checkpoint}.log"
    _echo([("command", "train"), ("scenes", " ".join(args.scenes)), ("out_checkpoint", args.out_checkpoint),
           ("run_log", run_log)] + config.items())
    try:
        scenes = [ds.load_scene(p) for p in args.scenes]
    except (ds.SceneError, OSError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    try:
        state = tr.fit(config, scenes, run_log=run_log, checkpoint_path=args.out_checkpoint,
                       progress=lambda s: print(s.line(), flush=True))
    except tr.DivergenceError as exc:
        return _fail(EXIT_DIVERGED, f"{exc} (pairs {exc.pairs})")
    except (ds.SceneError, OSError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    print(f"epochs\t{state.epoch}")
    print(f"checkpoint\t{args.out_checkpoint}")
    return EXIT_OK


def _load_patches(path) -> tuple[np.ndarray, np.ndarray]:
    p = Path(path)
    if p.is_dir():
        scene = ds.load_scene(p)
        return np.asarray(scene.patches), scene.xy
    if p.suffix == ".npy":
        arr = np.load(p, allow_pickle=False).astype(np.float64)
        if arr.ndim != 3 or arr.shape[1:] != (pp.PATCH_SIZE, pp.PATCH_SIZE):
            raise InputError(f"{p}: expected k x {pp.PATCH_SIZE} x {pp.PATCH_SIZE} patch array, got {arr.shape}")
        return arr, np.zeros((len(arr), 2))
    raise InputError(f"{p}: expected a scene directory or a .npy patch array")


def cmd_extract(args) -> int:
    _echo([("command", "extract"), ("checkpoint", args.checkpoint), ("patches", args.patches), ("out", args.out)])
    try:
        net = network.load(args.checkpoint)
    except network.CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, str(exc))
    except OSError as exc:
        return _fail(EXIT_INPUT, str(exc))
    try:
        patches, xy = _load_patches(args.patches)
        desc = net.describe(pp.make_triples(patches))
        ev.write_descriptors(args.out, xy, desc)
    except (InputError, ds.SceneError, OSError, ValueError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    print(f"descriptors\t{len(desc)}")
    print(f"dimensions\t{desc.shape[1]}")
    return EXIT_OK


def cmd_eval_pairs(args) -> int:
    _echo([("command", "eval-pairs"), ("desc_a", args.desc_a), ("desc_b", args.desc_b or args.desc_a),
           ("pairs", args.pairs), ("report", args.report)])
    try:
        a = ev.read_descriptors(args.desc_a)
        b = ev.read_descriptors(args.desc_b) if args.desc_b else a
        pairs = ev.read_pairs(args.pairs)
        dist = ev.pair_distances(a.descriptors, b.descriptors, pairs)
        value = ev.fpr95(dist, pairs[:, 2])
        roc = ev.roc_points(dist, pairs[:, 2])
    except (OSError, ValueError, IndexError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    lines = [f"fpr95\t{value:.6f}", "threshold\ttpr\tfpr"]
    lines += [f"{t:.9g}\t{tpr:.6f}\t{fpr:.6f}" for t, tpr, fpr in roc]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.report:
        try:
            Path(args.report).write_text(text, encoding="ascii")
        except OSError as exc:
            return _fail(EXIT_INPUT, str(exc))
    return EXIT_OK


def cmd_eval_match(args) -> int:
    _echo([("command", "eval-match"), ("desc_a", args.desc_a), ("desc_b", args.desc_b),
           ("homography", args.homography), ("pixel_tol", args.pixel_tol), ("mutual", args.mutual)])
    try:
        a = ev.read_descriptors(args.desc_a)
        b = ev.read_descriptors(args.desc_b)
        h = ev.read_homography(args.homography)
        score = ev.matching_score(a, b, h, args.pixel_tol)
        ap = ev.mean_average_precision([(a, b, h)], args.pixel_tol)
        matches = ev.nn_match(a, b)
        mutual = ev.mutual_nn(a, b) if args.mutual else None
    except (OSError, ValueError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    print(f"mscore\t{score:.6f}")
    print(f"map\t{ap:.6f}")
    print(f"matches\t{len(matches)}")
    if mutual is not None:
        print(f"mutual\t{len(mutual)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrdesc", description="Multi-resolution patch descriptor toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--points", type=int, required=True)
    p.add_argument("--per-point", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=512)
    p.add_argument("--kind", choices=ds.KINDS, default="multi-image")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a descriptor network")
    p.add_argument("--scenes", nargs="+", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--run-log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="compute descriptors for patches")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patches", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval-pairs", help="FPR95 and ROC for labelled pairs")
    p.add_argument("--desc-a", required=True)
    p.add_argument("--desc-b")
    p.add_argument("--pairs", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval_pairs)

    p = sub.add_parser("eval-match", help="matching score and mAP for one image pair")
    p.add_argument("--desc-a", required=True)
    p.add_argument("--desc-b", required=True)
    p.add_argument("--homography", required=True)
    p.add_argument("--pixel-tol", type=float, default=3.0)
    p.add_argument("--mutual", action="store_true")
    p.set_defaults(func=cmd_eval_match)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
