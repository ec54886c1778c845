"""Command-line entry point: ``anatoseg <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines) and
``--seed``; explicit flags override file values, and ``PRP_SEED`` supplies the
seed when neither does.  Exit codes: 0 ok, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .taxonomy import TaxonomyError, infer_matrix, load_taxonomy

log = logging.getLogger("anatoseg")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def read_config(path: str | Path) -> dict[str, str]:
    """Parse flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config(path: str | Path, values: dict) -> None:
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def effective(args: argparse.Namespace, keys: list[str]) -> dict:
    """Merge defaults < config file < explicit flags for ``keys``."""
    values = {}
    if getattr(args, "config", None):
        values.update(read_config(args.config))
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    seed = values.get("seed")
    if seed is None and os.environ.get("PRP_SEED"):
        seed = os.environ["PRP_SEED"]
    values["seed"] = int(seed) if seed is not None else 0
    return values


def _taxonomy(args):
    return load_taxonomy(args.taxonomy) if getattr(args, "taxonomy", None) else load_taxonomy()


# ---------------------------------------------------------------------------
# subcommands


def cmd_taxonomy(args) -> int:
    graph = _taxonomy(args)
    matrix = infer_matrix(graph)
    if args.action == "validate":
        print(f"ok: {graph.n} classes, {len(graph.contains_edges)} contains, "
              f"{len(graph.excludes_edges)} excludes")
        return EXIT_OK
    order = sorted(range(graph.n), key=lambda k: graph.names[k]) if args.class_order == "name" else None
    sys.stdout.write(matrix.to_csv(order))
    return EXIT_OK


TRAIN_KEYS = ["epochs", "phase1", "batch_size", "lr", "lr_decay", "lambda_hats", "eps", "anatomy_dce",
              "aug_p", "blocks", "d_gap", "conditioning", "seed"]
GEN_KEYS = ["canvas", "size", "scenes", "noise", "seed"]


def cmd_gen_data(args) -> int:
    from .synthdata import GeneratorConfig, generate_dataset

    values = effective(args, GEN_KEYS)
    cfg = GeneratorConfig.from_mapping(values)
    records = generate_dataset(args.out, cfg, taxonomy=_taxonomy(args), workers=args.workers)
    write_config(Path(args.out) / "config.txt", values)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def _train_config(args):
    from .training import TrainConfig

    values = effective(args, TRAIN_KEYS)
    return TrainConfig.from_mapping(values)


def cmd_train(args) -> int:
    from .training import train

    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", cfg.to_mapping())
    _, res = train(args.data, cfg, _taxonomy(args), out)
    best = res["best_epoch"]
    print(f"best epoch {best}: val mean Dice {res['history'][best]:.2f}; checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .training import load_checkpoint

    bundle, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    rep = evaluate(bundle, args.data, args.split, dump_dir=out / "masks" if args.dump_masks else None)
    rep.write(out)
    write_config(out / "config.txt", {"checkpoint": args.checkpoint, "data": args.data, "split": args.split,
                                      **bundle.config.to_mapping()})
    print(f"mean Dice {rep.mean_dice:.2f}  mean leak {rep.mean_leak:.4f}  mean overlap {rep.mean_overlap:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .evaluation import predict_tiled
    from .synthdata import read_image, write_mask
    from .taxonomy import SCALES
    from .training import load_checkpoint

    bundle, _ = load_checkpoint(args.checkpoint)
    names = bundle.taxonomy.names
    if args.class_name not in names:
        raise InputError(f"unknown class {args.class_name!r}; known: {', '.join(names)}")
    cls = bundle.taxonomy.classes[names.index(args.class_name)]
    scale = args.scale or cls.scale
    if scale not in SCALES:
        raise InputError(f"unknown scale {scale!r}; expected one of {SCALES}")
    tile = args.tile
    step = 2 ** bundle.config.backbone.n_blocks
    if tile % step:
        raise InputError(f"tile size must be a multiple of {step}")
    image = read_image(args.image)
    mask = predict_tiled(bundle, image, cls.id, SCALES.index(scale), tile)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_mask(args.out, mask)
    print(f"wrote {mask.shape[0]}x{mask.shape[1]} mask to {args.out}")
    return EXIT_OK


def cmd_check_anatomy(args) -> int:
    from .evaluation import check_anatomy

    report = check_anatomy(args.masks, _taxonomy(args))
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluation import run_ablation

    cfg = _train_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    arms = args.arms.split(",")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", cfg.to_mapping())
    result = run_ablation(args.data, cfg, seeds, arms, _taxonomy(args), out)
    for arm, stats in result.summary().items():
        parts = [f"{k} {v[0]:.4f}±{v[1]:.4f}" for k, v in stats.items() if isinstance(v, tuple)]
        print(f"{arm}: " + ", ".join(parts) + (f" ({stats['n_failed']} failed)" if stats["n_failed"] else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory with manifest.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--phase1", type=int, help="number of supervised-only epochs")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--lambda-hats", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--anatomy-dce", choices=["similarity", "loss"])
    p.add_argument("--aug-p", type=float)
    p.add_argument("--blocks", help="encoder widths, e.g. '6,12,24,48'")
    p.add_argument("--d-gap", type=int)
    p.add_argument("--conditioning", choices=["token", "onehot"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anatoseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file; flags override it")
    common.add_argument("--seed", type=int, help="falls back to $PRP_SEED, then 0")
    common.add_argument("--workers", type=int, default=1, help="data-pipeline processes")
    common.add_argument("--taxonomy", help="taxonomy file (default: bundled kidney taxonomy)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("taxonomy", parents=[common], help="validate a taxonomy or print its relation matrix")
    p.add_argument("action", choices=["validate", "print-matrix"])
    p.add_argument("file", nargs="?", help="taxonomy file (same as --taxonomy)")
    p.add_argument("--class-order", choices=["file", "name"], default="file")
    p.set_defaults(func=cmd_taxonomy)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--canvas", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="two-phase training")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", required=True)
    p.add_argument("--dump-masks", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--scale", help="defaults to the class's native scale")
    p.add_argument("--tile", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("check-anatomy", parents=[common], help="violation report for a mask directory")
    p.add_argument("masks", help="directory of <group>/<class>.png masks")
    p.add_argument("--out")
    p.set_defaults(func=cmd_check_anatomy)

    p = sub.add_parser("ablate", parents=[common], help="run the ablation arms over several seeds")
    _train_flags(p)
    p.add_argument("--seeds", help="comma list, default seed..seed+2")
    p.add_argument("--arms", default="full,no-anatomy-loss,no-token")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "file", None):
        args.taxonomy = args.file
    from .training import CheckpointError, TrainingError

    try:
        return args.func(args)
    except (TaxonomyError, InputError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
