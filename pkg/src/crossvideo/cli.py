"""``crossvideo`` command line: datagen, pretrain, finetune, eval, ablate, sweep.

Exit codes: 0 success, 1 bad arguments or invalid configuration/data,
2 runtime failure (I/O, corrupt checkpoint, non-finite loss, ...).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .config import TrainConfig, load_config
from .errors import ValidationError
from .objective import TERMS

log = logging.getLogger("crossvideo")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _common() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flag from clobbering a global one
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="torch intra-op threads")
    common.add_argument(
        "--log-level", default=argparse.SUPPRESS, choices=["DEBUG", "INFO", "WARNING", "ERROR"], type=str.upper
    )
    return common


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="crossvideo", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def config_args(p):
        p.add_argument("--config", type=Path, help="JSON config file (defaults apply for missing keys)")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="dotted config override, e.g. finetune.epochs=10 (repeatable)",
        )

    p = sub.add_parser("datagen", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sequences", type=int, required=True, help="labelled sequences, split train/test")
    p.add_argument("--pretrain", type=int, default=None, help="unlabelled-use pretraining sequences (default 2x labelled)")
    p.add_argument("--train", type=int, default=None, help="explicit train count (rest of --sequences is test)")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--points", type=int, default=128)
    p.add_argument("--image-size", type=int, nargs=2, default=[32, 32], metavar=("H", "W"))
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--varied-layout", action="store_true", help="draw object shapes per sequence")

    p = sub.add_parser("pretrain", parents=[common], help="self-supervised pretraining")
    config_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None, help="state.ckpt to continue from")

    p = sub.add_parser("finetune", parents=[common], help="fit a segmentation head")
    config_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--task", choices=["action", "semantic"], default="action")
    p.add_argument("--mode", choices=["full", "linear", "scratch"], default="full")
    p.add_argument("--checkpoint", type=Path, default=None, help="pretrained model.ckpt (not used by scratch)")
    p.add_argument("--fraction", type=float, default=1.0)

    p = sub.add_parser("eval", parents=[common], help="score a segmentation model")
    config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--task", choices=["action", "semantic"], default=None)
    p.add_argument("--report", type=Path, required=True)

    p = sub.add_parser("ablate", parents=[common], help="loss-term ablation sweep")
    config_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("ablation.csv"))
    p.add_argument(
        "--disable", action="append", default=None, metavar="TERM[,TERM]",
        help=f"terms to switch off together, one group per flag; terms: {', '.join(TERMS)}",
    )
    p.add_argument("--seeds", type=_int_list, default=None)
    p.add_argument("--mode", choices=["full", "linear"], default="linear")

    p = sub.add_parser("sweep", parents=[common], help="data-efficiency sweep")
    config_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("sweep.csv"))
    p.add_argument("--fractions", type=_float_list, default=[0.1, 0.2, 0.4, 0.8])
    p.add_argument("--seeds", type=_int_list, default=None)
    p.add_argument("--mode", choices=["full", "linear"], default="full")
    return parser


# ---------------------------------------------------------------------------


def _mode(name):
    return "linear_probe" if name == "linear" else name


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config, args.overrides)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def run_id(command, payload) -> str:
    blob = json.dumps({"command": command, **payload}, sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def _echo(out_dir: Path, command, payload):
    rid = run_id(command, payload)
    log.info("run %s (%s)", rid, command)
    log.info("config %s", json.dumps(payload, sort_keys=True))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps({"run_id": rid, "command": command, **payload}, indent=2, sort_keys=True))
    return rid


def cmd_datagen(args):
    from .datagen import generate_dataset, split_counts

    if args.sequences < 1:
        raise ValidationError("--sequences must be >= 1", "sequences")
    seed = getattr(args, "seed", None) or 0
    if args.train is not None:
        if not 0 <= args.train <= args.sequences:
            raise ValidationError("--train must lie in [0, --sequences]", "train")
        counts = {"train": args.train, "test": args.sequences - args.train}
    else:
        counts = split_counts(args.sequences)
    counts["pretrain"] = 2 * args.sequences if args.pretrain is None else args.pretrain
    if counts["pretrain"] < 0:
        raise ValidationError("--pretrain must be >= 0", "pretrain")
    payload = {
        "counts": counts, "frames": args.frames, "points": args.points, "image_size": list(args.image_size),
        "objects": args.objects, "seed": seed, "shared_layout": not args.varied_layout,
    }
    _echo(args.out, "datagen", payload)
    generate_dataset(
        args.out, counts, args.frames, args.points, tuple(args.image_size), seed, args.objects,
        layout_seed=None if args.varied_layout else seed,
    )
    print(f"wrote {sum(counts.values())} sequences to {args.out}")


def cmd_pretrain(args):
    from .config import save_config
    from .datagen import load_dataset
    from .train import pretrain

    cfg = _resolve_config(args)
    _echo(args.out, "pretrain", {"config": cfg.to_dict(), "data": str(args.data)})
    save_config(cfg, args.out / "config.json")
    result = pretrain(load_dataset(args.data, "pretrain"), cfg, out_dir=args.out, resume_from=args.resume)
    with open(args.out / "loss_curve.csv", "w") as fh:
        fh.write("epoch,loss\n")
        fh.writelines(f"{i + 1},{v:.8f}\n" for i, v in enumerate(result.loss_curve))
    print(f"final loss {result.loss_curve[-1]:.5f}; checkpoint {result.checkpoint}")


def cmd_finetune(args):
    from .config import save_config
    from .datagen import load_dataset
    from .train import finetune_segmentation, save_segmentation_model, subsample_split

    cfg = _resolve_config(args)
    mode = _mode(args.mode)
    if mode != "scratch" and args.checkpoint is None:
        raise ValidationError(f"--mode {args.mode} needs --checkpoint", "checkpoint")
    payload = {
        "config": cfg.to_dict(), "data": str(args.data), "task": args.task, "mode": mode,
        "checkpoint": None if args.checkpoint is None else str(args.checkpoint), "fraction": args.fraction,
    }
    _echo(args.out, "finetune", payload)
    save_config(cfg, args.out / "config.json")
    train_set = subsample_split(load_dataset(args.data, "train"), args.fraction, cfg.seed)
    source = None if mode == "scratch" else args.checkpoint
    model = finetune_segmentation(train_set, source, cfg, mode=mode, task=args.task)
    path = args.out / "segmentation.ckpt"
    save_segmentation_model(model, path, {"mode": mode, "fraction": args.fraction, "seed": cfg.seed})
    print(f"trained on {len(train_set)} sequences; wrote {path}")


def cmd_eval(args):
    from .datagen import load_dataset
    from .evaluation import evaluate
    from .train import load_segmentation_model

    cfg = _resolve_config(args)
    model = load_segmentation_model(args.checkpoint)
    task = args.task or model.task
    if task != model.task:
        raise ValidationError(f"checkpoint was trained for task {model.task!r}, not {task!r}", "task")
    echo = {"config": cfg.to_dict(), "checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split}
    rid = run_id("eval", echo)
    log.info("run %s (eval)", rid)
    report = evaluate(
        model, load_dataset(args.data, args.split), task, class_count=model.num_classes,
        config_echo={**echo, "run_id": rid}, seed=cfg.seed,
    )
    args.report.parent.mkdir(parents=True, exist_ok=True)
    report.save(args.report)
    print(report.to_json())


def _seeds(args, cfg):
    return args.seeds if args.seeds else [cfg.seed]


def _splits(root):
    from .datagen import load_dataset

    return load_dataset(root, "pretrain"), load_dataset(root, "train"), load_dataset(root, "test")


def cmd_ablate(args):
    from .evaluation import ablation_rows, sweep

    cfg = _resolve_config(args)
    groups = []
    for item in args.disable or ["cross_video,cross_frame"]:
        terms = tuple(t.strip() for t in item.split(",") if t.strip())
        bad = [t for t in terms if t not in TERMS]
        if bad or not terms:
            raise ValidationError(f"unknown loss term {bad[0] if bad else item!r}; choose from {TERMS}", "disable")
        groups.append(terms)
    seeds = _seeds(args, cfg)
    _echo(args.out.parent, "ablate", {"config": cfg.to_dict(), "disable": [list(g) for g in groups], "seeds": seeds})
    rows = ablation_rows(groups, seeds=seeds, mode=_mode(args.mode))
    results = sweep(rows, *_splits(args.data), cfg, out_csv=args.out)
    _summary(results, "id")


def cmd_sweep(args):
    from .evaluation import data_efficiency_rows, sweep

    cfg = _resolve_config(args)
    for f in args.fractions:
        if not 0 < f <= 1:
            raise ValidationError(f"fraction {f} outside (0, 1]", "fractions")
    seeds = _seeds(args, cfg)
    _echo(args.out.parent, "sweep", {"config": cfg.to_dict(), "fractions": args.fractions, "seeds": seeds})
    rows = data_efficiency_rows(args.fractions, seeds=seeds, mode=_mode(args.mode))
    results = sweep(rows, *_splits(args.data), cfg, out_csv=args.out)
    _summary(results, "id")


def _summary(results, key):
    for r in results:
        print(f"{r[key]:<32} acc {r['accuracy']:6.2f}")


COMMANDS = {
    "datagen": cmd_datagen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID

    logging.basicConfig(
        level=getattr(logging, getattr(args, "log_level", "INFO")),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    threads = getattr(args, "threads", None)
    if threads is not None:
        if threads < 1:
            sys.stderr.write("crossvideo: error: --threads must be >= 1\n")
            return EXIT_INVALID
        torch.set_num_threads(threads)
    try:
        COMMANDS[args.command](args)
    except ValidationError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID
    except Exception as exc:  # runtime, I/O, checkpoint and numerical failures
        log.error("%s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
