"""Command line: ``autolink {gen,train,eval,render}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import TrainConfig, coerce, read_config_file
from .evalkit import detect_keypoints, evaluate, spectral_cluster
from .masking import ConfigError
from .synthdata import JOINT_NAMES, DatasetError, FigureSpec, generate_dataset, load_dataset, read_png
from .trainer import CheckpointError, ModelState, TrainingDiverged, fit, load_checkpoint, save_checkpoint

logger = logging.getLogger("autolink")

RUN_KEYS = {"data", "out", "log_every", "ckpt_every"}
FLAG_ALIASES = {"n_keypoints": ["--k"]}


class UsageError(Exception):
    pass


def _non_negative_int(text) -> int:
    try:
        value = int(str(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("training configuration (flag > --config file > default)")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        note = f.metadata.get("note")
        help_text = f"{f.metadata['help']} (default: {f.default})"
        if note:
            help_text += f" [{note}]"
        kwargs = {"dest": f.name, "default": None, "help": help_text}
        if f.metadata.get("choices"):
            kwargs["choices"] = f.metadata["choices"]
        if isinstance(f.default, bool):
            kwargs["metavar"] = "{true,false}"
        group.add_argument(flag, *FLAG_ALIASES.get(f.name, []), **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autolink", description="Keypoint-graph autoencoder on stick-figure images.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a stick-figure dataset")
    p.add_argument("--out", required=True, type=Path, help="dataset root (train/ and eval/ are created)")
    p.add_argument("--train", type=_non_negative_int, default=5000, help="training images (default: 5000)")
    p.add_argument("--eval", type=_non_negative_int, default=500, help="evaluation images (default: 500)")
    p.add_argument("--seed", type=int, default=0, help="base seed; sample i uses seed+i (default: 0)")
    p.add_argument("--image-size", type=int, default=64, help="image side in pixels (default: 64)")

    p = sub.add_parser("train", help="train detector, graph and decoder")
    p.add_argument("--data", type=Path, help="dataset root from `gen`")
    p.add_argument("--out", type=Path, help="run directory for checkpoints and metrics")
    p.add_argument("--config", type=Path, help="key=value file, one per line")
    p.add_argument("--log-every", type=_non_negative_int, default=None, help="log interval in steps (default: 100)")
    p.add_argument("--ckpt-every", type=_non_negative_int, default=None, help="checkpoint interval (default: 500)")
    p.add_argument("--resume", type=Path, help="continue from this checkpoint; its stored config must match")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="regress landmarks from detected keypoints and report errors")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path, help="dataset root holding train/ and eval/")
    p.add_argument("--out", type=Path, help="report path (default: <ckpt dir>/report.json)")
    p.add_argument("--no-figures", action="store_true", help="skip the matplotlib figures")

    p = sub.add_parser("render", help="write original | keypoints | edge-map panels")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("images", nargs="+", type=Path)
    return parser


# ------------------------------------------------------------------- commands
def cmd_gen(args) -> int:
    spec = FigureSpec(image_size=args.image_size)
    generate_dataset(args.out, args.train, args.eval, args.seed, spec)
    print(f"wrote {args.train} train and {args.eval} eval images to {args.out} (base seed {args.seed})")
    return 0


def resolve_run_config(args) -> tuple[TrainConfig, dict]:
    values: dict = {}
    if args.config is not None:
        allowed = {f.name for f in fields(TrainConfig)} | RUN_KEYS
        values.update(read_config_file(args.config, allowed))
    for f in fields(TrainConfig):
        v = getattr(args, f.name)
        if v is not None:
            values[f.name] = v
    def file_int(key, default):
        try:
            return _non_negative_int(values.pop(key, default))
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"{key}: {exc}") from None

    run = {
        "data": args.data if args.data is not None else values.pop("data", None),
        "out": args.out if args.out is not None else values.pop("out", None),
        "log_every": args.log_every if args.log_every is not None else file_int("log_every", 100),
        "ckpt_every": args.ckpt_every if args.ckpt_every is not None else file_int("ckpt_every", 500),
    }
    for key in RUN_KEYS:
        values.pop(key, None)
    if run["data"] is None or run["out"] is None:
        raise UsageError("train needs --data and --out (flags or config file)")
    cfg = TrainConfig.from_dict({k: coerce(k, v) for k, v in values.items()})
    return cfg, run


def cmd_train(args) -> int:
    cfg, run = resolve_run_config(args)
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(Path(run["data"]) / "train")
    if ds.image_size != cfg.image_size:
        raise ConfigError(f"dataset images are {ds.image_size}px but image_size={cfg.image_size}")
    if args.resume is not None:
        state = load_checkpoint(args.resume)
        if state.config != cfg:
            raise ConfigError(f"checkpoint {args.resume} was trained with a different configuration")
    else:
        state = ModelState(cfg)
        save_checkpoint(state, out / "ckpt_init")
    log_path = out / "train.log"
    logged: list[tuple[int, float]] = []

    with open(log_path, "w", encoding="utf-8") as log_fh:

        def on_log(step, loss):
            line = f"step={step} loss={loss:.6g}"
            print(line, flush=True)
            log_fh.write(line + "\n")
            logged.append((step, loss))

        status = "ok"
        try:
            history = fit(
                state,
                ds.images,
                log_every=run["log_every"],
                on_log=on_log,
                ckpt_every=run["ckpt_every"],
                on_checkpoint=lambda s: save_checkpoint(s, out / f"ckpt_{s.step}"),
            )
        except TrainingDiverged as exc:
            status = f"diverged: {exc}"
            history = None
            logger.error("%s", exc)
    metrics = {
        "status": status,
        "config": cfg.to_dict(),
        "step": state.step,
        "final_loss": logged[-1][1] if logged else None,
        "log": [{"step": s, "loss": v} for s, v in logged],
    }
    if history is not None:
        save_checkpoint(state, out / "ckpt_final")
        metrics["final_loss"] = history.losses[-1] if history.losses else None
        metrics["loss_per_step"] = history.losses
        if history.losses:
            from .plotting import plot_loss_curve

            plot_loss_curve(np.array(history.steps), np.array(history.losses), out / "loss_curve.png")
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2), encoding="utf-8")
    return 0 if history is not None else 1


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    train_ds = load_dataset(args.data / "train")
    eval_ds = load_dataset(args.data / "eval")
    report = evaluate(state, train_ds, eval_ds)
    out = args.out or args.ckpt.parent / "report.json"
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"error_mean={report.error_mean:.6f} pck={report.pck:.4f} mae_sum={report.mae_sum:.3f} n={report.n}")
    if not args.no_figures:
        from .plotting import plot_graph, plot_landmark_errors

        stem = out.with_suffix("")
        names = JOINT_NAMES if len(report.error_per_landmark) == len(JOINT_NAMES) else None
        names = names or [str(i) for i in range(len(report.error_per_landmark))]
        plot_landmark_errors(names, report.error_per_landmark, f"{stem}_landmarks.png")
        if state.graph.heatmap_mode != "keypoints_only":
            kps = detect_keypoints(state, eval_ds.images)
            plot_graph(
                state.graph.weight_matrix(),
                kps.mean(axis=0),
                spectral_cluster(state.graph, k=2),
                f"{stem}_graph.png",
            )
    return 0


def cmd_render(args) -> int:
    from .plotting import render_panels, save_png

    state = load_checkpoint(args.ckpt)
    args.out.mkdir(parents=True, exist_ok=True)
    ok = 0
    for path in args.images:
        try:
            img = read_png(path)
        except DatasetError as exc:
            logger.warning("skipping %s: %s", path, exc)
            continue
        if img.shape[-1] != state.config.image_size or img.shape[-2] != state.config.image_size:
            logger.warning("skipping %s: expected %dpx image", path, state.config.image_size)
            continue
        strip, _, edge8 = render_panels(state, img)
        save_png(strip, args.out / f"{path.stem}_panels.png")
        save_png(edge8, args.out / f"{path.stem}_edges.png")
        ok += 1
    print(f"rendered {ok}/{len(args.images)} images to {args.out}")
    return 0 if ok else 1


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "render": cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))
    except (DatasetError, CheckpointError, OSError, ValueError) as exc:
        print(f"autolink {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
