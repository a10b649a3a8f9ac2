"""Command-line entry point for the whole pipeline.

Subcommands: prepare, synth, train, sweep, compare-losses, eval,
cross-eval, overlay, plot.  Exit codes: 0 success, 1 user error (bad
flags or paths, one-line message), 2 runtime failure (diverged training,
I/O trouble) with diagnostics.

Every artifact-producing run writes a key=value config-echo file next to
its outputs capturing all effective parameters and seeds;
``echo_to_argv`` turns that file back into an argv that reproduces the
run bit-for-bit on the tiny backbone.
"""

import argparse
import os
import sys
import traceback

from .data import (LAYOUT_PRESETS, DatasetManifest, LayoutSpec, SynthSpec,
                   build_manifest, generate_synthetic)
from .errors import (CheckpointError, DuplicateRecord, EmptyTrainSplit,
                     IrisFtError, MalformedCsv, MalformedManifest,
                     NoPairsFound)
from .evaluate import cross_evaluate, emit_overlays, evaluate
from .model import PROMPT_STRATEGIES, load_checkpoint
from .plotting import plot_loss_curves, plot_pr_curves
from .train import (LOSS_KINDS, TrainConfig, compare_losses, sweep_gamma,
                    train)

_USER_ERRORS = (ValueError, FileNotFoundError, NotADirectoryError,
                NoPairsFound, MalformedManifest, MalformedCsv,
                DuplicateRecord, CheckpointError, EmptyTrainSplit)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config echo

# flags that may be passed multiple times (one echo line per occurrence);
# other list-valued args came from a single comma-separated flag value
_REPEATED_KEYS = {"arm", "loss_csv", "pr_csv"}


def write_config_echo(path, subcommand: str, args: argparse.Namespace) -> str:
    """Dump all effective parameters as key=value lines."""
    lines = [f"subcommand={subcommand}"]
    for key in sorted(vars(args)):
        if key in ("func", "subcommand"):
            continue
        value = getattr(args, key)
        if value is None:
            continue
        if isinstance(value, bool):
            lines.append(f"{key}={'true' if value else 'false'}")
        elif isinstance(value, (list, tuple)):
            if key in _REPEATED_KEYS:
                for item in value:
                    lines.append(f"{key}={item}")
            else:
                lines.append(f"{key}={','.join(str(v) for v in value)}")
        else:
            lines.append(f"{key}={value}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return str(path)


def echo_to_argv(path) -> list:
    """Rebuild the argv of a run from its config-echo file."""
    argv = []
    with open(path) as fh:
        for line in fh.read().splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key == "subcommand":
                argv.insert(0, value)
                continue
            flag = "--" + key.replace("_", "-")
            if value == "true":
                argv.append(flag)
            elif value == "false":
                continue
            else:
                argv.extend([flag, value])
    return argv


def _echo_for_file_artifact(artifact_path: str) -> str:
    stem = os.path.splitext(os.path.basename(artifact_path))[0]
    return os.path.join(os.path.dirname(os.path.abspath(artifact_path)),
                        f"{stem}_config.txt")


# ---------------------------------------------------------------------------
# argument plumbing

def _comma_floats(text: str) -> list:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad numeric list {text!r}") from exc


def _comma_names(text: str) -> list:
    return [tok.strip() for tok in text.split(",") if tok.strip()]


def _train_config_from_args(args) -> TrainConfig:
    return TrainConfig(
        loss=args.loss, alpha=args.alpha, gamma=args.gamma,
        triplet_margin=args.triplet_margin,
        triplet_samples=args.triplet_samples, lr=args.lr,
        epochs=args.epochs, batch_size=args.batch_size,
        momentum=args.momentum, seed=args.seed, backbone=args.backbone,
        input_resolution=args.input_size, base_channels=args.base_channels,
        embed_dim=args.embed_dim, perturb=not args.no_perturb,
        max_shift=args.max_shift, max_scale=args.max_scale,
        checkpoint_interval=args.checkpoint_interval,
        foundation_checkpoint=args.checkpoint or "",
        foundation_model_type=args.model_type)


def _add_train_flags(p):
    p.add_argument("--manifest", required=True, help="manifest TSV path")
    p.add_argument("--loss", default="focal", choices=LOSS_KINDS)
    p.add_argument("--alpha", type=float, default=0.25,
                   help="focal class-balance weight")
    p.add_argument("--gamma", type=float, default=2.0,
                   help="focal focusing exponent")
    p.add_argument("--triplet-margin", type=float, default=1.0)
    p.add_argument("--triplet-samples", type=int, default=256,
                   help="triplets sampled per image")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--momentum", type=float, default=0.9,
                   help="SGD momentum (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backbone", default="tiny",
                   choices=("tiny", "foundation"))
    p.add_argument("--input-size", type=int, default=256,
                   help="tiny backbone input resolution (multiple of 16)")
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=8)
    p.add_argument("--no-perturb", action="store_true",
                   help="disable training-time box perturbation")
    p.add_argument("--max-shift", type=int, default=10)
    p.add_argument("--max-scale", type=int, default=10)
    p.add_argument("--checkpoint-interval", type=int, default=0,
                   help="save every N epochs (0: final only)")
    p.add_argument("--checkpoint", default=None,
                   help="foundation base checkpoint (.pth)")
    p.add_argument("--model-type", default="vit_h",
                   help="foundation architecture registry key")
    p.add_argument("--out", required=True, help="output directory")


def _add_eval_shared(p):
    p.add_argument("--prompt-mode", default="two-pass",
                   choices=PROMPT_STRATEGIES)
    p.add_argument("--threshold", type=float, default=0.5,
                   help="binarization threshold on sigmoid probability")


# ---------------------------------------------------------------------------
# handlers

def _cmd_prepare(args):
    if args.layout not in LAYOUT_PRESETS:
        raise ValueError(f"unknown layout {args.layout!r}; "
                         f"choices: {sorted(LAYOUT_PRESETS)}")
    preset = LAYOUT_PRESETS[args.layout]
    layout = LayoutSpec(
        image_glob=args.image_glob or preset.image_glob,
        mask_pattern=args.mask_pattern or preset.mask_pattern,
        identity_regex=args.identity_regex or preset.identity_regex)
    manifest = build_manifest(args.root, layout, split_seed=args.split_seed,
                              train_fraction=args.train_fraction,
                              name=args.name)
    manifest.save(args.out)
    write_config_echo(_echo_for_file_artifact(args.out), "prepare", args)
    print(f"wrote {args.out}: {len(manifest.split('train'))} train / "
          f"{len(manifest.split('test'))} test records, "
          f"{len(manifest.identities('train'))}/"
          f"{len(manifest.identities('test'))} identities")


def _cmd_synth(args):
    spec = SynthSpec(count=args.count, image_size=args.image_size,
                     images_per_identity=args.images_per_identity,
                     occluder_prob=args.occluder_prob,
                     noise_sigma=args.noise_sigma, seed=args.seed)
    manifest = generate_synthetic(spec, args.out,
                                  train_fraction=args.train_fraction)
    write_config_echo(os.path.join(args.out, "config_echo.txt"),
                      "synth", args)
    print(f"wrote {len(manifest.records)} synthetic samples under {args.out}")


def _cmd_train(args):
    manifest = DatasetManifest.load(args.manifest)
    config = _train_config_from_args(args)
    ckpt, log = train(manifest, config, args.out)
    write_config_echo(os.path.join(args.out, "config_echo.txt"),
                      "train", args)
    print(f"checkpoint: {ckpt}")
    print(f"final epoch mean loss: {log.mean_losses[-1]:.6g}")


def _cmd_sweep(args):
    manifest = DatasetManifest.load(args.manifest)
    config = _train_config_from_args(args)
    results = sweep_gamma(manifest, config, args.gammas, args.out,
                          eval_prompt_mode=args.prompt_mode,
                          eval_threshold=args.threshold)
    write_config_echo(os.path.join(args.out, "config_echo.txt"),
                      "sweep", args)
    for res in results:
        if res["error"] is None:
            print(f"gamma={res['key']}: mean IoU "
                  f"{res['report'].mean_iou:.4f} "
                  f"± {res['report'].std_iou:.4f}")
        else:
            print(f"gamma={res['key']}: FAILED: {res['error']}")


def _cmd_compare_losses(args):
    manifest = DatasetManifest.load(args.manifest)
    config = _train_config_from_args(args)
    results = compare_losses(manifest, config, args.losses, args.out,
                             eval_prompt_mode=args.prompt_mode,
                             eval_threshold=args.threshold)
    write_config_echo(os.path.join(args.out, "config_echo.txt"),
                      "compare-losses", args)
    for res in results:
        if res["error"] is None:
            print(f"loss={res['key']}: mean IoU "
                  f"{res['report'].mean_iou:.4f} "
                  f"± {res['report'].std_iou:.4f}")
        else:
            print(f"loss={res['key']}: FAILED: {res['error']}")


def _cmd_eval(args):
    manifest = DatasetManifest.load(args.manifest)
    model, _ = load_checkpoint(args.checkpoint)
    report = evaluate(model, manifest, split=args.split,
                      prompt_mode=args.prompt_mode,
                      threshold=args.threshold,
                      native_resolution=args.native_iou,
                      checkpoint_id=os.path.basename(args.checkpoint))
    report.save(args.report)
    if args.pr_csv:
        report.pr_to_csv(args.pr_csv)
    write_config_echo(_echo_for_file_artifact(args.report), "eval", args)
    print(f"mean IoU {report.mean_iou:.4f} ± {report.std_iou:.4f} "
          f"({report.mean_iou_percent:.2f}% ± {report.std_iou_percent:.2f}%), "
          f"{len(report.per_image)} images, {report.quarantined} quarantined")


def _parse_arm(text: str):
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(
            f"bad --arm {text!r}; expected NAME:MANIFEST:CHECKPOINT")
    return parts[0], parts[1], parts[2]


def _cmd_cross_eval(args):
    manifests, checkpoints = {}, {}
    for arm in args.arm:
        name, manifest_path, ckpt = _parse_arm(arm)
        if name in manifests:
            raise ValueError(f"duplicate arm name {name!r}")
        manifests[name] = DatasetManifest.load(manifest_path)
        checkpoints[name] = ckpt
    cells = cross_evaluate(checkpoints, manifests, out_dir=args.out,
                           prompt_mode=args.prompt_mode,
                           threshold=args.threshold)
    write_config_echo(os.path.join(args.out, "config_echo.txt"),
                      "cross-eval", args)
    for cell in cells:
        if cell["error"] is None:
            print(f"{cell['train']} -> {cell['test']}: mean IoU "
                  f"{cell['report'].mean_iou:.4f}")
        else:
            print(f"{cell['train']} -> {cell['test']}: FAILED: "
                  f"{cell['error']}")


def _cmd_overlay(args):
    manifest = DatasetManifest.load(args.manifest)
    model, _ = load_checkpoint(args.checkpoint)
    written = emit_overlays(model, manifest, args.out, args.count,
                            seed=args.seed, prompt_mode=args.prompt_mode,
                            threshold=args.threshold, split=args.split)
    write_config_echo(os.path.join(args.out, "config_echo.txt"),
                      "overlay", args)
    print(f"wrote {len(written)} overlays under {args.out}")


def _cmd_plot(args):
    if not args.loss_csv and not args.pr_csv:
        raise ValueError("need --loss-csv and/or --pr-csv inputs")
    os.makedirs(args.out, exist_ok=True)
    labels = _comma_names(args.labels) if args.labels else None
    written = []
    if args.loss_csv:
        written.append(plot_loss_curves(
            args.loss_csv, os.path.join(args.out, "loss_curves.png"),
            labels if args.loss_csv and not args.pr_csv else None))
    if args.pr_csv:
        written.append(plot_pr_curves(
            args.pr_csv, os.path.join(args.out, "pr_curves.png"),
            labels if args.pr_csv and not args.loss_csv else None))
    write_config_echo(os.path.join(args.out, "config_echo.txt"),
                      "plot", args)
    for path in written:
        print(f"wrote {path}")


# ---------------------------------------------------------------------------
# parser assembly

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="irisft",
                     description="Prompt-conditioned iris segmentation "
                                 "fine-tuning toolkit")
    sub = parser.add_subparsers(dest="subcommand", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("prepare", help="scan a dataset into a manifest")
    p.add_argument("--root", required=True, help="dataset directory")
    p.add_argument("--layout", default="generic",
                   choices=sorted(LAYOUT_PRESETS))
    p.add_argument("--image-glob", default=None)
    p.add_argument("--mask-pattern", default=None)
    p.add_argument("--identity-regex", default=None)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--name", default=None)
    p.add_argument("--out", required=True, help="manifest output path")
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, default=80)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--images-per-identity", type=int, default=4)
    p.add_argument("--occluder-prob", type=float, default=0.3)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="fine-tune a backbone")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="gamma sweep: train+eval per value")
    _add_train_flags(p)
    _add_eval_shared(p)
    p.add_argument("--gammas", type=_comma_floats, required=True,
                   help="comma-separated focusing exponents, e.g. 1,2,5")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("compare-losses",
                       help="loss-family comparison: train+eval per loss")
    _add_train_flags(p)
    _add_eval_shared(p)
    p.add_argument("--losses", type=_comma_names, required=True,
                   help="comma-separated loss kinds, e.g. focal,dice,triplet")
    p.set_defaults(func=_cmd_compare_losses)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="trained .npz")
    _add_eval_shared(p)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--native-iou", action="store_true",
                   help="score IoU at native image resolution")
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--pr-csv", default=None,
                   help="also write the PR curve as CSV")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("cross-eval",
                       help="every checkpoint on every other dataset")
    p.add_argument("--arm", action="append", required=True,
                   metavar="NAME:MANIFEST:CHECKPOINT",
                   help="repeatable; at least two arms")
    _add_eval_shared(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_cross_eval)

    p = sub.add_parser("overlay", help="qualitative side-by-side renderings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    _add_eval_shared(p)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--count", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_overlay)

    p = sub.add_parser("plot", help="emit loss-curve / PR figures")
    p.add_argument("--loss-csv", action="append", default=None,
                   help="repeatable train-log CSV")
    p.add_argument("--pr-csv", action="append", default=None,
                   help="repeatable PR CSV")
    p.add_argument("--labels", default=None,
                   help="comma-separated legend labels")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        args.func(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except IrisFtError as exc:
        print(f"runtime failure ({type(exc).__name__}): {exc}",
              file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
