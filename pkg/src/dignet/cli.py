"""``dignet`` command line: train, eval, ablate, visualize, gradcheck, gen-data.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
3 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import ablation
from . import tensor as tc
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_run_config
from .data import SyntheticSpec, write_dataset
from .gradcheck import gradcheck
from .imageio import colorize_labels, ensure_dir, read_ppm, u8_to_image, write_pgm, write_ppm
from .model import NetworkConfig, build_dignet, predict_labels, run_inference
from .tensor import Tensor
from .training import TrainingDivergedError, evaluate, format_log_line, load_params, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("dignet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}")
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError("need at least one non-negative seed")
    return seeds


def _out_dir(args, cfg) -> str:
    out = args.out or cfg.out
    if not out:
        raise UsageError("no output directory: pass --out or set \"out\" in the config")
    return out


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    epochs = cfg.epochs if args.epochs is None else args.epochs
    out = _out_dir(args, cfg)
    dataset = cfg.load_data()
    ensure_dir(out)
    log_path = os.path.join(out, "metrics.jsonl")
    with open(log_path, "w") as fh:
        def emit(rec):
            fh.write(format_log_line(rec) + "\n")
            fh.flush()
        try:
            result = train(cfg.network, dataset, epochs, seed, cfg.train, log=emit)
        except TrainingDivergedError as exc:
            if exc.last_good is not None:
                save_checkpoint(os.path.join(out, "last_good.digc"), exc.last_good)
            raise
    ckpt_path = os.path.join(out, "checkpoint.digc")
    save_checkpoint(ckpt_path, result.checkpoint)
    print(f"wrote {ckpt_path} and {log_path}")
    return EXIT_OK


def _model_from_checkpoint(ckpt):
    net = ckpt.config.get("network")
    if not isinstance(net, dict) or "routing" not in net:
        raise CheckpointError("checkpoint does not hold a DIGNet network config")
    model = build_dignet(NetworkConfig.from_dict(net), 0)
    load_params(model, ckpt)
    return model


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    ckpt = load_checkpoint(args.checkpoint, expected_config=cfg.snapshot())
    model = _model_from_checkpoint(ckpt)
    dataset = cfg.load_data()
    metrics = evaluate(model, dataset.val, dataset.num_classes, cfg.train.eval_batch_size,
                       T=args.T)
    metrics["T"] = model.config.T if args.T is None else args.T
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    seeds = args.seeds if args.seeds is not None else [cfg.seed]
    epochs = cfg.epochs if args.epochs is None else args.epochs
    cases = ablation.cases_for_axis(args.axis, cfg.network)
    threads = ablation.thread_count()
    dataset = cfg.load_data()
    rows = ablation.run_ablation(cases, dataset, seeds, epochs, cfg.train, threads)
    parent = os.path.dirname(os.path.abspath(args.out))
    ensure_dir(parent)
    ablation.write_csv(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    if not args.no_plot:
        from .plotting import figure_path, plot_ablation

        print(f"wrote {plot_ablation(rows, args.axis, figure_path(args.out))}")
    return EXIT_OK


def feedback_heatmap(signal: Tensor) -> np.ndarray:
    """Channel-mean |F| of the first batch item, scaled so the maximum maps to 255."""
    mag = np.abs(signal.data[0]).mean(axis=0)
    peak = float(mag.max())
    if peak <= 0:
        return np.zeros(mag.shape, np.uint8)
    return np.clip(np.rint(mag / peak * 255.0), 0, 255).astype(np.uint8)


def cmd_visualize(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = _model_from_checkpoint(ckpt)
    rgb = read_ppm(args.image)
    image = Tensor(u8_to_image(rgb)[None])
    try:
        model.backbone.check_input(image)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    T = model.config.T if args.T is None else args.T
    if T < 1:
        raise UsageError("--T must be at least 1")
    out = run_inference(model, image, T=T)
    ensure_dir(args.out)
    h, w = rgb.shape[:2]
    written = []
    for t, logits in enumerate(out.logits, start=1):
        labels = predict_labels(tc.bilinear_upsample(logits, h, w))[0]
        path = os.path.join(args.out, f"iter_{t}.ppm")
        write_ppm(path, colorize_labels(labels))
        written.append(path)
    if out.feedback:
        final = out.feedback[-1]
        for i, active in enumerate(model.config.effective_mask, start=1):
            if active:
                path = os.path.join(args.out, f"feedback_stage_{i}.pgm")
                write_pgm(path, feedback_heatmap(final[i]))
                written.append(path)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck(seed=args.seed, perturb=args.perturb_grad)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_gen_data(args) -> int:
    try:
        with open(args.spec_path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"spec file not found: {args.spec_path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.spec_path}: not valid JSON ({exc})") from None
    try:
        spec = SyntheticSpec.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{args.spec_path}: invalid dataset spec ({exc})") from None
    manifest = write_dataset(args.out, spec, args.train, args.val)
    print(f"wrote {args.train + args.val} samples to {args.out} "
          f"(K={manifest['num_classes']})")
    return EXIT_OK


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dignet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a network from a run config")
    s.add_argument("config")
    s.add_argument("--seed", type=_nonneg)
    s.add_argument("--epochs", type=_positive)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    s.add_argument("config")
    s.add_argument("checkpoint")
    s.add_argument("--T", type=_positive, help="unroll depth (default: the trained T)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="sweep one ablation axis and write a CSV table")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=ablation.AXES)
    s.add_argument("--out", required=True, help="CSV path; the figure goes next to it")
    s.add_argument("--seeds", type=_seed_list, help="comma-separated seeds")
    s.add_argument("--epochs", type=_positive)
    s.add_argument("--no-plot", action="store_true", help="skip the PNG figure")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("visualize", help="dump per-iteration predictions and feedback maps")
    s.add_argument("checkpoint")
    s.add_argument("image", help="binary PPM input image")
    s.add_argument("--T", type=_positive)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_visualize)

    s = sub.add_parser("gradcheck", help="finite-difference check of BPTT gradients")
    s.add_argument("--seed", type=_nonneg, default=0)
    s.add_argument("--perturb-grad", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    s.add_argument("spec_path")
    s.add_argument("--train", type=_nonneg, required=True)
    s.add_argument("--val", type=_nonneg, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"dignet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TrainingDivergedError, ValueError, OSError) as exc:
        print(f"dignet {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
