"""``led`` command line.

Exit codes: 0 success, 1 bad config or arguments, 2 non-finite objective
(the last finite state is saved as ``last_finite.ledf``), 3 IO failure.
"""

import argparse
import json
import logging
import sys

import numpy as np

from . import experiments
from .autodiff import Rng
from .config import ExperimentConfig
from .errors import CheckpointError, LedError, NonFiniteLossError, ParseError
from .figures import emit_density_map

EXIT_OK, EXIT_CONFIG, EXIT_NONFINITE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("led")


def _floats(text, n):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers")
    return vals


def _load_config(args):
    cfg = ExperimentConfig.load(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["training.seed"] = args.seed
    if getattr(args, "data_dir", None):
        overrides["data.data_dir"] = args.data_dir
    if getattr(args, "epochs", None) is not None:
        overrides["training.epochs"] = args.epochs
    return cfg.override(**overrides) if overrides else cfg


def cmd_train(args):
    cfg = _load_config(args)
    summary = experiments.run_experiment(cfg, args.output, full=args.full or None,
                                         resume=args.resume, figures=not args.no_figures)
    print(json.dumps(summary, sort_keys=True))


def cmd_eval(args):
    nll = experiments.evaluate_checkpoint(args.checkpoint, args.k, args.split, args.data_dir)
    print(repr(nll))


def cmd_sample(args):
    gen = Rng(args.seed).fresh("sample")
    x = experiments.sample_checkpoint(args.checkpoint, args.n, gen, latent=args.latent)
    np.savetxt(args.output, x, delimiter=",", fmt="%.17g")


def cmd_density_map(args):
    box = (tuple(args.box[:2]), tuple(args.box[2:]))
    if args.which == "standard-normal":
        def fn(p):
            return np.exp(-0.5 * (p**2).sum(axis=1)) / (2 * np.pi)
    else:
        if not args.checkpoint:
            raise LedError(f"--which {args.which} needs --checkpoint")
        fn = experiments.latent_density_fn(args.checkpoint, args.which)
    emit_density_map(fn, box, args.resolution, args.output, args.csv)


def cmd_nica_demo(args):
    cfg = _load_config(args)
    print(json.dumps(experiments.run_nica_demo(cfg, args.output), sort_keys=True))


def cmd_sweep(args):
    cfg = _load_config(args)
    rows = experiments.run_sweep(cfg, args.axis, args.output, full=args.full or None)
    for r in rows:
        print(json.dumps(r, sort_keys=True))


def cmd_prepare_mnist(args):
    from .data import prepare_desk_mnist

    out = prepare_desk_mnist(args.source, args.output, seed=args.seed)
    print(out)


def build_parser():
    p = argparse.ArgumentParser(prog="led", description="Flow-prior VAE experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True, help="experiment config file")
    t.add_argument("--full", action="store_true", help="use the full MNIST split instead of the subset")
    t.add_argument("--seed", type=int, help="override [training] seed")
    t.add_argument("--epochs", type=int, help="override [training] epochs")
    t.add_argument("--data-dir", help="MNIST directory (default: $LED_DATA_DIR)")
    t.add_argument("--output", help="output directory (default: [paths] output_dir)")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--no-figures", action="store_true", help="skip the toy figure panels")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="importance-sampled NLL of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--k", type=int, help="importance samples (default: the config's k_importance)")
    e.add_argument("--split", choices=("train", "valid", "test"), default="valid")
    e.add_argument("--data-dir", help="MNIST directory (default: $LED_DATA_DIR)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="draw samples from a checkpoint into a CSV file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("-n", type=int, required=True, help="number of samples")
    s.add_argument("-o", "--output", required=True, help="CSV output path")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--latent", action="store_true", help="write prior samples z instead of x")
    s.set_defaults(func=cmd_sample)

    d = sub.add_parser("density-map", help="render a 2-D density as a P5 graymap")
    d.add_argument("--checkpoint", help="trained toy model")
    d.add_argument("--which", choices=("base", "prior", "marginal", "standard-normal"), default="prior")
    d.add_argument("--box", type=lambda v: _floats(v, 4), default=[-4.0, 4.0, -4.0, 4.0],
                   help="x0,x1,y0,y1")
    d.add_argument("--resolution", type=int, default=256)
    d.add_argument("-o", "--output", required=True, help=".pgm output path")
    d.add_argument("--csv", help="also write the raw grid values here")
    d.set_defaults(func=cmd_density_map)

    n = sub.add_parser("nica-demo", help="conditional-CDF checks and IAF depth comparison")
    n.add_argument("--config", required=True)
    n.add_argument("--output", help="output directory")
    n.set_defaults(func=cmd_nica_demo)

    w = sub.add_parser("sweep", help="one training run per value of a config key")
    w.add_argument("--config", required=True)
    w.add_argument("--axis", required=True, help="key=v1,v2,... e.g. l_prior=0,4,8,12")
    w.add_argument("--full", action="store_true")
    w.add_argument("--seed", type=int)
    w.add_argument("--epochs", type=int)
    w.add_argument("--data-dir")
    w.add_argument("--output")
    w.set_defaults(func=cmd_sweep)

    m = sub.add_parser("prepare-mnist", help="binarise a small MNIST CSV into .amat files")
    m.add_argument("--source", required=True, help="gzipped CSV, 784 pixels then label per row")
    m.add_argument("-o", "--output", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_prepare_mnist)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NonFiniteLossError as exc:
        print(f"led: {exc} (optimizer step {exc.step}); last finite state saved", file=sys.stderr)
        return EXIT_NONFINITE
    except (OSError, CheckpointError, ParseError) as exc:
        print(f"led: {exc}", file=sys.stderr)
        return EXIT_IO
    except (LedError, ValueError) as exc:
        print(f"led: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
