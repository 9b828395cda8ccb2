"""``hetcd`` command-line interface.

Heavy imports are deferred until after ``--threads`` has been applied, so the
BLAS thread count is set before numpy loads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", dest="overrides", action="append", type=_kv, default=[],
                       metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetcd", description="Unsupervised heterogeneous change detection.")
    ap.add_argument("--threads", type=int, default=0, help="BLAS threads (0 = library default)")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic image pair and its truth mask")
    p.add_argument("--preset", choices=("toy", "scene"), default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-x", required=True)
    p.add_argument("--out-y", required=True)
    p.add_argument("--out-truth", required=True)

    p = sub.add_parser("prior", help="affinity-based change prior")
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--multiscale", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--png")
    _common(p)

    p = sub.add_parser("train", help="train a translation network")
    p.add_argument("--arch", choices=("xnet", "acenet"))
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--alpha", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    _common(p)

    p = sub.add_parser("detect", help="difference image and change map from a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--out-d", required=True)
    p.add_argument("--out-map", required=True)
    p.add_argument("--no-filter", action="store_true")
    _common(p)

    p = sub.add_parser("evaluate", help="score a difference image and change map")
    p.add_argument("--d", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("theory-check", help="Monte Carlo check of the weighted-loss equivalence")
    p.add_argument("--p-h0", type=float, default=0.8)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="prior, training, detection and evaluation in one go")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--x")
    src.add_argument("--preset", choices=("toy", "scene"))
    p.add_argument("--y")
    p.add_argument("--truth")
    p.add_argument("--out-dir", required=True)
    _common(p)

    p = sub.add_parser("toy", help="8x8 toy walkthrough: thresholded prior vs truth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    return ap


def _config(args, base=None):
    from .pipeline import resolve_config

    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    for flag, key in (("k", "patch_size"), ("stride", "stride"), ("multiscale", "multiscale"),
                      ("arch", "arch")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = str(val)
    if getattr(args, "no_filter", False):
        overrides["filter"] = "false"
    return resolve_config(args.config, overrides, base)


def _plain_seed(args) -> int:
    """Seed for commands without a config; ``HETCD_SEED`` wins when set."""
    from .pipeline import SEED_ENV

    env = os.environ.get(SEED_ENV)
    return int(env) if env else args.seed


def _cmd_synth(args):
    import numpy as np
    from . import raster as R
    from .pipeline import Outputs, synthesize

    x, y, truth = synthesize(args.preset, _plain_seed(args))
    out = Outputs()
    R.save(R.Raster(x.astype(np.float32)), out.path(args.out_x))
    R.save(R.Raster(y.astype(np.float32)), out.path(args.out_y))
    R.save_png(truth, out.path(args.out_truth))
    out.commit()


def _cmd_prior(args):
    from . import raster as R
    from .affinity import prior
    from .pipeline import Outputs, prepare, write_config_snapshot

    cfg = _config(args)
    out = Outputs()
    write_config_snapshot(cfg, out, Path(args.out).parent)
    xn = prepare(R.load(args.x), cfg.x_transform)
    yn = prepare(R.load(args.y), cfg.y_transform)
    pm = prior(xn, yn, cfg.affinity())
    R.save(pm.as_raster(), out.path(args.out))
    if args.png:
        R.save_png(pm.alpha, out.path(args.png), value_range=(0.0, 1.0))
    out.commit()


def _cmd_train(args):
    from . import raster as R
    from .pipeline import Outputs, prepare, write_config_snapshot
    from .translators import train, write_history

    cfg = _config(args)
    out = Outputs()
    write_config_snapshot(cfg, out, Path(args.out).parent)
    xn = prepare(R.load(args.x), cfg.x_transform)
    yn = prepare(R.load(args.y), cfg.y_transform)
    alpha = R.load(args.alpha).data[:, :, 0]
    res = train(cfg.arch, xn, yn, alpha, cfg.train_config(), cfg.loss_weights(), variant=cfg.variant)
    res.model.save(out.path(args.out))
    if args.history:
        write_history(res.history, out.path(args.history))
    out.commit()


def _cmd_detect(args):
    import numpy as np
    from . import raster as R
    from .pipeline import Outputs, detect, prepare, write_config_snapshot
    from .translators import load_model

    cfg = _config(args)
    out = Outputs()
    write_config_snapshot(cfg, out, Path(args.out_d).parent)
    model = load_model(args.model)
    xn = prepare(R.load(args.x), cfg.x_transform)
    yn = prepare(R.load(args.y), cfg.y_transform)
    d, cmap = detect(model, xn, yn, cfg)
    R.save(R.Raster(d.astype(np.float32)), out.path(args.out_d))
    R.save_png(cmap.mask, out.path(args.out_map))
    out.commit()


def _cmd_evaluate(args):
    from . import raster as R
    from .metrics import binary_metrics, write_report
    from .pipeline import Outputs, load_truth

    d = R.load(args.d).data[:, :, 0]
    mask = load_truth(args.map)
    truth = load_truth(args.truth)
    out = Outputs()
    write_report(binary_metrics(mask, truth, d), out.path(args.out))
    out.commit()


def _cmd_theory(args):
    from .pipeline import Outputs
    from .theory import TwoHypothesisModel, run_seeds, write_reports

    reports = run_seeds(TwoHypothesisModel(p_h0=args.p_h0), args.n, args.seeds)
    out = Outputs()
    write_reports(reports, out.path(args.out))
    out.commit()
    mean = sum(r.rel_diff for r in reports) / len(reports)
    print(f"mean relative difference {mean:.4%}; psi within bounds: "
          f"{all(r.psi_in_bounds for r in reports)}")


def _cmd_run(args):
    from . import raster as R
    from .pipeline import PRESET_DEFAULTS, apply_overrides, PipelineConfig, load_truth, run_pipeline, synthesize

    if args.preset:
        base = apply_overrides(PipelineConfig(), PRESET_DEFAULTS[args.preset])
        cfg = _config(args, base)
        x, y, truth = synthesize(args.preset, cfg.seed)
        x, y = R.Raster(x), R.Raster(y)
    else:
        if not args.y:
            raise SystemExit("hetcd run: --y is required with --x")
        cfg = _config(args)
        x, y = R.load(args.x), R.load(args.y)
        truth = load_truth(args.truth) if args.truth else None
    art = run_pipeline(x, y, truth, cfg, args.out_dir)
    if art.metrics is not None:
        m = art.metrics
        print(f"AUC {m.auc:.4f}  OA {m.oa:.4f}  F1 {m.f1:.4f}  kappa {m.kappa:.4f}")


def _cmd_toy(args):
    from .pipeline import run_toy

    seed = _plain_seed(args)
    m = run_toy(seed, args.out_dir).metrics
    tp, tn, fp, fn = m.confusion
    print(f"toy seed {seed}: {tp + tn}/{tp + tn + fp + fn} pixels correct, AUC {m.auc:.4f}")


COMMANDS = {"synth": _cmd_synth, "prior": _cmd_prior, "train": _cmd_train, "detect": _cmd_detect,
            "evaluate": _cmd_evaluate, "theory-check": _cmd_theory, "run": _cmd_run, "toy": _cmd_toy}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads > 0:
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import ConfigError, StageError

    try:
        COMMANDS[args.command](args)
    except (ConfigError, StageError) as exc:
        print(f"hetcd {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"hetcd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
