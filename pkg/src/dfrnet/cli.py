"""``dfrnet`` command line: synth, pretrain-pig, train, eval, dehaze, inspect,
ablate, params.

Exit codes: 0 ok, 1 usage error, 2 data/IO error, 3 numeric failure.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("dfrnet")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(args):
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("DFRNET_SEED", 0))


def _beta_range(text):
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}")
    if lo < 0 or hi < lo:
        raise argparse.ArgumentTypeError(f"need 0 <= LO <= HI, got {text!r}")
    return lo, hi


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _train_cfg(args):
    from .trainer import parse_config_file, train_config_from

    overrides = parse_config_file(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "iters", None) is not None:
        overrides["total_iters"] = args.iters
    cfg = train_config_from(args.profile, overrides)
    cfg.seed = _seed(args)
    return cfg


def cmd_synth(args):
    from .haze import generate_dataset

    m = generate_dataset(args.n, args.size, args.size, args.beta_range, _seed(args), args.out, args.val_fraction)
    print(f"wrote {len(m)} pairs ({args.size}x{args.size}, beta {args.beta_range[0]}:{args.beta_range[1]}) to {args.out}")
    return EXIT_OK


def _pairs(data, split=None):
    from .haze import load_pairs, read_manifest

    manifest = read_manifest(data)
    if split:
        manifest = manifest.split(split)
    return manifest, load_pairs(manifest)


def cmd_pretrain_pig(args):
    from . import checkpoint as ckpt
    from .trainer import pretrain_pig

    tcfg = _train_cfg(args)
    _, pairs = _pairs(args.data, "train")
    steps = args.steps if args.steps is not None else tcfg.pig_steps
    pig, losses = pretrain_pig(pairs, steps, tcfg.seed, tcfg.model_config(), lr=tcfg.pig_lr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "pig.zip", ckpt.model_tensors(pig, "model/pig."), {"steps": steps, "seed": tcfg.seed})
    (out / "pig_loss.csv").write_text("step,l1\n" + "".join(f"{i + 1},{v:.8f}\n" for i, v in enumerate(losses)))
    if losses:
        print(f"PIG pretrained {steps} steps: L1 {losses[0]:.4f} -> {losses[-1]:.4f}")
    return EXIT_OK


def cmd_train(args):
    from . import checkpoint as ckpt
    from .trainer import pretrain_pig, train

    tcfg = _train_cfg(args)
    mcfg = tcfg.model_config()
    _, pairs = _pairs(args.data, "train")
    pig_state = None
    if args.resume is None:
        if args.pig:
            tensors, _ = ckpt.load(args.pig)
            pig_state = {k[len("model/pig."):]: v for k, v in tensors.items() if k.startswith("model/pig.")}
        elif not args.no_pretrain:
            pig, _ = pretrain_pig(pairs, tcfg.pig_steps, tcfg.seed, mcfg, lr=tcfg.pig_lr)
            pig_state = pig.state_dict()

    def progress(row):
        if row["iter"] % args.log_every == 0:
            print(f"iter {row['iter']}: loss {row['total']:.5f} rec {row['rec']:.5f} lr {row['lr']:.3g} alpha {row['alpha']:.4f}", flush=True)

    state = train(mcfg, tcfg, pairs, out=args.out, pig_state=pig_state, resume=args.resume, progress=progress)
    print(f"finished at iteration {state.iteration}; checkpoint {Path(args.out) / 'last.zip'}")
    return EXIT_OK


def cmd_eval(args):
    from .trainer import evaluate, load_model

    model, _ = load_model(args.checkpoint)
    manifest, pairs = _pairs(args.data, args.split)
    res = evaluate(model, pairs, manifest.ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(res.to_csv())
    summary = f"pairs: {len(res.ids)}\nPSNR: {res.psnr_db:.4f} dB\nSSIM: {res.ssim:.6f}\n"
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def _load_input(path):
    from .haze import load_png
    from .trainer import center_crop8

    img = load_png(path)
    cropped = center_crop8(img)
    if cropped.shape != img.shape:
        print(
            f"warning: {path}: {img.shape[1]}x{img.shape[2]} center-cropped to {cropped.shape[1]}x{cropped.shape[2]}",
            file=sys.stderr,
        )
    return cropped


def cmd_dehaze(args):
    from .haze import save_png
    from .trainer import NumericError, dehaze, load_model

    model, _ = load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.inputs:
        res = dehaze(model, _load_input(path))
        outputs = {"": res.J}
        if args.emit_branches:
            outputs.update({"_gb": res.J_gb, "_lb": res.J_lb, "_proposal": res.P})
        for suffix, t in outputs.items():
            arr = t[0].double().numpy()
            if not np.isfinite(arr).all():
                raise NumericError(f"non-finite output for {path}")
            save_png(arr, out / f"{Path(path).stem}{suffix}.png")
    print(f"dehazed {len(args.inputs)} image(s) into {out}")
    return EXIT_OK


def normalize_heatmap(arr):
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo
    return ((arr - lo) / span if span > 0 else np.zeros_like(arr)), lo, hi


def cmd_inspect(args):
    from .haze import save_png
    from .trainer import dehaze, load_model

    model, _ = load_model(args.checkpoint)
    if not model.cfg.dr:
        print("warning: checkpoint has DR disabled; local features come from a zero residual", file=sys.stderr)
    res = dehaze(model, _load_input(args.image))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cl = model.cfg.lb.local_channels
    maps = [(f"ws_stage{i + 1}", s.W_s[0, 0]) for i, s in enumerate(res.gb.states)]
    maps += [(f"local_stage{i + 1}", f[0, -cl:].mean(0)) for i, f in enumerate(res.lb.stage_outputs)]
    for name, t in maps:
        norm, lo, hi = normalize_heatmap(t.double().numpy())
        save_png(norm[None], out / f"{name}.png")
        print(f"{name}: min {lo:.6g} max {hi:.6g}")
    return EXIT_OK


def cmd_ablate(args):
    from .trainer import ablation_table, run_ablation_grid

    tcfg = _train_cfg(args)
    _, pairs = _pairs(args.data, "train")
    labels = args.variants.split(",") if args.variants else None
    rows = run_ablation_grid(tcfg.model_config(), tcfg, pairs, labels=labels, out=args.out)
    table = ablation_table(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_params(args):
    from .model import VARIANTS, ModelConfig, count_parameters

    base = ModelConfig.toy() if args.toy else ModelConfig()
    for label, name, _ in VARIANTS:
        n = count_parameters(base.variant(label))
        print(f"{label}\t{name}\t{n}\t{n / 1e6:.2f}M")
    return EXIT_OK


def build_parser():
    p = Parser(prog="dfrnet", description="Density-aware dehazing network toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=Parser, required=True)

    def common(sp, train_opts=False):
        sp.add_argument("--seed", type=int, default=None, help="defaults to $DFRNET_SEED or 0")
        if train_opts:
            sp.add_argument("--config", help="flat key = value file overriding the profile")
            sp.add_argument("--profile", choices=("desk", "paper"), default="desk")
            sp.add_argument("--iters", type=int, default=None, help="override total_iters")

    sp = sub.add_parser("synth", help="generate a synthetic paired haze dataset")
    sp.add_argument("--n", type=_positive, required=True)
    sp.add_argument("--size", type=_positive, default=64)
    sp.add_argument("--beta-range", type=_beta_range, default=(0.05, 0.2))
    sp.add_argument("--val-fraction", type=float, default=0.0)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pretrain-pig", help="pretrain the proposal image generator")
    sp.add_argument("--data", required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--out", required=True)
    common(sp, train_opts=True)
    sp.set_defaults(func=cmd_pretrain_pig)

    sp = sub.add_parser("train", help="train end to end")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", default=None)
    sp.add_argument("--pig", default=None, help="pretrained PIG checkpoint")
    sp.add_argument("--no-pretrain", action="store_true")
    sp.add_argument("--log-every", type=_positive, default=100)
    common(sp, train_opts=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="PSNR/SSIM over a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("dehaze", help="dehaze image files")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--emit-branches", action="store_true")
    sp.add_argument("inputs", nargs="+")
    sp.set_defaults(func=cmd_dehaze)

    sp = sub.add_parser("inspect", help="dump W_s maps and local density heatmaps")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("image")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("ablate", help="train and evaluate the ablation variants")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variants", default=None, help="comma-separated labels, default all")
    common(sp, train_opts=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("params", help="parameter counts of the ablation variants")
    sp.add_argument("--toy", action="store_true")
    sp.set_defaults(func=cmd_params)
    return p


def main(argv=None):
    from .checkpoint import CheckpointError
    from .haze import DataError
    from .trainer import NumericError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (DataError, CheckpointError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e} {e.snapshot}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
