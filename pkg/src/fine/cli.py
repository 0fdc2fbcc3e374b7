"""Command-line entry point: ``fine {condense,init,train,sample,bench,inspect}``.

Exit codes: 0 success, 2 usage/configuration error, 3 file/format or
compatibility error, 4 training divergence.
"""

import argparse
import json
import logging
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import bench as bm
from .condense import (
    CondenseConfig,
    FineInit,
    HeRandom,
    ShareInit,
    SigmaFitConfig,
    SvdTransfer,
    condense,
    he_random_init,
    instantiate,
    sigma_fit,
    train,
)
from .config import RunConfig, load_config
from .data import DATASETS, load_image_dir, make_dataset, write_imgr
from .diffusion import DiffusionSchedule, EmaModel, sample
from .dit import DiTConfig
from .errors import (
    ConfigurationError,
    ContractError,
    DivergenceError,
    FormatError,
    IncompatibilityError,
)
from .factorized import count_params
from .io import (
    CHECKPOINT_MAGIC,
    load_checkpoint,
    load_learngene,
    read_container,
    save_checkpoint,
    save_learngene,
)
from .rng import Rng

log = logging.getLogger("fine")

EXIT_OK, EXIT_USAGE, EXIT_FILE, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def write_run_meta(out, args, **extra):
    meta = {
        "command": args.command,
        "argv": [a for a in sys.argv[1:]] if args.argv is None else args.argv,
        "args": {k: v for k, v in vars(args).items() if k not in ("func", "argv")},
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    meta.update(extra)
    Path(str(out) + ".run.meta").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")


def _config(args):
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _dataset(args, image_size):
    if getattr(args, "data_dir", None):
        return load_image_dir(args.data_dir, seed=args.data_seed)
    return make_dataset(args.dataset, args.n_samples, image_size, seed=args.data_seed)


def write_loss_csv(path, losses, recipe, depth, seed):
    bm.write_curves_csv([bm.BenchResult(recipe, depth, seed, losses=list(losses))], path)


def cmd_condense(args):
    cfg = _config(args)
    cc = cfg.condense
    if args.steps is not None:
        cc.steps = args.steps
    if args.seed is not None:
        cc.seed = args.seed
    data = make_dataset(cc.dataset, cc.n_samples, cc.model.image_size, seed=cc.seed)
    lg, aux = condense(cc, data, cfg.diffusion)
    save_learngene(args.out, lg)
    if args.aux_out:
        save_checkpoint(args.aux_out, aux, step=cc.steps, seed=cc.seed,
                        extra={"dataset": cc.dataset, "n_samples": cc.n_samples, "recipe": "aux"})
    if args.log:
        write_loss_csv(args.log, aux.losses, "aux", cc.model.depth, cc.seed)
    write_run_meta(args.out, args, config=cfg.to_dict())
    print(f"learngene written to {args.out} ({lg.n_params} parameters)")


def cmd_init(args):
    cfg = _config(args)
    lg = load_learngene(args.learngene)
    model_cfg = cfg.model if args.config else DiTConfig(width=lg.width, hidden=lg.hidden)
    if args.width is not None:
        model_cfg = model_cfg.replace(width=args.width, hidden=0)
    fit = SigmaFitConfig(**{**asdict(cfg.sigma_fit), "seed": args.seed})
    if args.fit_steps is not None:
        fit.fit_steps = args.fit_steps
    if args.fit_lr is not None:
        fit.lr = args.fit_lr
    fit.freeze_learngene = args.freeze_learngene or fit.freeze_learngene
    sched = DiffusionSchedule(model_cfg.timesteps)
    model = instantiate(lg, args.depth, model_cfg, Rng(args.seed, ("init", "fine", str(args.depth))))
    data = _dataset(args, model.config.image_size)
    sigma_fit(model, fit, data, sched)
    counts = count_params(model)
    if not (args.keep_factorized or fit.freeze_learngene):
        model = model.to_plain()
    save_checkpoint(args.out, model, step=0, seed=args.seed, extra={
        "dataset": args.dataset, "n_samples": args.n_samples, "data_seed": args.data_seed,
        "recipe": "fine", "schedule": sched.to_dict(), "sigma_fit": asdict(fit),
    })
    write_run_meta(args.out, args, sigma_fit=asdict(fit))
    print(f"initialized depth-{args.depth} model -> {args.out} "
          f"(transferred {counts['transferred']}, fitted {counts['trainable_at_init']} sigma values)")


def cmd_train(args):
    ck = load_checkpoint(args.from_path)
    model, meta = ck.model, ck.meta
    dataset = args.dataset or meta.get("dataset", "shapes-A")
    args.dataset = dataset
    if args.n_samples is None:
        args.n_samples = int(meta.get("n_samples", 2048))
    if args.data_seed is None:
        args.data_seed = int(meta.get("data_seed", 0))
    data = _dataset(args, model.config.image_size)
    sched = DiffusionSchedule(model.config.timesteps)
    if args.freeze_learngene:
        for n, p in model.parameters().items():
            if n.endswith(".U") or n.endswith(".V"):
                p.requires_grad = False
    ema = EmaModel(model, decay=args.ema_decay)
    losses = train(model, data, args.steps, lr=args.lr, batch_size=args.batch_size,
                   seed=args.seed, sched=sched, ema=ema, weight_decay=args.weight_decay)
    step = int(meta.get("step", 0)) + args.steps
    extra = {k: meta[k] for k in ("dataset", "n_samples", "data_seed", "recipe") if k in meta}
    extra.update(dataset=dataset, n_samples=args.n_samples, data_seed=args.data_seed)
    save_checkpoint(args.out, model, step=step, seed=args.seed, ema=ema, extra=extra)
    recipe = meta.get("recipe", "model")
    if args.log:
        write_loss_csv(args.log, losses, recipe, model.config.depth, args.seed)
        if not args.no_figures:
            from .plotting import plot_loss_curves
            plot_loss_curves([bm.BenchResult(recipe, model.config.depth, args.seed, losses=losses)],
                             Path(args.log).with_suffix(".png"),
                             window=min(bm.MA_WINDOW, max(1, len(losses))))
    write_run_meta(args.out, args)
    print(f"trained {args.steps} steps, final loss {losses[-1]:.5f} -> {args.out}")


def cmd_sample(args):
    ck = load_checkpoint(args.from_path)
    model = ck.model
    if args.ema:
        if ck.ema is None:
            raise FormatError(f"{args.from_path}: checkpoint carries no EMA weights")
        ck.ema.copy_to(model)
    sched = DiffusionSchedule(model.config.timesteps)
    images = sample(model, sched, args.n, args.class_id, Rng(args.seed, ("sample",)))
    write_imgr(args.out, images)
    if not args.no_figures:
        from .plotting import plot_sample_grid
        plot_sample_grid(images, Path(args.out).with_suffix(".png"))
    write_run_meta(args.out, args)
    print(f"wrote {args.n} samples to {args.out}")


def _parse_list(text, cast=int):
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def cmd_bench(args):
    cfg = _config(args)
    recipes_wanted = _parse_list(args.recipes, str)
    unknown = set(recipes_wanted) - {"he", "share", "svd", "fine"}
    if unknown:
        raise UsageError(f"unknown recipe(s): {', '.join(sorted(unknown))}")
    depths = _parse_list(args.depths)
    seeds = _parse_list(args.seeds)
    if len(seeds) == 1:
        seeds = list(range(seeds[0]))
    dcfg = cfg.model.replace(backing="plain")
    sched = cfg.diffusion
    data = _dataset(args, dcfg.image_size)
    source_data = make_dataset(args.source_dataset or args.dataset, args.n_samples,
                               dcfg.image_size, seed=args.data_seed)
    condense_steps = args.condense_steps if args.condense_steps is not None else cfg.condense.steps

    lg = None
    if "fine" in recipes_wanted or ("svd" in recipes_wanted and args.svd_rank is None):
        if args.learngene:
            lg = load_learngene(args.learngene)
        else:
            cc = CondenseConfig(**{**cfg.condense.__dict__, "steps": condense_steps,
                                   "model": cfg.model.replace(backing="factorized",
                                                              depth=args.condense_depth)})
            log.info("condensing learngene (%d steps)", cc.steps)
            lg, _ = condense(cc, source_data, sched)
    source = None
    if {"share", "svd"} & set(recipes_wanted):
        if args.source:
            source = load_checkpoint(args.source).model
        else:
            src_depth = max(max(depths), args.condense_depth)
            source = he_random_init(dcfg.replace(depth=src_depth), Rng(args.data_seed, ("source",)))
            log.info("pretraining plain source model (%d steps)", condense_steps)
            train(source, source_data, condense_steps, lr=cfg.condense.lr,
                  batch_size=cfg.condense.batch_size, seed=cfg.condense.seed, sched=sched)
    recipes = []
    for rid in recipes_wanted:
        if rid == "he":
            recipes.append(HeRandom())
        elif rid == "share":
            recipes.append(ShareInit(source))
        elif rid == "svd":
            budget = lg.n_params if lg is not None else None
            recipes.append(SvdTransfer(source, args.svd_rank, budget=budget))
        elif rid == "fine":
            recipes.append(FineInit(lg, cfg.sigma_fit))
    if args.target_loss is None and "he" not in recipes_wanted:
        raise UsageError("without --target-loss the recipe list must include 'he'")
    results = bm.run_benchmark(
        recipes, depths, seeds, args.steps, args.target_loss, dcfg=dcfg, data=data,
        sched=sched, lr=args.lr, batch_size=args.batch_size, eval_samples=args.eval_samples,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stem = out.with_suffix("")
    bm.write_summary_csv(results, out)
    bm.write_curves_csv(results, f"{stem}.curves.csv")
    rows = bm.aggregate_report(results)
    bm.write_report_csv(rows, f"{stem}.report.csv")
    md = bm.report_markdown(rows)
    sp = bm.speedups(results)
    if sp:
        md += "\n| depth | seed | speedup (he / fine) |\n|---:|---:|---:|\n"
        for (depth, seed), v in sorted(sp.items()):
            md += f"| {depth} | {seed} | {'n/a' if v is None else f'{v:.2f}'} |\n"
    Path(f"{stem}.report.md").write_text(md, encoding="utf-8")
    if not args.no_figures:
        from .plotting import plot_loss_curves, plot_steps_to_target
        plot_loss_curves(results, f"{stem}.curves.png")
        plot_steps_to_target(rows, f"{stem}.steps.png")
    write_run_meta(out, args, config=cfg.to_dict(), seeds=seeds)
    print(md, end="")


def cmd_inspect(args):
    c = read_container(args.path)
    kind = "checkpoint" if c.magic == CHECKPOINT_MAGIC else "learngene"
    print(f"file: {args.path}")
    print(f"kind: {kind} (magic {c.magic.decode()}, format version {c.version})")
    print("header:")
    for key, val in sorted(c.meta.items()):
        print(f"  {key}: {json.dumps(val, sort_keys=True)}")
    print(f"tensors: {len(c.index)}")
    for e in c.index:
        shape = "x".join(str(s) for s in e["shape"]) or "scalar"
        print(f"  {e['name']:<28} {e['dtype']} {shape:<10} offset={e['offset']} bytes={e['length']}")
    if kind == "learngene":
        counts = count_params(load_learngene(args.path))
    else:
        counts = count_params(load_checkpoint(args.path).model)
    print("params: " + " ".join(f"{k}={v}" for k, v in counts.items()))


def _add_data_args(p, default_dataset="shapes-A", required=False):
    p.add_argument("--dataset", default=None if required is None else default_dataset,
                   choices=DATASETS)
    p.add_argument("--data-dir", help="directory of .imgr files to use instead of a desk dataset")
    p.add_argument("--n-samples", type=int, default=None if required is None else 2048)
    p.add_argument("--data-seed", type=int, default=None if required is None else 0)


def build_parser():
    parser = argparse.ArgumentParser(prog="fine", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("condense", help="train the auxiliary model and write a learngene")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--out", required=True, help="learngene output (.lgne)")
    p.add_argument("--aux-out", help="also save the auxiliary model checkpoint")
    p.add_argument("--log", help="step-loss CSV")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_condense)

    p = sub.add_parser("init", help="instantiate a model from a learngene and fit sigma")
    p.add_argument("--learngene", required=True)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--config", help="TOML run configuration ([model] and [sigma_fit] are used)")
    p.add_argument("--width", type=int, help="target model width (defaults to the learngene's)")
    p.add_argument("--fit-steps", type=int)
    p.add_argument("--fit-lr", type=float)
    p.add_argument("--freeze-learngene", action="store_true",
                   help="keep U, V frozen after the sigma fit (implies --keep-factorized)")
    p.add_argument("--keep-factorized", action="store_true",
                   help="keep the shared factors as parameters instead of materializing plain weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_data_args(p, "shapes-B")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="standard training with EMA")
    p.add_argument("--from", dest="from_path", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="step-loss CSV (a .png curve is written next to it)")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ema-decay", type=float, default=0.9999)
    p.add_argument("--freeze-learngene", action="store_true", help="factorized checkpoints only")
    p.add_argument("--no-figures", action="store_true")
    _add_data_args(p, required=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="ancestral sampling to an IMGR grid")
    p.add_argument("--from", dest="from_path", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--ema", action="store_true", help="sample from the EMA weights")
    p.add_argument("--class-id", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bench", help="convergence benchmark across init recipes")
    p.add_argument("--recipes", default="he,share,svd,fine")
    p.add_argument("--depths", default="4,6,8")
    p.add_argument("--seeds", default="3", help="a count, or a comma-separated list of seeds")
    p.add_argument("--out", required=True, help="per-run summary CSV")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--steps", type=int, default=6000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--target-loss", type=float)
    p.add_argument("--eval-samples", type=int, default=1024)
    p.add_argument("--source-dataset", choices=DATASETS,
                   help="dataset for condensation / source pretraining (defaults to --dataset)")
    p.add_argument("--condense-steps", type=int)
    p.add_argument("--condense-depth", type=int, default=8)
    p.add_argument("--learngene", help="use this learngene instead of condensing one")
    p.add_argument("--source", help="pretrained checkpoint for share/svd instead of training one")
    p.add_argument("--svd-rank", type=int, help="default: match the learngene's parameter budget")
    p.add_argument("--no-figures", action="store_true")
    _add_data_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print a container's header, tensors and parameter counts")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = None if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigurationError, ContractError) as e:
        print(f"fine {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, IncompatibilityError, OSError) as e:
        print(f"fine {args.command}: error: {e}", file=sys.stderr)
        return EXIT_FILE
    except DivergenceError as e:
        print(f"fine {args.command}: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
