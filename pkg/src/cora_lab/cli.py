"""Command-line entry point: ``cora-lab <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as config_io
from .adapter import trainable_parameter_count
from .checkpoint import (
    CheckpointError, basis_to_checkpoint, checkpoint_stacked, checkpoint_to_basis, checkpoint_to_model,
    export_csv, matrix_to_checkpoint, model_to_checkpoint, read_checkpoint, write_checkpoint,
)
from .extraction import (
    CURVE_HEADER, VARIANCE_HEADER, extract_common_basis_pca, extract_common_basis_svd, merge_ensemble,
    variance_curves, variance_report,
)
from .fixture import (
    build_ensemble_fixture, default_cache_dir, pretrained_base, read_ensemble_dir, write_ensemble_dir,
)
from .model import loss_and_accuracy
from .reporting import write_csv
from .tasks import TaskSpec, generate
from .train import (
    ABLATION_REGIMES, COMPARISON_REGIMES, DEFAULT_RANKS, METRICS_HEADER, REGIMES, SUMMARY_HEADER,
    SWEEP_HEADER, capacity_anomalies, rank_sweep, run_training, summarize,
)

log = logging.getLogger("cora_lab")


class CliError(Exception):
    pass


def parse_int_list(text: str) -> list[int]:
    """Parse "8,16,32", "1..5" or mixtures such as "1..3,7"."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise argparse.ArgumentTypeError(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return out


def parse_float_list(text: str) -> list[float]:
    vals = [float(x) for x in text.split(",") if x.strip()]
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one number")
    return vals


def parse_regimes(text: str) -> list[str]:
    vals = [x.strip() for x in text.split(",") if x.strip()]
    bad = [v for v in vals if v not in REGIMES]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"unknown regimes {bad}; choose from {', '.join(REGIMES)}")
    return vals


# shared resolution ------------------------------------------------------------

def _load_config(args) -> config_io.RunConfigFile:
    return config_io.load(args.config) if getattr(args, "config", None) else config_io.RunConfigFile()


def _cache(args):
    return Path(args.cache_dir) if args.cache_dir else default_cache_dir()


def _base_model(args, cfg):
    if getattr(args, "base", None):
        return checkpoint_to_model(read_checkpoint(args.base))
    if getattr(args, "ensemble", None):
        _, base = read_ensemble_dir(args.ensemble)
        if base is None:
            raise CliError(f"ensemble directory {args.ensemble} has no base.ck")
        return base
    return pretrained_base(cfg.extraction.base_seed, cfg.fixture, _cache(args))


def _w0(args, cfg):
    if getattr(args, "ensemble", None):
        ens, _ = read_ensemble_dir(args.ensemble)
    else:
        ens = build_ensemble_fixture(cfg.extraction.ensemble_size, cfg.extraction.base_seed,
                                     cfg.fixture, _cache(args))
    return merge_ensemble(ens)


def _task_for(cfg, base, kind=None) -> TaskSpec:
    spec = cfg.task_spec()
    if kind is not None and kind != spec.kind:
        spec = replace(spec, kind=kind)
    if spec.vocab_size != base.dims.vocab_size:
        spec = replace(spec, vocab_size=base.dims.vocab_size)
    return spec


def _print_params(adapter):
    pc = trainable_parameter_count(adapter)
    print(f"adapter parameters: A={pc.a_params} B={pc.b_params} total={pc.total} trainable={pc.trainable}")
    print(f"B share of adapter parameters: {pc.b_fraction:.4f} (freezing B saves exactly this fraction)")


# subcommands ------------------------------------------------------------------

def cmd_fixture(args):
    cfg = _load_config(args)
    n = args.n or cfg.extraction.ensemble_size
    out = write_ensemble_dir(args.out, n, cfg.extraction.base_seed, cfg.fixture, _cache(args))
    print(f"wrote base and {n} ensemble members to {out}")


def cmd_extract(args):
    cfg = _load_config(args)
    ens, _ = read_ensemble_dir(args.ensemble)
    w0 = merge_ensemble(ens)
    if args.method == "svd":
        basis = extract_common_basis_svd(w0, args.rank)
    else:
        basis = extract_common_basis_pca(w0, args.rank)
    ckpt = basis_to_checkpoint(basis, label=f"{args.method}-r{args.rank}",
                               meta={"members": sorted(ens.source_labels)})
    write_checkpoint(args.out, ckpt)
    print(f"{args.method} basis rank {basis.rank}: variance captured {basis.variance_captured:.6f} -> {args.out}")
    if args.w0_out:
        write_checkpoint(args.w0_out, matrix_to_checkpoint(w0, label="ensemble-mean",
                                                           meta={"members": sorted(ens.source_labels)}))
    thresholds = args.thresholds or list(cfg.extraction.thresholds)
    if args.variance_csv:
        write_csv(args.variance_csv, VARIANCE_HEADER, variance_report(w0, thresholds))
    if args.curves_csv or args.plot:
        curves = variance_curves(w0)
        if args.curves_csv:
            write_csv(args.curves_csv, CURVE_HEADER, curves)
        if args.plot:
            from .plotting import plot_variance_curves
            plot_variance_curves(curves, args.plot, thresholds=[max(thresholds)] if thresholds else (0.999,))
    if args.export_csv:
        export_csv(ckpt, args.export_csv)


def cmd_variance_report(args):
    path = Path(args.checkpoint)
    if path.is_dir():
        ens, _ = read_ensemble_dir(path)
        w0 = merge_ensemble(ens)
    else:
        w0 = checkpoint_stacked(read_checkpoint(path)).stacked
    thresholds = args.thresholds
    rows = variance_report(w0, thresholds)
    write_csv(args.out, VARIANCE_HEADER, rows)
    for row in rows:
        print(f"{row['method']:>3}  threshold {row['threshold']:<6g} count {row['count']}")
    if args.curves or args.plot:
        curves = variance_curves(w0)
        if args.curves:
            write_csv(args.curves, CURVE_HEADER, curves)
        if args.plot:
            from .plotting import plot_variance_curves
            plot_variance_curves(curves, args.plot, thresholds=[max(thresholds)])


def _train_config(args, cfg):
    train = cfg.train
    overrides = {k: getattr(args, k) for k in ("regime", "rank", "seed", "steps") if getattr(args, k, None) is not None}
    return replace(train, **overrides) if overrides else train


def cmd_train(args):
    cfg = _load_config(args)
    tcfg = _train_config(args, cfg)
    base = _base_model(args, cfg)
    basis = None
    if REGIMES[tcfg.regime][0] == "cora_common_basis":
        if args.basis:
            basis = checkpoint_to_basis(read_checkpoint(args.basis))
        else:
            basis = extract_common_basis_svd(_w0(args, cfg), tcfg.rank)
    result = run_training(tcfg, basis, base=base, task=_task_for(cfg, base))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", METRICS_HEADER, result.metrics.rows)
    ckpt = model_to_checkpoint(result.model, label=f"{tcfg.regime}-r{tcfg.rank}-s{tcfg.seed}", seed=tcfg.seed,
                               meta={"train": config_io.to_dict(replace(cfg, train=tcfg))["train"]})
    write_checkpoint(out / "final.ck", ckpt)
    if args.export_csv:
        export_csv(ckpt, args.export_csv)
    s = result.metrics.summary
    print(f"{tcfg.regime} r={tcfg.rank} seed={tcfg.seed}: final eval loss {s['final_eval_loss']:.6f}, "
          f"accuracy {s['final_eval_accuracy']:.4f}")
    _print_params(result.model.adapter)


def _bases_for(args, cfg, ranks, regimes):
    if not any(REGIMES[r][0] == "cora_common_basis" for r in regimes):
        return {}
    w0 = _w0(args, cfg)
    return {r: extract_common_basis_svd(w0, r) for r in ranks}


def _write_sweep(args, table, metrics):
    write_csv(args.out, SWEEP_HEADER, table)
    summary = summarize(table)
    if args.summary:
        write_csv(args.summary, SUMMARY_HEADER, summary)
    if args.metrics:
        write_csv(args.metrics, METRICS_HEADER, metrics)
    for row in summary:
        if row["rank"] == "all":
            print(f"{row['regime']:<22} mean final eval loss {row['mean_final_eval_loss']:.6f} "
                  f"(min {row['min_final_eval_loss']:.6f}, max {row['max_final_eval_loss']:.6f}, n={row['n']})")
    failed = [r for r in table if r.get("status") != "ok"]
    if failed:
        print(f"{len(failed)} of {len(table)} cells failed", file=sys.stderr)
    return summary


def cmd_sweep(args):
    cfg = _load_config(args)
    ranks = args.ranks or list(DEFAULT_RANKS)
    regimes = args.regimes or list(COMPARISON_REGIMES)
    base = _base_model(args, cfg)
    bases = _bases_for(args, cfg, ranks, regimes)
    table, metrics = rank_sweep(cfg.train, ranks, regimes, args.seeds, bases=bases, base=base,
                                task=_task_for(cfg, base), jobs=args.jobs)
    summary = _write_sweep(args, table, metrics)
    capacity_anomalies(table, low=min(ranks), high=max(ranks))
    if args.plot:
        from .plotting import plot_rank_sweep
        plot_rank_sweep(summary, args.plot)
    print(f"{len(table)} rows -> {args.out}")


def cmd_ablate(args):
    cfg = _load_config(args)
    base = _base_model(args, cfg)
    bases = _bases_for(args, cfg, [args.rank], ABLATION_REGIMES)
    template = replace(cfg.train, task=args.task)
    table, metrics = rank_sweep(template, [args.rank], list(ABLATION_REGIMES), args.seeds, bases=bases,
                                base=base, task=_task_for(cfg, base, args.task), jobs=args.jobs)
    _write_sweep(args, table, metrics)
    if args.plot:
        from .plotting import plot_ablation
        plot_ablation(table, args.plot)
    print(f"{len(table)} rows -> {args.out}")


def cmd_eval(args):
    cfg = _load_config(args)
    model = checkpoint_to_model(read_checkpoint(args.checkpoint))
    spec = _task_for(cfg, model, args.task)
    _, evalset = generate(spec)
    tok, lab = evalset.lm_batch()
    loss, acc = loss_and_accuracy(model, tok, lab)
    print(f"task={spec.kind} eval_loss={loss!r} eval_accuracy={acc!r}")
    if args.out:
        write_csv(args.out, ("task", "eval_loss", "eval_accuracy"),
                  [{"task": spec.kind, "eval_loss": loss, "eval_accuracy": acc}])


def cmd_params(args):
    a = 3 * args.d_model * args.rank
    b = args.rank * args.d_k
    print(f"A (3*d_model*r) = {a}; B (r*d_k) = {b}; total = {a + b}")
    print(f"trainable with frozen B (FB) = {a}; trainable with trainable B (TB/LoRA) = {a + b}")
    print(f"B share = {b / (a + b):.4f}; freezing B halves the adapter only when 3*d_model == d_k")


# parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cora-lab", description="Common-subspace low-rank adaptation lab")
    p.add_argument("--cache-dir", help="fixture cache directory (default: $CORA_LAB_CACHE or ~/.cache/cora_lab)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("fixture", help="train and write the ensemble fixture")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_fixture)

    s = sub.add_parser("extract", help="extract a common basis from an ensemble directory")
    s.add_argument("--ensemble", required=True)
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--method", choices=("svd", "pca"), default="svd")
    s.add_argument("--variance-csv")
    s.add_argument("--curves-csv")
    s.add_argument("--thresholds", type=parse_float_list)
    s.add_argument("--w0-out", help="also write the ensemble-mean stacked weights")
    s.add_argument("--plot", help="write the explained-variance figure")
    s.add_argument("--export-csv", metavar="DIR")
    s.add_argument("--config")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train one adapter run from a config file")
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--basis")
    s.add_argument("--base", help="base model checkpoint")
    s.add_argument("--ensemble", help="ensemble directory (base.ck and members)")
    s.add_argument("--regime", choices=tuple(REGIMES))
    s.add_argument("--rank", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--export-csv", metavar="DIR")
    s.set_defaults(func=cmd_train)

    for name, helptext, func in (("sweep", "rank x regime x seed grid", cmd_sweep),
                                 ("ablate", "B-matrix ablations against LoRA and CoRA", cmd_ablate)):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config")
        s.add_argument("--out", required=True)
        s.add_argument("--summary")
        s.add_argument("--metrics", help="per-step metrics CSV for every cell")
        s.add_argument("--seeds", type=parse_int_list, default=[1, 2, 3, 4, 5])
        s.add_argument("--base")
        s.add_argument("--ensemble")
        s.add_argument("--plot")
        s.add_argument("--jobs", type=int, default=1)
        if name == "sweep":
            s.add_argument("--ranks", type=parse_int_list)
            s.add_argument("--regimes", type=parse_regimes)
        else:
            s.add_argument("--task", default="copy")
            s.add_argument("--rank", type=int, default=8)
        s.set_defaults(func=func)

    s = sub.add_parser("variance-report", help="SVD vs PCA component counts for a W0 checkpoint")
    s.add_argument("--checkpoint", required=True, help="W0/model/stacked checkpoint or ensemble directory")
    s.add_argument("--thresholds", type=parse_float_list, default=[0.9, 0.95, 0.99, 0.999, 1.0])
    s.add_argument("--out", required=True)
    s.add_argument("--curves")
    s.add_argument("--plot")
    s.set_defaults(func=cmd_variance_report)

    s = sub.add_parser("eval", help="evaluate a model checkpoint on a task")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--task", default="copy")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("params", help="adapter parameter accounting")
    s.add_argument("--d-model", type=int, required=True)
    s.add_argument("--d-k", type=int, required=True)
    s.add_argument("--rank", type=int, required=True)
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        print("cora-lab: error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, CheckpointError, config_io.ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(f"cora-lab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
