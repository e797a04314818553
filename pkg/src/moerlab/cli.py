"""``moerlab`` command line.

Exit codes: 0 success, 1 a verified property failed, 2 usage or config error,
3 runtime abort (for example a non-finite training loss).
"""
import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .numerics import ContractViolation, Rng
from .plotting import PlotError, plot_csvs
from .routers import monte_carlo_scale_init

EXIT_OK, EXIT_PROPERTY, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        vals = [int(p) for p in text.replace(" ", "").split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _load(path):
    """Config plus corpus text; a relative corpus path is resolved against the config's folder."""
    cfg = load_config(path)
    corpus_text = None
    if cfg.task == "char_lm":
        if not cfg.corpus:
            raise UsageError(f"{path}: char_lm task needs 'corpus' in [train]")
        corpus = Path(cfg.corpus)
        if not corpus.is_absolute():
            corpus = Path(path).parent / corpus
        try:
            corpus_text = corpus.read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"{path}: cannot read corpus {corpus}: {exc.strerror}") from None
        if not corpus_text:
            raise UsageError(f"{path}: corpus {corpus} is empty")
    return cfg, corpus_text


def _progress(label, seed):
    def report(step, loss):
        print(f"{label} seed {seed} step {step} eval_loss {loss:.6f}", flush=True)
    return report


def cmd_train(args):
    from .trainer import aggregate_csv_text, train
    cfg, corpus_text = _load(args.config)
    seeds = args.seed or list(cfg.seeds)
    out = Path(args.out)
    reports = []
    for seed in seeds:
        rep = train(cfg, seed, corpus_text=corpus_text, out_dir=out,
                    progress=None if args.quiet else _progress(cfg.label, seed))
        reports.append(rep)
        print(f"{cfg.label} seed {seed}: final eval loss {rep.final_eval_loss:.6f} "
              f"-> {out / f'{cfg.label}_seed{seed}.csv'}")
    if len(reports) > 1:
        path = out / "aggregate.csv"
        path.write_text(aggregate_csv_text([(cfg.label, reports)]), encoding="utf-8")
        print(f"aggregate -> {path}")
    return EXIT_OK


def cmd_sweep(args):
    from .trainer import granularity_sweep, sparsity_sweep, sweep
    loaded = [_load(p) for p in args.configs]
    corpora = {text for _, text in loaded}
    if len(corpora) != 1:
        raise UsageError("all configs in a sweep must use the same corpus")
    configs = [cfg for cfg, _ in loaded]
    if args.sparsity or args.granularity:
        if len(configs) != 1:
            raise UsageError("--sparsity/--granularity expand a single base config")
        base = configs[0]
        try:
            configs = sparsity_sweep(base, args.sparsity) if args.sparsity else \
                granularity_sweep(base, args.granularity)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if args.routers:
            configs = [c.replace(router=r, name="") for r in args.routers.split(",") for c in configs]
            configs = [c.replace(name=c.label) for c in configs]
    elif args.routers:
        raise UsageError("--routers only applies together with --sparsity or --granularity")
    try:
        report = sweep(configs, seeds=args.seed, corpus_text=corpora.pop(), out_dir=args.out,
                       threads=args.threads)
    except ValueError as exc:
        if isinstance(exc, ContractViolation):
            raise
        raise UsageError(str(exc)) from None
    print(report.table_csv_text(), end="")
    print(f"table -> {Path(args.out) / 'sweep_table.csv'}")
    return EXIT_OK


def cmd_verify(args):
    from .verify import run_suite
    results = run_suite(args.suite, seed=args.seed)
    failed = [r for r in results if not r.outcome.ok]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_PROPERTY if failed else EXIT_OK


def cmd_plot(args):
    try:
        plot_csvs(args.csvs, args.out, column=args.column)
    except OSError as exc:
        raise UsageError(f"{exc.filename}: {exc.strerror}") from None
    except PlotError as exc:
        raise UsageError(str(exc)) from None
    print(f"plot -> {args.out}")
    return EXIT_OK


def cmd_mc_init(args):
    if not 1 <= args.k <= args.d:
        raise UsageError(f"need 1 <= k <= d, got k={args.k}, d={args.d}")
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    value = monte_carlo_scale_init(args.d, args.k, args.samples, Rng(args.seed))
    print(f"{value:.12g}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="moerlab", description="MoE router experiments")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train one config for one or more seeds")
    t.add_argument("config")
    t.add_argument("--seed", type=_int_list, help="comma-separated seeds (default: config seeds)")
    t.add_argument("--out", default="runs")
    t.add_argument("--quiet", action="store_true", help="only print final results")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train several configs and tabulate them")
    s.add_argument("configs", nargs="+")
    s.add_argument("--seed", type=_int_list)
    s.add_argument("--out", default="sweep")
    s.add_argument("--threads", type=int, default=None, help="worker processes (default MOERLAB_THREADS or 1)")
    grp = s.add_mutually_exclusive_group()
    grp.add_argument("--sparsity", type=_int_list, metavar="M,M,...",
                     help="expand the base config over expert counts")
    grp.add_argument("--granularity", type=_int_list, metavar="K,K,...",
                     help="expand over top_k with top_k * expert_hidden held fixed")
    s.add_argument("--routers", help="comma-separated router kinds to cross with the expansion")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run property suites")
    v.add_argument("--suite", choices=("gradients", "invariants", "oracle", "all"), default="all")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    pl = sub.add_parser("plot", help="plot run CSVs into one SVG")
    pl.add_argument("csvs", nargs="+")
    pl.add_argument("--out", required=True)
    pl.add_argument("--column", default="eval_loss", choices=("eval_loss", "train_loss"))
    pl.set_defaults(func=cmd_plot)

    m = sub.add_parser("mc-init", help="Monte Carlo estimate of the Kern scale_initial")
    m.add_argument("--d", type=int, required=True, help="dimension (number of experts)")
    m.add_argument("--k", type=int, required=True)
    m.add_argument("--samples", type=int, default=100_000)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_mc_init)
    return p


def main(argv=None):
    from .trainer import TrainingDiverged
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"moerlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"moerlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"moerlab: aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ContractViolation as exc:
        print(f"moerlab: aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
