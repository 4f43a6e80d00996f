"""Command-line harness: gen, train, query, eval, theory, defaults."""
from __future__ import annotations

import argparse
import contextlib
import csv
import fcntl
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import mioracle
from .expr import ExprError, generate_family, parse, read_family, write_family
from .querynet import (QueryConfig, QueryFailure, QueryNet, ExprSystem, read_datasets,
                       run_query_loop, sample_baseline, write_datasets)

log = logging.getLogger("quosr")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
BUNDLED = Path(__file__).parent / "data"


class CliError(Exception):
    pass


@contextlib.contextmanager
def output_lock(path):
    """Exclusive advisory lock on ``path`` for the duration of a command."""
    lock_path = Path(str(path) + ".lock")
    lock_path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(lock_path, "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise CliError(f"{path} is locked by another quosr process") from None
        yield
    finally:
        fh.close()
        with contextlib.suppress(FileNotFoundError):
            lock_path.unlink()


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _load_config(args) -> cfgmod.ExperimentConfig:
    return cfgmod.load(getattr(args, "config", None), getattr(args, "set", None) or ())


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    seed = cfgmod.resolve_seed(args.seed)
    from .expr import GeneratorConfig

    gcfg = GeneratorConfig(max_depth=args.max_depth, arity=args.arity)
    fam = generate_family(seed, args.count, args.arity, gcfg)
    try:
        with output_lock(args.out):
            write_family(args.out, fam)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}") from None
    log.info("wrote %d expressions to %s", len(fam), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _family_for(cfg, path, arity, offset=0, count=None):
    if path:
        return read_family(path, arity)
    g = cfg.gen
    return generate_family(g.seed + offset, g.count if count is None else count, arity,
                           g.generator())


def _trace_rows(trace, K):
    from .training import trace_to_rows

    return trace_to_rows(trace, K)


def cmd_train(args) -> int:
    from . import plots
    from .training import (TrainingDiverged, load_checkpoint, save_checkpoint, train)

    cfg = _load_config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    family = _family_for(cfg, args.family or cfg.paths.family, cfg.model.arity)
    if not family:
        raise CliError("training family is empty")
    if args.ablation:
        return _run_ablation(cfg, family, args, out)
    ckpt = out / "checkpoint.ckpt"
    with output_lock(out / "train"):
        state = None
        tcfg = cfg.train
        if args.resume:
            state, saved = load_checkpoint(args.resume)
            tcfg = replace(saved, iterations=cfg.train.iterations)
            log.info("resuming from iteration %d", state.iteration)
        stop = args.stop_after if args.stop_after is not None else tcfg.iterations
        run_cfg = replace(tcfg, iterations=min(stop, tcfg.iterations))
        every = tcfg.checkpoint_every

        def on_iteration(st):
            if every and st.iteration % every == 0:
                save_checkpoint(ckpt, st, tcfg)

        model_cfg = state.net.cfg if state is not None else cfg.model
        try:
            state = train(family, model_cfg, run_cfg, state, on_iteration)
        except TrainingDiverged as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_FAIL
        save_checkpoint(ckpt, state, tcfg)
        header, rows = _trace_rows(state.trace, tcfg.K)
        _write_csv(out / "trace.csv", header, [[r[0], *(f"{v:.10g}" for v in r[1:])] for r in rows])
        (out / "config.json").write_text(cfg.dumps())
        if state.trace:
            plots.loss_curve([t["iteration"] for t in state.trace],
                             [t["loss"] for t in state.trace], out / "loss.svg")
    done = state.iteration >= tcfg.iterations
    print(f"{'finished' if done else 'stopped'} at iteration {state.iteration}; checkpoint {ckpt}")
    return EXIT_OK


def _run_ablation(cfg, family, args, out) -> int:
    from . import ablation
    from .regressor import CandidateBank

    held = _family_for(cfg, args.held_out, cfg.model.arity, offset=1_000_003,
                       count=args.held_out_count)
    bank = CandidateBank(list(family) + list(held), cfg.model.arity, cfg.query.box)
    with output_lock(out / "ablation"):
        rows = ablation.run_ablation(family, held, cfg.model, cfg.train, cfg.query, bank,
                                     eval_seed=cfg.eval.eval_seed or 0)
        (out / "ablation.csv").write_text(ablation.to_csv(rows))
    print(ablation.to_csv(rows), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# query


def cmd_query(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.eval.query_seed
    K = args.K if args.K is not None else cfg.query.K
    m = args.m if args.m is not None else cfg.query.m
    net = None
    arity = args.arity
    if args.method == "quosr":
        if not args.checkpoint:
            raise CliError("--checkpoint is required for --method quosr")
        net, _ = QueryNet.load(args.checkpoint)
        arity = net.cfg.arity
        box = tuple(net.cfg.box)
    else:
        box = tuple(cfg.query.box)
    arity = arity or 1
    qcfg = QueryConfig(K=K, m=m, box=box, retries=cfg.query.retries)
    errs = qcfg.validate()
    if errs:
        raise CliError("; ".join(errs))
    if args.expr:
        exprs = []
        for i, text in enumerate(args.expr):
            try:
                exprs.append(parse(text, arity))
            except ExprError as exc:
                print(f"expr {i}: cannot parse {text!r}: {exc}", file=sys.stderr)
                exprs.append(None)
    else:
        exprs = read_family(args.family, arity)
    items, failed = [], []
    for eid, e in enumerate(exprs):
        if e is None:
            failed.append(eid)
            continue
        system = ExprSystem(e, arity)
        try:
            if net is not None:
                ds = run_query_loop(net, system, qcfg, seed=seed + eid)
            else:
                ds = sample_baseline(system, args.method, m * (K + 1), box, arity, seed + eid, m)
        except QueryFailure as exc:
            print(f"expr {eid}: {exc}", file=sys.stderr)
            failed.append(eid)
            continue
        items.append((eid, ds))
    meta = {"method": args.method, "K": K, "m": m, "seed": seed, "arity": arity,
            "box": list(box), "failed": failed}
    with output_lock(args.out):
        write_datasets(args.out, items, meta)
    log.info("wrote %d datasets to %s (%d failed)", len(items), args.out, len(failed))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    from . import plots
    from .regressor import CandidateBank, evaluate_datasets

    cfg = _load_config(args)
    eval_seed = args.eval_seed
    if eval_seed is None:
        eval_seed = cfg.eval.eval_seed
    if eval_seed is None:
        raise CliError("no held-out seed: pass --eval-seed, set eval.eval_seed or QUOSR_SEED")
    datasets, arity = {}, None
    for path in args.datasets:
        ds, meta = read_datasets(path)
        method = meta.get("method", Path(path).stem)
        if method in datasets:
            method = f"{method}:{Path(path).stem}"
        datasets[method] = ds
        arity = arity or meta.get("arity", 1)
    arity = arity or 1
    family = read_family(args.family, arity)
    for method, per in datasets.items():
        bad = [eid for eid in per if eid >= len(family)]
        if bad:
            raise CliError(f"{method}: expression ids {bad[:5]} are not in {args.family}")
    bank_exprs = []
    for path in args.bank or [args.family]:
        bank_exprs += read_family(path, arity)
    bank = CandidateBank(bank_exprs, arity, tuple(cfg.query.box))
    budget = args.budget if args.budget is not None else cfg.eval.budget
    report = evaluate_datasets(family, datasets, bank, eval_seed, budget,
                               curve=not args.no_curve, n_starts=cfg.eval.n_starts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with output_lock(out / "eval"):
        (out / "report.csv").write_text(report.to_csv())
        (out / "summary.txt").write_text(report.summary() + "\n")
        plots.metric_bars(report, out / "metrics.svg")
        if report.curves:
            (out / "curves.csv").write_text(report.curves_csv())
            plots.step_curves(report.curves, out / "curves.svg")
    print(report.summary())
    return EXIT_OK


# ---------------------------------------------------------------------------
# theory


def cmd_theory(args) -> int:
    families = []
    for path in args.family or []:
        fam = mioracle.read_family(path)
        if fam.n > mioracle.MAX_OPTIMAL_N or fam.g > mioracle.MAX_OPTIMAL_G:
            raise CliError(f"{path}: family has n={fam.n}, g={fam.g}; exhaustive search is limited "
                           f"to n <= {mioracle.MAX_OPTIMAL_N} functions and g <= "
                           f"{mioracle.MAX_OPTIMAL_G} grid points")
        families.append((Path(path).stem, fam))
    seed = cfgmod.resolve_seed(args.seed)
    n_random = args.random
    if n_random is None:
        n_random = 0 if families else 100
    if not families and not n_random:
        families.append(("bijection", mioracle.read_family(BUNDLED / "bijection.family")))
    rng = np.random.default_rng([seed, 0x7E0])
    for i in range(n_random):
        families.append((f"random{i}", mioracle.random_family(rng)))
    report = mioracle.run_theory(families, chain_instances=args.chain, seed=seed,
                                 chain_samples=args.samples)
    text = report.summary()
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with output_lock(out / "theory"):
            (out / "theory.csv").write_text(report.to_csv())
            (out / "theory.txt").write_text(text + "\n")
    for r in report.failures:
        print(f"FAILED {r['check']} {r['instance']}: lhs={r['lhs']:.6g} rhs={r['rhs']:.6g}",
              file=sys.stderr)
    return EXIT_FAIL if report.failures else EXIT_OK


def cmd_defaults(args) -> int:
    sys.stdout.write(cfgmod.ExperimentConfig().dumps())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quosr", description="Query-based online symbolic regression.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable; wins over the file)")

    g = sub.add_parser("gen", help="generate an expression family")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--arity", type=int, default=1)
    g.add_argument("--max-depth", type=int, default=4)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a query network")
    with_config(t)
    t.add_argument("--family", help="expression family file (default: generated from gen.*)")
    t.add_argument("--out", help="output directory (default: paths.out_dir)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, default=None,
                   help="stop once this many iterations are done (resume later)")
    t.add_argument("--ablation", action="store_true", help="run the eight-way ablation grid")
    t.add_argument("--held-out", help="held-out family for --ablation")
    t.add_argument("--held-out-count", type=int, default=50)
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("query", help="collect fit points for expressions")
    with_config(q)
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--family")
    src.add_argument("--expr", action="append")
    q.add_argument("--checkpoint")
    q.add_argument("--method", choices=("quosr", "uniform", "normal"), default="quosr")
    q.add_argument("--K", type=int, default=None)
    q.add_argument("--m", type=int, default=None)
    q.add_argument("--arity", type=int, default=None)
    q.add_argument("--seed", type=int, default=None)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_query)

    e = sub.add_parser("eval", help="regress and score queried datasets")
    with_config(e)
    e.add_argument("--family", required=True, help="ground-truth expressions")
    e.add_argument("--datasets", nargs="+", required=True)
    e.add_argument("--bank", action="append", help="candidate family file(s); default: --family")
    e.add_argument("--eval-seed", type=int, default=None)
    e.add_argument("--budget", type=int, default=None, help="refinement mutations per fit")
    e.add_argument("--no-curve", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    th = sub.add_parser("theory", help="information-theoretic checks")
    th.add_argument("--family", action="append", help="discrete family file (repeatable)")
    th.add_argument("--random", type=int, default=None, help="number of random families")
    th.add_argument("--chain", type=int, default=20, help="contrastive chain instances")
    th.add_argument("--samples", type=int, default=4000, help="Monte Carlo batches per chain")
    th.add_argument("--seed", type=int, default=None)
    th.add_argument("--out")
    th.set_defaults(func=cmd_theory)

    d = sub.add_parser("defaults", help="print the default configuration")
    d.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (CliError, mioracle.FamilyError, mioracle.TooLarge, ExprError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
