"""Candidate-bank symbolic regression and the evaluation metrics.

The regressor picks, among a bank of skeletons, the one whose fitted
constants give the lowest normalized error on the queried data. An optional
genetic refinement mutates the winner and keeps strict improvements.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .expr import (Expr, Var, Unary, Binary, UNARY_OPS, BINARY_OPS, GeneratorConfig,
                   compile_expr, exponent_slots, random_expr,
                   skeletonize, to_text, walk)
from .querynet import Dataset, ExprSystem

EPS = 1e-5
RTOL = 1e-5
ATOL = 1e-8
N_STARTS = 8
HELD_OUT = 30
HELD_OUT_RANGE = (3.0, 5.0)


class FitFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics


def mse_n(y, y_hat) -> float:
    """``sum((y - y_hat)^2) / ||y + eps||_2`` with ``eps`` added elementwise."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        num = float(np.sum((y - y_hat) ** 2))
    den = float(np.linalg.norm(y + EPS))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def r_squared(y, y_hat) -> float:
    """Coefficient of determination clipped below at 0.

    A constant target has no variance; it scores 1 when matched exactly and 0
    otherwise.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        ss_res = float(np.sum((y - y_hat) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if np.array_equal(y, y_hat) else 0.0
    return max(0.0, 1.0 - ss_res / ss_tot)


def isclose_proportion(y, y_hat, rtol: float = RTOL, atol: float = ATOL) -> float:
    """Fraction of points with ``|y - y_hat| <= atol + rtol * |y|``."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.size == 0:
        return 0.0
    return float(np.mean(np.abs(y - y_hat) <= atol + rtol * np.abs(y)))


def skeleton_text(e: Expr) -> str:
    return to_text(skeletonize(e))


# ---------------------------------------------------------------------------
# constant fitting


@dataclass
class Candidate:
    expr: Expr
    skeleton: str
    program: object = field(repr=False, default=None)


def _starts(init, slots, n_starts, rng):
    p = len(slots)
    out = np.empty((n_starts, p))
    out[0] = init
    for s in range(1, n_starts):
        for j, is_exp in enumerate(slots):
            out[s, j] = rng.integers(1, 5) if is_exp else rng.uniform(-3.0, 3.0)
    return out


def fit_constants(template: Expr, X, y, n_starts: int = N_STARTS, seed: int = 0,
                  max_iter: int = 50, init=None, arity: int | None = None) -> tuple[Expr, float]:
    """Least-squares constants by multi-start Levenberg-Marquardt.

    Start 0 uses ``init`` (the template's own constants by default), the
    others are random. Constants sitting directly in an exponent stay at their
    starting integer value, so each start probes one exponent choice.
    Returns ``(expr, sse)``; raises :class:`FitFailure` when no start is
    defined on all points.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    prog = compile_expr(template, arity or X.shape[1])
    p = len(prog.consts)
    if p == 0:
        yh, ok = kernels.eval_program(prog, X)
        if not ok.all():
            raise FitFailure("expression undefined on the data")
        with np.errstate(over="ignore"):
            return template, float(np.sum((y - yh) ** 2))
    slots = exponent_slots(template)
    if init is None:
        init = prog.consts.copy()
        for j, is_exp in enumerate(slots):
            if is_exp and init[j] != round(init[j]):
                init[j] = 2.0
    rng = np.random.default_rng([seed, p, 0xF17])
    starts = _starts(np.asarray(init, dtype=np.float64), slots, n_starts, rng)
    free = np.array([0.0 if s else 1.0 for s in slots])
    best, sse, _ = kernels.fit_lm(prog, starts, X, y, max_iter=max_iter, free=free)
    if not np.isfinite(sse):
        raise FitFailure(f"all {n_starts} starts failed for {to_text(template)}")
    return prog.with_consts(best).to_expr(), float(sse)


# ---------------------------------------------------------------------------
# candidate bank


class CandidateBank:
    """Skeleton hypotheses, deduplicated by canonical skeleton text."""

    def __init__(self, exprs: Sequence[Expr] = (), arity: int = 1, box=(-3.0, 3.0)):
        self.arity = arity
        self.box = box
        self.candidates: list[Candidate] = []
        self._seen: set = set()
        self.rejected = 0
        for e in exprs:
            self.add(e)

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def add(self, e: Expr) -> bool:
        sk = skeleton_text(e)
        if sk in self._seen:
            return False
        probe = np.linspace(*self.box, 41)[:, None] * np.ones((1, self.arity))
        prog = compile_expr(e, self.arity)
        _, ok = kernels.eval_program(prog, probe)
        if not ok.any():
            self.rejected += 1
            return False
        self._seen.add(sk)
        self.candidates.append(Candidate(e, sk, prog))
        return True

    def skeletons(self) -> list[str]:
        return [c.skeleton for c in self.candidates]


@dataclass
class FitResult:
    expr: Expr
    mse_n: float
    index: int
    refined: bool = False


def _score(e: Expr, X, y, arity) -> float:
    yh, ok = kernels.eval_program(compile_expr(e, arity), X)
    if not ok.all():
        return math.inf
    return mse_n(y, yh)


def fit(ds: Dataset, bank: CandidateBank, budget: int = 0, seed: int = 0,
        n_starts: int = N_STARTS) -> FitResult:
    """Best bank candidate by MSE_N after constant fitting (lowest index on ties)."""
    if len(bank) == 0:
        raise ValueError("empty candidate bank")
    if len(ds) < 2:
        raise ValueError("need at least two data points")
    X, y = ds.x, ds.y
    best: FitResult | None = None
    second: Expr | None = None
    for i, cand in enumerate(bank):
        try:
            e, _ = fit_constants(cand.expr, X, y, n_starts, seed, arity=bank.arity)
        except FitFailure:
            continue
        score = _score(e, X, y, bank.arity)
        if best is None or score < best.mse_n:
            if best is not None:
                second = best.expr
            best = FitResult(e, score, i)
    if best is None:
        raise FitFailure("no bank candidate could be fitted")
    if budget > 0 and best.mse_n > 0:
        best = refine(best, second, X, y, bank.arity, budget, seed, n_starts)
    return best


# ---------------------------------------------------------------------------
# genetic refinement


def _subtrees(e: Expr) -> list:
    return list(walk(e))


def _replace(e: Expr, target_index: int, new: Expr) -> Expr:
    counter = [0]

    def go(n):
        k = counter[0]
        counter[0] += 1
        if k == target_index:
            # skip the counter past the replaced subtree
            counter[0] += sum(1 for _ in walk(n)) - 1
            return new
        if isinstance(n, Unary):
            return Unary(n.op, go(n.child))
        if isinstance(n, Binary):
            return Binary(n.op, go(n.left), go(n.right))
        return n

    return go(e)


def mutate(e: Expr, rng: np.random.Generator, donor: Expr | None = None, arity: int = 1) -> Expr:
    """Operator swap, subtree regrowth, or crossover with ``donor``."""
    nodes = _subtrees(e)
    i = int(rng.integers(len(nodes)))
    node = nodes[i]
    kind = rng.integers(3)
    if kind == 0 and isinstance(node, Unary):
        ops = [o for o in UNARY_OPS if o != node.op]
        return _replace(e, i, Unary(str(rng.choice(ops)), node.child))
    if kind == 0 and isinstance(node, Binary) and node.op != "pow":
        ops = [o for o in BINARY_OPS if o not in (node.op, "pow")]
        return _replace(e, i, Binary(str(rng.choice(ops)), node.left, node.right))
    if kind == 2 and donor is not None:
        part = _subtrees(donor)[int(rng.integers(len(list(walk(donor)))))]
        return _replace(e, i, part)
    sub = random_expr(int(rng.integers(2**31)), arity, GeneratorConfig(max_depth=3, arity=arity))
    return _replace(e, i, sub)


def refine(best: FitResult, donor, X, y, arity, budget, seed, n_starts=N_STARTS) -> FitResult:
    rng = np.random.default_rng([seed, 0x6F])
    cur = best
    for _ in range(budget):
        cand = mutate(cur.expr, rng, donor, arity)
        if not any(isinstance(n, Var) for n in walk(cand)):
            continue
        try:
            e, _ = fit_constants(cand, X, y, n_starts, seed, arity=arity)
        except FitFailure:
            continue
        score = _score(e, X, y, arity)
        if score < cur.mse_n:
            cur = FitResult(e, score, best.index, True)
            if score == 0:
                break
    return cur


# ---------------------------------------------------------------------------
# evaluation


def held_out_points(arity: int, eval_seed: int, expr_id: int, n: int = HELD_OUT,
                    rng_range=HELD_OUT_RANGE) -> np.ndarray:
    """``n`` points from ``[-5, -3] U [3, 5]`` per coordinate, keyed by (seed, expression)."""
    rng = np.random.default_rng([eval_seed, expr_id, 0x4E1D])
    mag = rng.uniform(*rng_range, size=(n, arity))
    sign = np.where(rng.random((n, arity)) < 0.5, -1.0, 1.0)
    return mag * sign


@dataclass
class ExprScore:
    expr_id: int
    method: str
    truth: str
    fitted: str
    mse_n: float
    r2: float
    isclose: float
    skeleton_match: bool
    n_eval: int
    excluded: int


def score_fit(truth: Expr, fitted: Expr, arity: int, eval_seed: int, expr_id: int,
              method: str = "") -> ExprScore:
    X = held_out_points(arity, eval_seed, expr_id)
    yt, okt = kernels.eval_program(compile_expr(truth, arity), X)
    yp, okp = kernels.eval_program(compile_expr(fitted, arity), X)
    keep = okt & okp
    # a prediction undefined where the truth is defined counts as excluded but is not rewarded
    n = int(keep.sum())
    if n == 0:
        m, r2, close = math.inf, 0.0, 0.0
    else:
        m = mse_n(yt[keep], yp[keep])
        r2 = r_squared(yt[keep], yp[keep])
        close = isclose_proportion(yt[keep], yp[keep])
    return ExprScore(expr_id, method, to_text(truth), to_text(fitted), m, r2, close,
                     skeleton_text(truth) == skeleton_text(fitted), n, len(X) - n)


@dataclass
class EvalReport:
    scores: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    # per method: one list of per-expression R2 values for every query step
    step_r2: dict = field(default_factory=dict)

    def methods(self) -> list:
        return sorted({s.method for s in self.scores})

    def for_method(self, method: str) -> list:
        return sorted((s for s in self.scores if s.method == method), key=lambda s: s.expr_id)

    def aggregate(self, method: str) -> dict:
        ss = self.for_method(method)
        if not ss:
            return {}
        r2 = np.array([s.r2 for s in ss])
        close = np.array([s.isclose for s in ss])
        mses = np.array([s.mse_n for s in ss])
        with np.errstate(divide="ignore"):
            log_mse = np.log10(mses)
        return {
            "count": len(ss),
            "mean_r2": float(r2.mean()),
            "mean_isclose": float(close.mean()),
            "isclose_rate": float(np.mean(close > 0.95)),
            "log_mse_rate": float(np.mean(log_mse < -10)),
            "skeleton_rate": float(np.mean([s.skeleton_match for s in ss])),
            "excluded": int(sum(s.excluded for s in ss)),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["expr_id", "method", "truth", "fitted", "mse_n", "r2", "isclose",
                    "skeleton_match", "n_eval", "excluded"])
        for s in sorted(self.scores, key=lambda s: (s.expr_id, s.method)):
            w.writerow([s.expr_id, s.method, s.truth, s.fitted, f"{s.mse_n:.10g}",
                        f"{s.r2:.10g}", f"{s.isclose:.10g}", int(s.skeleton_match),
                        s.n_eval, s.excluded])
        return buf.getvalue()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        methods = sorted(self.curves)
        w.writerow(["step"] + [f"{m}_mean_r2" for m in methods])
        steps = max((len(c) for c in self.curves.values()), default=0)
        for k in range(steps):
            w.writerow([k] + [f"{self.curves[m][k]:.10g}" if k < len(self.curves[m]) else ""
                              for m in methods])
        return buf.getvalue()

    def summary(self) -> str:
        lines = []
        for m in self.methods():
            a = self.aggregate(m)
            lines.append(f"{m}: n={a['count']} mean R2={a['mean_r2']:.4f} "
                         f"isclose>95%={a['isclose_rate']:.3f} log10 MSE_N<-10={a['log_mse_rate']:.3f} "
                         f"skeleton={a['skeleton_rate']:.3f} excluded points={a['excluded']}")
        return "\n".join(lines)


def evaluate_datasets(family: Sequence[Expr], datasets: dict, bank: CandidateBank,
                      eval_seed: int, budget: int = 0, curve: bool = False,
                      n_starts: int = N_STARTS, fit_seed: int = 0) -> EvalReport:
    """Score ``datasets[method][expr_id]`` against ``family[expr_id]``.

    With ``curve`` set, each method also gets the mean held-out R2 after
    fitting on the points gathered up to every query step.
    """
    rep = EvalReport()
    for method in sorted(datasets):
        per = datasets[method]
        steps = None
        for eid in sorted(per):
            ds = per[eid]
            truth = family[eid]
            try:
                res = fit(ds, bank, budget, fit_seed, n_starts)
                rep.scores.append(score_fit(truth, res.expr, bank.arity, eval_seed, eid, method))
            except FitFailure:
                rep.scores.append(ExprScore(eid, method, to_text(truth), "", math.inf, 0.0, 0.0,
                                            False, 0, HELD_OUT))
            if curve:
                K = int(ds.step.max())
                if steps is None:
                    steps = [[] for _ in range(K + 1)]
                for k in range(min(K, len(steps) - 1) + 1):
                    sub = ds.upto_step(k)
                    r2 = 0.0
                    if len(sub) >= 2:
                        try:
                            e = fit(sub, bank, 0, fit_seed, n_starts).expr
                            r2 = score_fit(truth, e, bank.arity, eval_seed, eid).r2
                        except FitFailure:
                            pass
                    steps[k].append(r2)
        if curve and steps is not None:
            rep.curves[method] = [float(np.mean(s)) if s else 0.0 for s in steps]
            rep.step_r2[method] = steps
    return rep


def collect_datasets(family: Sequence[Expr], method: str, arity: int = 1, net=None,
                     query_cfg=None, seed: int = 0) -> tuple[dict, list]:
    """Fit points for every expression: the query loop or a baseline sampler.

    Returns ``({expr_id: Dataset}, [(expr_id, error), ...])``.
    """
    from .querynet import QueryConfig, run_query_loop, sample_baseline, QueryFailure

    cfg = query_cfg or QueryConfig()
    n = cfg.m * (cfg.K + 1)
    out, failed = {}, []
    for eid, e in enumerate(family):
        system = ExprSystem(e, arity)
        try:
            if method == "quosr":
                if net is None:
                    raise ValueError("quosr method needs a trained network")
                out[eid] = run_query_loop(net, system, cfg, seed=seed + eid)
            else:
                out[eid] = sample_baseline(system, method, n, cfg.box, arity, seed + eid, cfg.m)
        except QueryFailure as exc:
            failed.append((eid, str(exc)))
    return out, failed


def evaluate_pipeline(family: Sequence[Expr], methods: Sequence[str], bank: CandidateBank,
                      net=None, query_cfg=None, eval_seed: int = 0, query_seed: int = 0,
                      budget: int = 0, curve: bool = False) -> EvalReport:
    datasets = {}
    for m in methods:
        datasets[m], _ = collect_datasets(family, m, bank.arity, net, query_cfg, query_seed)
    return evaluate_datasets(family, datasets, bank, eval_seed, budget, curve)
