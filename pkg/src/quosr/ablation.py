"""The eight-way ablation grid: intersection x similarity x representation x strategy."""
from __future__ import annotations

import csv
import io
import time
import traceback
from dataclasses import replace
from typing import Sequence

from .expr import Expr
from .querynet import ModelConfig, QueryConfig, QueryFailure
from .regressor import CandidateBank, evaluate_pipeline
from .training import TrainConfig, TrainingDiverged, train

# (intersection, similarity, representation, strategy)
GRID = [
    ("mean", "kl", "data", "qbd"),
    ("max", "kl", "data", "qbd"),
    ("attention", "cos", "data", "qbd"),
    ("attention", "kl", "expr", "qbd"),
    ("attention", "kl", "expr", "qbs"),
    ("attention", "kl", "data", "qbs"),
    ("attention", "kl", "data", "qbp"),
    ("attention", "kl", "data", "qbd"),
]


def run_ablation(family: Sequence[Expr], held_out: Sequence[Expr], model: ModelConfig,
                 train_cfg: TrainConfig, query: QueryConfig, bank: CandidateBank,
                 eval_seed: int = 0, grid=GRID, log=print) -> list[dict]:
    """Train and evaluate every grid row; a failing row is reported as N/A."""
    rows = []
    for inter, sim, rep, strat in grid:
        row = {"intersection": inter, "similarity": sim, "representation": rep,
               "strategy": strat, "status": "ok", "final_loss": None,
               "isclose_rate": None, "mean_r2": None, "seconds": 0.0, "diagnostic": ""}
        t0 = time.perf_counter()
        try:
            mc = replace(model, intersection=inter, similarity=sim, strategy=strat)
            tc = replace(train_cfg, representation=rep)
            res = train(family, mc, tc)
            row["final_loss"] = res.trace[-1]["loss"] if res.trace else None
            report = evaluate_pipeline(held_out, ["quosr"], bank, res.net, query,
                                       eval_seed=eval_seed)
            agg = report.aggregate("quosr")
            row["isclose_rate"] = agg["isclose_rate"]
            row["mean_r2"] = agg["mean_r2"]
        except (TrainingDiverged, QueryFailure, FloatingPointError, MemoryError,
                ValueError) as exc:
            row["status"] = "N/A"
            row["diagnostic"] = f"{type(exc).__name__}: {exc}".splitlines()[0]
            log(f"  {inter}/{sim}/{rep}/{strat} failed: {row['diagnostic']}")
            log("".join(traceback.format_exception_only(type(exc), exc)).strip())
        row["seconds"] = time.perf_counter() - t0
        rows.append(row)
        log(f"{inter:9s} {sim:3s} {rep:4s} {strat}: {format_cell(row)}")
    return rows


def format_cell(row: dict) -> str:
    if row["status"] != "ok":
        return "N/A"
    return f"proportion={100 * row['isclose_rate']:.2f} R2={row['mean_r2']:.4f}"


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["intersection", "similarity", "representation", "strategy", "status",
            "final_loss", "isclose_rate", "mean_r2", "diagnostic"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([("" if r[c] is None else (f"{r[c]:.10g}" if isinstance(r[c], float) else r[c]))
                    for c in cols])
    return buf.getvalue()
