"""Siamese training of the query network with the contrastive objectives."""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import latent
from .autodiff import Tensor
from .expr import Expr, to_text, tokenize
from .querynet import QueryNet, ModelConfig, ExprSystem, initial_points

log = logging.getLogger(__name__)

REPRESENTATIONS = ("data", "expr")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-3
    tau: float = 0.1
    iterations: int = 1000
    K: int = 9
    m: int = 3
    seed: int = 0
    representation: str = "data"
    checkpoint_every: int = 0

    def validate(self) -> list[str]:
        errs = []
        if self.batch_size < 2:
            errs.append("batch_size must be >= 2 (the loss needs negatives)")
        if not self.tau > 0:
            errs.append("tau must be > 0")
        if self.lr < 0:
            errs.append("lr must be >= 0")
        if self.iterations < 0:
            errs.append("iterations must be >= 0")
        if self.K < 1:
            errs.append("K must be >= 1")
        if self.m < 1:
            errs.append("m must be >= 1")
        if self.representation not in REPRESENTATIONS:
            errs.append(f"representation must be one of {REPRESENTATIONS}")
        if self.checkpoint_every < 0:
            errs.append("checkpoint_every must be >= 0")
        return errs


# ---------------------------------------------------------------------------
# losses


def _check_finite(S: Tensor, what: str):
    if not np.all(np.isfinite(S.data)):
        raise TrainingDiverged(f"non-finite {what} similarity")


def modified_infonce(mu: Tensor, lv: Tensor, sim: str = "kl", tau: float = 0.1) -> Tensor:
    """Contrastive loss over ``2N`` embeddings where rows ``2i, 2i+1`` are positives.

    Each row is scored against the other ``2N - 1`` rows; both directions of
    every positive pair contribute and the result is averaged over ``2N``.
    """
    n = mu.shape[0]
    if n < 4 or n % 2:
        raise ValueError("need an even number >= 4 of embeddings")
    S = latent.similarity_matrix(mu, lv, sim) * (1.0 / tau)
    _check_finite(S, sim)
    mask = np.zeros((n, n))
    np.fill_diagonal(mask, -np.inf)
    pos = np.zeros((n, n))
    idx = np.arange(n)
    pos[idx, idx ^ 1] = 1.0
    lse = ad.logsumexp_rows(S + mask)
    pos_score = ad.sum(S * pos, axis=1, keepdims=True)
    return ad.mean(lse - pos_score)


def standard_infonce(d_mu, d_lv, f_mu, f_lv, sim: str = "kl", tau: float = 0.1) -> Tensor:
    """InfoNCE between data embeddings ``d_i`` and expression embeddings ``f_j``."""
    n = d_mu.shape[0]
    if f_mu.shape[0] != n:
        raise ValueError("data and expression batches differ in size")
    S = latent.cross_similarity(d_mu, d_lv, f_mu, f_lv, sim) * (1.0 / tau)
    _check_finite(S, sim)
    lse = ad.logsumexp_rows(S)
    diag = ad.sum(S * np.eye(n), axis=1, keepdims=True)
    return ad.mean(lse - diag)


# ---------------------------------------------------------------------------
# expression encoder (ablation)


class ExprEncoder:
    """Hashed token + bigram bag of the canonical text, pooled and passed through an MLP."""

    def __init__(self, latent_dim: int, buckets: int = 256, width: int = 64, hidden: int = 128,
                 seed: int = 0):
        rng = np.random.default_rng([seed, 0xE4])
        self.buckets = buckets
        self.table = Tensor(rng.normal(0, 0.1, size=(buckets, width)), requires_grad=True)
        self.mlp = ad.Mlp.build([width, hidden, 2 * latent_dim], rng)
        self.latent_dim = latent_dim

    def _bag(self, e: Expr) -> np.ndarray:
        toks = []
        for kind, val, _ in tokenize(to_text(e)):
            if kind == "end":
                continue
            toks.append("<num>" if kind == "num" else val)
        keys = toks + [a + " " + b for a, b in zip(toks, toks[1:])]
        row = np.zeros(self.buckets)
        for k in keys:
            row[zlib.crc32(k.encode()) % self.buckets] += 1.0
        return row / max(len(keys), 1)

    def __call__(self, exprs: Sequence[Expr]) -> tuple[Tensor, Tensor]:
        bags = Tensor(np.stack([self._bag(e) for e in exprs]))
        out = self.mlp(ad.matmul(bags, self.table))
        return latent.split(out, self.latent_dim)

    def named_parameters(self):
        yield "expr.table", self.table
        yield from self.mlp.named_parameters("expr.mlp.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Rollout:
    loss: Tensor
    step_losses: list
    pos_kl: list
    neg_kl: list
    final_mu: np.ndarray = None
    final_lv: np.ndarray = None
    substitutions: int = 0


def kl_pair_stats(mu: np.ndarray, lv: np.ndarray) -> tuple[float, float]:
    """Mean KL over positive pairs (2i, 2i+1) and over all other off-diagonal pairs."""
    K = latent.pairwise_kl(Tensor(mu), Tensor(lv)).data
    n = len(K)
    idx = np.arange(n)
    pos_mask = np.zeros((n, n), dtype=bool)
    pos_mask[idx, idx ^ 1] = True
    neg_mask = ~pos_mask & ~np.eye(n, dtype=bool)
    return float(K[pos_mask].mean()), float(K[neg_mask].mean())


def rollout(net: QueryNet, systems: Sequence[ExprSystem], K: int, m: int, rng, tau: float,
            branches: int = 2, expr_encoder: ExprEncoder | None = None,
            exprs: Sequence[Expr] | None = None, encode_final: bool = False) -> Rollout:
    """Run ``K`` batched query steps, accumulating the contrastive loss before each decode.

    With ``branches == 2`` sets ``2i`` and ``2i+1`` are two independent query
    processes on system ``i``. With ``branches == 1`` the loss pairs each data
    embedding with ``expr_encoder`` output for the same system.
    """
    M = net.cfg.arity
    box = net.cfg.box
    sim = net.cfg.similarity
    n_sets = len(systems) * branches
    set_system = np.repeat(np.arange(len(systems)), branches)
    xs, ys = [], []
    for s in range(n_sets):
        x0, y0 = initial_points(systems[set_system[s]], m, box, M, rng)
        xs.append(x0)
        ys.append(y0)
    X = Tensor(np.concatenate(xs))
    Y = np.concatenate(ys)
    n = m
    if branches == 1:
        f_mu, f_lv = expr_encoder(exprs)
    total = None
    step_losses, pos_kl, neg_kl = [], [], []
    subs = 0
    for _ in range(K):
        mu, lv = net.encode(X, Y, n)
        if branches == 2:
            lk = modified_infonce(mu, lv, sim, tau)
            pk, nk = kl_pair_stats(mu.data, lv.data)
        else:
            lk = standard_infonce(mu, lv, f_mu, f_lv, sim, tau)
            pk, nk = kl_pair_stats(*_interleave(mu.data, lv.data, f_mu.data, f_lv.data))
        step_losses.append(lk.item())
        pos_kl.append(pk)
        neg_kl.append(nk)
        total = lk if total is None else total + lk
        Xq = net.decode(mu, lv, rng, m)
        p = Xq.shape[0] // n_sets
        Yq = np.empty(Xq.shape[0])
        fallback_rows, fallback_at = [], []
        for s in range(n_sets):
            rows = slice(s * p, (s + 1) * p)
            y, ok = systems[set_system[s]](Xq.data[rows])
            for j in np.flatnonzero(~ok):
                xf, yf = initial_points(systems[set_system[s]], 1, box, M, rng)
                fallback_rows.append(xf[0])
                fallback_at.append(s * p + j)
                y[j] = yf[0]
            Yq[rows] = y
        if fallback_rows:
            subs += len(fallback_rows)
            idx = np.arange(Xq.shape[0])
            idx[fallback_at] = Xq.shape[0] + np.arange(len(fallback_rows))
            Xq = ad.take_rows(ad.concat_rows([Xq, Tensor(np.array(fallback_rows))]), idx)
        old = np.arange(n_sets * n).reshape(n_sets, n)
        new = n_sets * n + np.arange(n_sets * p).reshape(n_sets, p)
        order = np.concatenate([old, new], axis=1).ravel()
        X = ad.take_rows(ad.concat_rows([X, Xq]), order)
        Y = np.concatenate([Y, Yq])[order]
        n += p
    out = Rollout(total * (1.0 / K), step_losses, pos_kl, neg_kl, substitutions=subs)
    if encode_final:
        mu, lv = net.encode(X.detach(), Y, n)
        out.final_mu, out.final_lv = mu.data, lv.data
    return out


def _interleave(a_mu, a_lv, b_mu, b_lv):
    n, d = a_mu.shape
    mu = np.empty((2 * n, d))
    lv = np.empty((2 * n, d))
    mu[0::2], mu[1::2] = a_mu, b_mu
    lv[0::2], lv[1::2] = a_lv, b_lv
    return mu, lv


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    net: QueryNet
    trace: list = field(default_factory=list)
    expr_encoder: ExprEncoder | None = None
    iteration: int = 0


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Independent stream per iteration so resumed runs replay exactly."""
    return np.random.default_rng([seed, iteration, 0x7A1])


def trainable(net: QueryNet, expr_encoder: ExprEncoder | None):
    named = list(net.named_parameters())
    if expr_encoder is not None:
        named += list(expr_encoder.named_parameters())
    return named


def train(family: Sequence[Expr], model_cfg: ModelConfig, cfg: TrainConfig,
          state: TrainResult | None = None,
          on_iteration: Callable[[TrainResult], None] | None = None) -> TrainResult:
    """Train from scratch, or continue ``state`` up to ``cfg.iterations``.

    ``on_iteration`` runs after every completed iteration (used for
    checkpointing). Raises :class:`TrainingDiverged` on a non-finite loss or
    gradient.
    """
    if not family:
        raise ValueError("empty training family")
    errs = cfg.validate() + model_cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    if state is None:
        net = QueryNet.create(model_cfg, cfg.seed)
        enc = None
        if cfg.representation == "expr":
            enc = ExprEncoder(model_cfg.latent_dim, seed=cfg.seed)
        state = TrainResult(net, [], enc, 0)
    systems = [ExprSystem(e, model_cfg.arity) for e in family]
    named = trainable(state.net, state.expr_encoder)
    names = [n for n, _ in named]
    params = [p for _, p in named]
    branches = 1 if cfg.representation == "expr" else 2
    n_pick = cfg.batch_size
    while state.iteration < cfg.iterations:
        it = state.iteration
        rng = iteration_rng(cfg.seed, it)
        pick = rng.choice(len(family), size=n_pick, replace=len(family) < n_pick)
        ad.zero_grad(params)
        r = rollout(state.net, [systems[i] for i in pick], cfg.K, cfg.m, rng, cfg.tau,
                    branches, state.expr_encoder, [family[i] for i in pick])
        value = r.loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"iteration {it}: loss is {value}; per-step losses {r.step_losses}")
        r.loss.backward()
        if cfg.lr > 0:
            try:
                ad.sgd_step(params, cfg.lr, names)
            except ad.NonFiniteGradient as exc:
                raise TrainingDiverged(f"iteration {it}: {exc}") from None
        state.trace.append({"iteration": it, "loss": value,
                            "pos_kl": r.pos_kl, "neg_kl": r.neg_kl,
                            "substitutions": r.substitutions})
        state.iteration = it + 1
        if it % 100 == 0:
            log.info("iter %d loss %.4f", it, value)
        if on_iteration is not None:
            on_iteration(state)
    return state


def pair_statistics(net: QueryNet, family: Sequence[Expr], K: int, m: int, seed: int = 0,
                    batch_size: int = 16, batches: int = 4) -> dict:
    """Positive/negative KL of final-dataset embeddings on (held-out) systems."""
    systems = [ExprSystem(e, net.cfg.arity) for e in family]
    pos, neg = [], []
    for b in range(batches):
        rng = np.random.default_rng([seed, b, 0x57A7])
        pick = rng.choice(len(family), size=batch_size, replace=len(family) < batch_size)
        r = rollout(net, [systems[i] for i in pick], K, m, rng, 1.0, encode_final=True)
        pk, nk = kl_pair_stats(r.final_mu, r.final_lv)
        pos.append(pk)
        neg.append(nk)
    return {"pos_kl": float(np.mean(pos)), "neg_kl": float(np.mean(neg))}


def trace_to_rows(trace: list, K: int) -> tuple[list, list]:
    header = ["iteration", "loss"] + [f"pos_kl_{k}" for k in range(1, K + 1)] + \
             [f"neg_kl_{k}" for k in range(1, K + 1)]
    rows = [[t["iteration"], t["loss"], *t["pos_kl"], *t["neg_kl"]] for t in trace]
    return header, rows


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: TrainResult, cfg: TrainConfig) -> None:
    """Parameters, iteration counter, config and loss trace in one file."""
    arrays = dict(state.net.state())
    if state.expr_encoder is not None:
        arrays.update({n: p.data for n, p in state.expr_encoder.named_parameters()})
    meta = {"model": state.net.spec(), "train": asdict(cfg),
            "iteration": state.iteration, "trace": state.trace}
    ad.save_arrays(path, arrays, meta)


def load_checkpoint(path) -> tuple[TrainResult, TrainConfig]:
    arrays, meta = ad.load_arrays(path)
    for key in ("model", "train", "iteration", "trace"):
        if key not in meta:
            raise ValueError(f"{path}: not a training checkpoint (missing {key!r})")
    net = QueryNet.from_state(meta["model"], arrays)
    cfg = TrainConfig(**meta["train"])
    enc = None
    if cfg.representation == "expr":
        enc = ExprEncoder(net.cfg.latent_dim, seed=cfg.seed)
        for name, p in enc.named_parameters():
            p.data = arrays[name].copy()
    return TrainResult(net, list(meta["trace"]), enc, int(meta["iteration"])), cfg
