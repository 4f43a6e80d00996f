"""Diagonal-Gaussian latent algebra.

Embeddings are stored as ``(mu, log_var)``. The batched functions here take
and return autodiff tensors with one Gaussian per row; the ``DiagGaussian``
helpers at the bottom wrap them for single distributions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# clamp applied to log-variances before they are exponentiated in similarities
LOG_VAR_CLAMP = (-10.0, 10.0)
# sampling keeps near-degenerate Gaussians (log_var down to -60) intact
SAMPLE_LOG_VAR_CLAMP = (-60.0, 10.0)
Y_CLIP = 1e4

INTERSECTIONS = ("attention", "mean", "max")
SIMILARITIES = ("kl", "cos")


@dataclass
class DiagGaussian:
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mu.shape != self.log_var.shape or self.mu.ndim != 1:
            raise ValueError("mu and log_var must be vectors of equal length")
        if not np.all(np.isfinite(self.log_var)):
            raise ValueError("log_var must be finite")

    @property
    def dim(self):
        return self.mu.shape[0]

    @property
    def var(self):
        return np.exp(self.log_var)

    @property
    def sigma(self):
        return np.exp(0.5 * self.log_var)

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.mu, self.log_var])[None, :]


def normalize_y(y) -> np.ndarray:
    return np.arcsinh(np.clip(np.asarray(y, dtype=np.float64), -Y_CLIP, Y_CLIP))


def split(t: Tensor, d: int) -> tuple[Tensor, Tensor]:
    return ad.slice_cols(t, 0, d), ad.slice_cols(t, d, 2 * d)


def embed_points(net: ad.Mlp, x, y) -> tuple[Tensor, Tensor]:
    """One Gaussian per data point from ``net([x, asinh(y)])``."""
    x = ad.as_tensor(x)
    feats = ad.concat_cols([x, normalize_y(y).reshape(-1, 1)])
    out = net(feats)
    d = out.shape[1] // 2
    return split(out, d)


def intersect(mu: Tensor, log_var: Tensor, group: int, method: str = "attention",
              attention: ad.Mlp | None = None) -> tuple[Tensor, Tensor]:
    """Combine consecutive groups of ``group`` rows into one Gaussian each."""
    d = mu.shape[1]
    if mu.shape[0] == 0:
        raise ValueError("cannot intersect an empty set")
    if method == "attention":
        if attention is None:
            raise ValueError("attention intersection needs an attention network")
        both = ad.concat_cols([mu, log_var])
        pooled = ad.group_softmax_pool(both, attention(both), group)
        return split(pooled, d)
    if method == "mean":
        # log(mean(exp(lv))) evaluated around the group max for stability
        m = ad.group_max(log_var, group).detach()
        rep = np.repeat(np.arange(m.shape[0]), group)
        shifted = ad.exp(log_var - ad.take_rows(m, rep))
        return ad.group_mean(mu, group), ad.log(ad.group_mean(shifted, group)) + m
    if method == "max":
        return ad.group_max(mu, group), ad.group_max(log_var, group)
    raise ValueError(f"unknown intersection {method!r}")


def _col_times_ones(col: Tensor, n: int) -> Tensor:
    return ad.matmul(col, Tensor(np.ones((1, n))))


def pairwise_kl(mu: Tensor, log_var: Tensor) -> Tensor:
    """``K[i, j] = KL(N_i || N_j)`` for all row pairs."""
    lv = ad.clip(log_var, *LOG_VAR_CLAMP)
    n = mu.shape[0]
    var = ad.exp(lv)
    inv = ad.exp(-lv)
    mu_sq = ad.square(mu)
    cross = ad.matmul(var, inv.T) + ad.matmul(mu_sq, inv.T) - 2.0 * ad.matmul(mu, (mu * inv).T)
    row = ad.sum(mu_sq * inv, axis=1) + ad.sum(lv, axis=1)
    col = _col_times_ones(ad.sum(lv, axis=1, keepdims=True), n)
    return 0.5 * (cross + row - col - float(mu.shape[1]))


def pairwise_cosine(mu: Tensor, log_var: Tensor) -> Tensor:
    """Cosine similarity of the concatenated ``[mu, sigma]`` vectors."""
    lv = ad.clip(log_var, *LOG_VAR_CLAMP)
    v = ad.concat_cols([mu, ad.exp(0.5 * lv)])
    norm = ad.sqrt(ad.sum(ad.square(v), axis=1, keepdims=True))
    return ad.matmul(v, v.T) / ad.matmul(norm, norm.T)


def similarity_matrix(mu: Tensor, log_var: Tensor, kind: str = "kl") -> Tensor:
    """Similarity used by the contrastive loss; for ``kl`` this is ``-KL``."""
    if kind == "kl":
        return -pairwise_kl(mu, log_var)
    if kind == "cos":
        return pairwise_cosine(mu, log_var)
    raise ValueError(f"unknown similarity {kind!r}")


def cross_similarity(mu_a, lv_a, mu_b, lv_b, kind="kl") -> Tensor:
    """``S[i, j] = sim(a_i, b_j)`` between two batches."""
    n = mu_a.shape[0]
    full = similarity_matrix(ad.concat_rows([mu_a, mu_b]), ad.concat_rows([lv_a, lv_b]), kind)
    return ad.slice_cols(ad.take_rows(full, np.arange(n)), n, n + mu_b.shape[0])


def sample(mu: Tensor, log_var: Tensor, m: int, rng: np.random.Generator) -> Tensor:
    """Reparameterized draws: ``m`` rows per input row, ``mu + sigma * eps``."""
    if m < 1:
        raise ValueError("need at least one sample")
    B, d = mu.shape
    rep = np.repeat(np.arange(B), m)
    eps = rng.standard_normal((B * m, d))
    sigma = ad.exp(0.5 * ad.clip(log_var, *SAMPLE_LOG_VAR_CLAMP))
    return ad.take_rows(mu, rep) + ad.take_rows(sigma, rep) * eps


# ---------------------------------------------------------------------------
# single-distribution helpers


def _stack(parts: Sequence[DiagGaussian]):
    if not parts:
        raise ValueError("cannot intersect an empty list")
    dims = {p.dim for p in parts}
    if len(dims) != 1:
        raise ValueError("all parts must share one dimension")
    return Tensor(np.stack([p.mu for p in parts])), Tensor(np.stack([p.log_var for p in parts]))


def _one(mu: Tensor, lv: Tensor) -> DiagGaussian:
    return DiagGaussian(mu.data[0].copy(), lv.data[0].copy())


def embed_point(net: ad.Mlp, x, y) -> DiagGaussian:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))[None, :]
    mu, lv = embed_points(net, x, [y])
    if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(lv.data))):
        raise FloatingPointError("embedding network produced non-finite output")
    return _one(mu, lv)


def intersect_attention(parts: Sequence[DiagGaussian], net: ad.Mlp) -> DiagGaussian:
    mu, lv = _stack(parts)
    return _one(*intersect(mu, lv, len(parts), "attention", net))


def intersect_mean(parts: Sequence[DiagGaussian]) -> DiagGaussian:
    mu, lv = _stack(parts)
    return _one(*intersect(mu, lv, len(parts), "mean"))


def intersect_max(parts: Sequence[DiagGaussian]) -> DiagGaussian:
    mu, lv = _stack(parts)
    return _one(*intersect(mu, lv, len(parts), "max"))


def kl_divergence(p: DiagGaussian, q: DiagGaussian) -> float:
    """Closed-form ``KL(p || q)`` in nats (log-variances clamped)."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    lp = np.clip(p.log_var, *LOG_VAR_CLAMP)
    lq = np.clip(q.log_var, *LOG_VAR_CLAMP)
    terms = 0.5 * (lq - lp) + (np.exp(lp) + (p.mu - q.mu) ** 2) / (2.0 * np.exp(lq)) - 0.5
    return float(max(terms.sum(), 0.0))


def cosine_similarity(p: DiagGaussian, q: DiagGaussian) -> float:
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    a = np.concatenate([p.mu, np.exp(0.5 * np.clip(p.log_var, *LOG_VAR_CLAMP))])
    b = np.concatenate([q.mu, np.exp(0.5 * np.clip(q.log_var, *LOG_VAR_CLAMP))])
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def draw(g: DiagGaussian, m: int, seed) -> np.ndarray:
    """``m`` samples from ``g`` using a seeded noise stream."""
    rng = np.random.default_rng(seed)
    mu, lv = Tensor(g.mu[None, :]), Tensor(g.log_var[None, :])
    return sample(mu, lv, m, rng).data
