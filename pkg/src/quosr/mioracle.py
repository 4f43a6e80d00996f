"""Exact information-theoretic checks over finite function families.

A :class:`DiscreteFamily` is a table ``T[f, x]`` of quantized responses of
``n`` functions on ``g`` grid points, with a prior over functions. Everything
here is enumeration: entropies and mutual information in bits, greedy and
exhaustively optimal query decision trees, the Huffman bracket on the average
decision path, and a numeric check of the contrastive bound chain.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

FAMILY_HEADER = "# quosr-family v1"
MAX_OPTIMAL_N = 16
MAX_OPTIMAL_G = 8
MAX_OUTCOMES = 200_000
_TOL = 1e-12


class FamilyError(ValueError):
    pass


class TooLarge(ValueError):
    pass


@dataclass
class DiscreteFamily:
    table: np.ndarray
    prior: np.ndarray = None
    alphabet: int = None
    grid: list = None

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.int64)
        if self.table.ndim != 2 or self.table.shape[0] == 0:
            raise FamilyError("table must be a non-empty (functions x grid) array")
        n, g = self.table.shape
        if self.prior is None:
            self.prior = np.full(n, 1.0 / n)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        if self.alphabet is None:
            self.alphabet = max(2, int(self.table.max()) + 1) if g else 2
        if self.grid is None:
            self.grid = list(range(g))
        errs = self.validate()
        if errs:
            raise FamilyError("; ".join(errs))

    def validate(self) -> list[str]:
        n, g = self.table.shape
        errs = []
        if self.prior.shape != (n,):
            errs.append(f"prior has {self.prior.size} entries for {n} functions")
        elif np.any(self.prior < 0) or abs(self.prior.sum() - 1.0) > 1e-9:
            errs.append(f"prior must be non-negative and sum to 1 (sums to {self.prior.sum():.12g})")
        if self.alphabet < 2:
            errs.append("alphabet must have at least 2 symbols")
        if self.table.size and (self.table.min() < 0 or self.table.max() >= self.alphabet):
            errs.append(f"table entries must lie in [0, {self.alphabet})")
        if len(self.grid) != g:
            errs.append("grid labels do not match the table width")
        return errs

    @property
    def n(self):
        return self.table.shape[0]

    @property
    def g(self):
        return self.table.shape[1]

    def separable(self) -> bool:
        return len({tuple(r) for r in self.table}) == self.n

    def restrict(self, members) -> "DiscreteFamily":
        members = list(members)
        p = self.prior[members]
        return DiscreteFamily(self.table[members], p / p.sum(), self.alphabet, list(self.grid))


# ---------------------------------------------------------------------------
# entropy and mutual information


def entropy(prior) -> float:
    p = np.asarray(prior, dtype=np.float64)
    p = p[p > 0]
    if p.size == 0:
        return 0.0
    p = p / p.sum()
    return float(max(0.0, -(p * np.log2(p)).sum()))


def _partition(table, members, queries):
    groups: dict = {}
    for f in members:
        groups.setdefault(tuple(table[f, list(queries)]), []).append(f)
    return groups


def conditional_entropy(fam: DiscreteFamily, queries) -> float:
    """``H(F | responses on queries)`` in bits."""
    h = 0.0
    for grp in _partition(fam.table, range(fam.n), queries).values():
        w = fam.prior[grp].sum()
        if w > 0:
            h += w * entropy(fam.prior[grp])
    return h


def mutual_information(fam: DiscreteFamily, queries) -> float:
    queries = list(queries)
    if not queries:
        return 0.0
    return max(0.0, entropy(fam.prior) - conditional_entropy(fam, queries))


# ---------------------------------------------------------------------------
# decision trees


@dataclass
class Node:
    members: tuple
    query: int | None = None
    children: dict = field(default_factory=dict)

    @property
    def leaf(self):
        return self.query is None


@dataclass
class DecisionTree:
    root: Node
    family: DiscreteFamily

    def depths(self) -> dict:
        out = {}
        stack = [(self.root, 0)]
        while stack:
            node, d = stack.pop()
            if node.leaf:
                for f in node.members:
                    out[f] = d
            else:
                stack.extend((c, d + 1) for c in node.children.values())
        return out

    def average_path(self) -> float:
        d = self.depths()
        return float(sum(self.family.prior[f] * d[f] for f in d))

    def depth(self) -> int:
        d = self.depths()
        return max(d.values()) if d else 0

    def unresolved(self) -> list:
        """Leaves that still hold more than one function (non-separable family)."""
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.leaf:
                if len(node.members) > 1:
                    out.append(node.members)
            else:
                stack.extend(node.children.values())
        return out

    def paths_distinct(self) -> bool:
        stack = [(self.root, ())]
        while stack:
            node, used = stack.pop()
            if node.leaf:
                continue
            if node.query in used:
                return False
            stack.extend((c, used + (node.query,)) for c in node.children.values())
        return True

    def to_text(self) -> str:
        lines = []

        def rec(node, indent, label):
            pre = "  " * indent + label
            if node.leaf:
                lines.append(f"{pre}leaf {list(node.members)}")
                return
            lines.append(f"{pre}query x[{node.query}]={self.family.grid[node.query]}")
            for sym, child in sorted(node.children.items()):
                rec(child, indent + 1, f"{sym}: ")

        rec(self.root, 0, "")
        return "\n".join(lines)


def _split(table, members, x):
    groups: dict = {}
    for f in members:
        groups.setdefault(int(table[f, x]), []).append(f)
    return groups


def _gain(fam, members, x) -> float:
    p = fam.prior[list(members)]
    total = p.sum()
    if total <= 0:
        return 0.0
    h = entropy(p)
    for grp in _split(fam.table, members, x).values():
        w = fam.prior[grp].sum() / total
        h -= w * entropy(fam.prior[grp])
    return h


def greedy_max_mi_tree(fam: DiscreteFamily) -> DecisionTree:
    """Expand each node on the query with the largest information gain (lowest index on ties)."""

    def build(members):
        node = Node(tuple(members))
        if len(members) <= 1:
            return node
        best, best_gain = None, _TOL
        for x in range(fam.g):
            gain = _gain(fam, members, x)
            if gain > best_gain + _TOL:
                best, best_gain = x, gain
        if best is None:
            # zero-prior members or identical rows: try any query that still splits
            for x in range(fam.g):
                if len(_split(fam.table, members, x)) > 1:
                    best = x
                    break
        if best is None:
            return node
        node.query = best
        node.children = {s: build(g) for s, g in sorted(_split(fam.table, members, best).items())}
        return node

    return DecisionTree(build(list(range(fam.n))), fam)


def optimal_tree(fam: DiscreteFamily, max_n: int = MAX_OPTIMAL_N, max_g: int = MAX_OPTIMAL_G) -> DecisionTree:
    """Exhaustive minimum of the average decision path (memoized over member subsets)."""
    if fam.n > max_n or fam.g > max_g:
        raise TooLarge(f"exhaustive search limited to n <= {max_n}, g <= {max_g} "
                       f"(got n={fam.n}, g={fam.g})")
    prior = fam.prior
    table = fam.table

    @lru_cache(maxsize=None)
    def cost(mask: int):
        members = [f for f in range(fam.n) if mask >> f & 1]
        if len(members) <= 1:
            return 0.0, None
        weight = prior[members].sum()
        best, arg = math.inf, None
        for x in range(fam.g):
            groups = _split(table, members, x)
            if len(groups) < 2:
                continue
            c = weight
            for grp in groups.values():
                c += cost(sum(1 << f for f in grp))[0]
                if c >= best - _TOL:
                    break
            if c < best - _TOL:
                best, arg = c, x
        if arg is None:
            return 0.0, None
        return best, arg

    def build(members):
        node = Node(tuple(members))
        _, x = cost(sum(1 << f for f in members))
        if x is None:
            return node
        node.query = x
        node.children = {s: build(g) for s, g in sorted(_split(table, members, x).items())}
        return node

    tree = DecisionTree(build(list(range(fam.n))), fam)
    cost.cache_clear()
    return tree


@dataclass
class HuffmanReport:
    entropy: float
    c: float
    average_path: float
    lower: float
    upper: float
    holds_lower: bool
    holds_upper: bool

    @property
    def holds(self):
        return self.holds_lower and self.holds_upper


def check_huffman_bound(fam: DiscreteFamily, tree: DecisionTree | None = None) -> HuffmanReport:
    """``c H(F) <= L <= c H(F) + 1`` (upper strict) with ``c = 1 / log2 r``."""
    if tree is None:
        tree = optimal_tree(fam)
    h = entropy(fam.prior)
    c = 1.0 / math.log2(fam.alphabet)
    L = tree.average_path()
    lower = c * h
    return HuffmanReport(h, c, L, lower, lower + 1.0,
                         lower <= L + 1e-9, L < lower + 1.0 - 1e-12)


def random_family(rng: np.random.Generator, max_n: int = 12, max_g: int = 8,
                  alphabets=(2, 3, 4), prior: str = "uniform", max_tries: int = 1000) -> DiscreteFamily:
    """Uniform random response table, resampled until separable."""
    for _ in range(max_tries):
        n = int(rng.integers(2, max_n + 1))
        g = int(rng.integers(1, max_g + 1))
        r = int(rng.choice(alphabets))
        if r ** g < n:
            continue
        table = rng.integers(0, r, size=(n, g))
        fam_prior = None
        if prior == "dirichlet":
            fam_prior = rng.dirichlet(np.ones(n))
        fam = DiscreteFamily(table, fam_prior, r)
        if fam.separable():
            return fam
    raise RuntimeError("could not draw a separable family")


def bijection_family() -> DiscreteFamily:
    """Four functions whose responses on two binary queries are all distinct."""
    return DiscreteFamily([[0, 0], [0, 1], [1, 0], [1, 1]], alphabet=2, grid=[-1.0, 1.0])


# ---------------------------------------------------------------------------
# Claim-1 style check: MI-maximizing query sets versus residual search cost


def residual_path(fam: DiscreteFamily, queries) -> float:
    """Expected optimal remaining decision path after observing ``queries``."""
    total = 0.0
    for grp in _partition(fam.table, range(fam.n), queries).values():
        w = fam.prior[grp].sum()
        if len(grp) > 1 and w > 0:
            total += w * optimal_tree(fam.restrict(grp)).average_path()
    return total


@dataclass
class SetReport:
    k: int
    argmax_set: tuple
    argmax_mi: float
    argmax_residual: float
    best_residual: float

    @property
    def slack(self):
        return self.argmax_residual - self.best_residual

    @property
    def holds(self):
        return self.slack < 1.0


def check_max_mi_sets(fam: DiscreteFamily, k: int) -> SetReport:
    """Among all size-``k`` query sets, compare the MI maximizer to the best residual."""
    if k > fam.g:
        raise ValueError("k exceeds the grid size")
    best_mi, arg = -1.0, None
    best_res = math.inf
    residual_of = {}
    for qs in itertools.combinations(range(fam.g), k):
        mi = mutual_information(fam, qs)
        res = residual_path(fam, qs)
        residual_of[qs] = res
        best_res = min(best_res, res)
        if mi > best_mi + _TOL:
            best_mi, arg = mi, qs
    return SetReport(k, arg, best_mi, residual_of[arg], best_res)


# ---------------------------------------------------------------------------
# Claim-2 chain: contrastive bound <= I(D; D') <= min(I(F; D), I(F; D'))


@dataclass
class Policy:
    """Non-adaptive stochastic query policy: ``k`` i.i.d. draws from ``probs`` over the grid."""
    probs: np.ndarray
    k: int = 1

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1) > 1e-9:
            raise ValueError("policy probabilities must be a distribution")
        if self.k < 1:
            raise ValueError("policy must issue at least one query")


def outcome_matrix(fam: DiscreteFamily, policy: Policy):
    """``A[f, d] = P(D = d | f)`` over observed outcomes ``d = ((x, y), ...)``."""
    if policy.probs.shape != (fam.g,):
        raise ValueError("policy size does not match the grid")
    support = np.flatnonzero(policy.probs > 0)
    if len(support) ** policy.k * fam.n > MAX_OUTCOMES:
        raise TooLarge("outcome space too large to enumerate")
    index: dict = {}
    entries = []
    for xs in itertools.product(support, repeat=policy.k):
        px = float(np.prod(policy.probs[list(xs)]))
        for f in range(fam.n):
            d = tuple((int(x), int(fam.table[f, x])) for x in xs)
            j = index.setdefault(d, len(index))
            entries.append((f, j, px))
    A = np.zeros((fam.n, len(index)))
    for f, j, px in entries:
        A[f, j] += px
    return A, list(index)


def _mi_bits(joint: np.ndarray) -> float:
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(max(0.0, (joint[nz] * np.log2(joint[nz] / (pa @ pb)[nz])).sum()))


def log_ratio_critic(fam: DiscreteFamily, A: np.ndarray) -> np.ndarray:
    """``s(d, d') = log P(d, d') / (P(d) P(d'))`` in nats (``-inf`` where impossible)."""
    joint = A.T @ (fam.prior[:, None] * A)
    pd = joint.sum(axis=1)
    with np.errstate(divide="ignore"):
        return np.log(joint) - np.log(np.outer(pd, pd))


@dataclass
class ChainReport:
    nce_bound: float
    nce_sigma: float
    kl_term: float
    mi_d: float
    mi_d_prime: float
    batch_pairs: int
    samples: int

    @property
    def upper(self):
        return min(self.mi_d, self.mi_d_prime)

    @property
    def holds_left(self):
        return self.nce_bound - 3 * self.nce_sigma <= self.kl_term + 1e-9

    @property
    def holds_right(self):
        return self.kl_term <= self.upper + 1e-9

    @property
    def holds(self):
        return self.holds_left and self.holds_right


def check_claim2_chain(fam: DiscreteFamily, policy: Policy, policy_prime: Policy | None = None,
                       critic: np.ndarray | None = None, batch_pairs: int = 4,
                       samples: int = 4000, seed: int = 0, bootstrap: int = 200) -> ChainReport:
    """Evaluate ``-L' <= I(D; D') <= min(I(F; D), I(F; D'))`` in bits.

    ``D`` and ``D'`` are two independent query branches on the same function.
    ``-L'`` is the modified contrastive estimate ``log(2N-1) - loss`` with
    ``N = batch_pairs`` systems per batch, averaged over ``samples`` batches;
    its standard error comes from a bootstrap over batches. Both policies
    must share one grid; the critic defaults to the exact log density ratio.
    """
    policy_prime = policy_prime or policy
    A, outs = outcome_matrix(fam, policy)
    A2, outs2 = outcome_matrix(fam, policy_prime)
    # align both branches on a common outcome index
    common = {d: i for i, d in enumerate(outs)}
    for d in outs2:
        common.setdefault(d, len(common))
    Ac = np.zeros((fam.n, len(common)))
    Ac[:, :len(outs)] = A
    A2c = np.zeros((fam.n, len(common)))
    for j, d in enumerate(outs2):
        A2c[:, common[d]] = A2[:, j]
    joint = Ac.T @ (fam.prior[:, None] * A2c)
    kl = _mi_bits(joint)
    mi_d = _mi_bits(fam.prior[:, None] * Ac)
    mi_dp = _mi_bits(fam.prior[:, None] * A2c)
    if critic is None:
        pd = joint.sum(axis=1)
        pdp = joint.sum(axis=0)
        # nan entries pair outcomes a branch never produces; they are never sampled
        with np.errstate(divide="ignore", invalid="ignore"):
            critic = np.log(joint) - np.log(np.outer(pd, pdp))
            # the modified loss also scores branch-d outcomes against each other
            critic_dd = np.log(Ac.T @ (fam.prior[:, None] * Ac)) - np.log(np.outer(pd, pd))
            critic_pp = np.log(A2c.T @ (fam.prior[:, None] * A2c)) - np.log(np.outer(pdp, pdp))
    else:
        critic_dd = critic_pp = critic
    rng = np.random.default_rng([seed, 0xC2])
    N = batch_pairs
    if N < 2:
        raise ValueError("need at least two systems per batch")
    per_batch = np.empty(samples)
    C = len(common)
    big = np.block([[critic_dd, critic], [critic.T, critic_pp]])
    cum = np.cumsum(Ac, axis=1)
    cum2 = np.cumsum(A2c, axis=1)
    for b in range(samples):
        fs = rng.choice(fam.n, size=N, p=fam.prior)
        d = [int(np.searchsorted(cum[f], rng.random() * cum[f, -1], side="right")) for f in fs]
        dp = [int(np.searchsorted(cum2[f], rng.random() * cum2[f, -1], side="right")) for f in fs]
        d = [min(v, len(common) - 1) for v in d]
        dp = [min(v, len(common) - 1) for v in dp]
        # rows: 2i from branch d, 2i+1 from branch d'
        idx = np.empty(2 * N, dtype=np.int64)
        idx[0::2] = d
        idx[1::2] = np.asarray(dp) + C
        S = big[np.ix_(idx, idx)]
        np.fill_diagonal(S, -np.inf)
        pos = S[np.arange(2 * N), np.arange(2 * N) ^ 1]
        m = S.max(axis=1)
        lse = m + np.log(np.exp(S - m[:, None]).sum(axis=1))
        per_batch[b] = np.mean(math.log(2 * N - 1) + pos - lse)
    est = float(per_batch.mean()) / math.log(2)
    boot = np.array([per_batch[rng.integers(0, samples, samples)].mean() for _ in range(bootstrap)])
    sigma = float(boot.std()) / math.log(2)
    return ChainReport(est, sigma, kl, mi_d, mi_dp, N, samples)


def random_chain_instance(rng: np.random.Generator, max_n: int = 6, max_g: int = 4,
                          alphabets=(2, 3)) -> tuple[DiscreteFamily, Policy]:
    fam = random_family(rng, max_n, max_g, alphabets)
    probs = rng.dirichlet(np.ones(fam.g))
    k = int(rng.integers(1, 3))
    return fam, Policy(probs, k)


# ---------------------------------------------------------------------------
# bridging continuous responses to finite alphabets


def quantize(y, buckets: int = 8, scale: float = 1.0) -> np.ndarray:
    """Sign/magnitude buckets: half the symbols per sign, log-spaced magnitudes."""
    if buckets < 2 or buckets % 2:
        raise ValueError("bucket count must be an even number >= 2")
    y = np.asarray(y, dtype=np.float64)
    half = buckets // 2
    mag = np.floor(np.log2(1.0 + np.abs(y) / scale)).astype(np.int64)
    mag = np.clip(mag, 0, half - 1)
    return np.where(y < 0, half - 1 - mag, half + mag)


# ---------------------------------------------------------------------------
# family files


def write_family(path, fam: DiscreteFamily):
    lines = [FAMILY_HEADER, f"alphabet {fam.alphabet}",
             "grid " + " ".join(repr(v) for v in fam.grid),
             "prior " + " ".join(repr(float(p)) for p in fam.prior)]
    lines += ["f " + " ".join(str(int(v)) for v in row) for row in fam.table]
    Path(path).write_text("\n".join(lines) + "\n")


def read_family(path) -> DiscreteFamily:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != FAMILY_HEADER:
        raise FamilyError(f"{path}: expected header {FAMILY_HEADER!r}")
    alphabet, grid, prior, rows = None, None, None, []
    for no, line in enumerate(text[1:], 2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        vals = rest.split()
        try:
            if key == "alphabet":
                alphabet = int(rest)
            elif key == "grid":
                grid = [float(v) for v in vals]
            elif key == "prior":
                prior = [float(v) for v in vals]
            elif key == "f":
                rows.append([int(v) for v in vals])
            else:
                raise FamilyError(f"{path}:{no}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, FamilyError):
                raise
            raise FamilyError(f"{path}:{no}: {exc}") from None
    if not rows:
        raise FamilyError(f"{path}: no functions")
    if len({len(r) for r in rows}) != 1:
        raise FamilyError(f"{path}: ragged table")
    return DiscreteFamily(np.array(rows), prior, alphabet, grid)


# ---------------------------------------------------------------------------
# reports


@dataclass
class TheoryReport:
    rows: list = field(default_factory=list)

    def add(self, check: str, instance: str, lhs: float, rhs: float, slack: float, ok: bool, note=""):
        self.rows.append({"check": check, "instance": instance, "lhs": lhs, "rhs": rhs,
                          "slack": slack, "ok": bool(ok), "note": note})

    @property
    def failures(self):
        return [r for r in self.rows if not r["ok"]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["check", "instance", "lhs", "rhs", "slack", "ok", "note"])
        for r in self.rows:
            w.writerow([r["check"], r["instance"], f"{r['lhs']:.10g}", f"{r['rhs']:.10g}",
                        f"{r['slack']:.10g}", int(r["ok"]), r["note"]])
        return buf.getvalue()

    def summary(self) -> str:
        out = []
        for name in dict.fromkeys(r["check"] for r in self.rows):
            rs = [r for r in self.rows if r["check"] == name]
            bad = sum(not r["ok"] for r in rs)
            min_slack = min(r["slack"] for r in rs)
            out.append(f"{name}: {len(rs) - bad}/{len(rs)} hold (min slack {min_slack:.4g})")
        return "\n".join(out)


def run_theory(families: list, chain_instances: int = 20, seed: int = 0,
               chain_samples: int = 4000, set_k: int = 2) -> TheoryReport:
    """Huffman sweep, greedy-vs-optimal, max-MI sets and Claim-2 chains."""
    rep = TheoryReport()
    for i, (name, fam) in enumerate(families):
        opt = optimal_tree(fam)
        greedy = greedy_max_mi_tree(fam)
        h = check_huffman_bound(fam, opt)
        rep.add("huffman_lower", name, h.lower, h.average_path, h.average_path - h.lower,
                h.holds_lower, f"c=1/log2({fam.alphabet})")
        rep.add("huffman_upper", name, h.average_path, h.upper, h.upper - h.average_path,
                h.holds_upper, f"c=1/log2({fam.alphabet})")
        lg, lo = greedy.average_path(), opt.average_path()
        rep.add("optimal_le_greedy", name, lo, lg, lg - lo, lo <= lg + 1e-9)
        if fam.g >= set_k and math.comb(fam.g, set_k) <= 70:
            s = check_max_mi_sets(fam, set_k)
            rep.add("max_mi_set_residual", name, s.argmax_residual, s.best_residual + 1,
                    1 - s.slack, s.holds, f"k={set_k} set={list(s.argmax_set)}")
    rng = np.random.default_rng([seed, 0xC1A2])
    for j in range(chain_instances):
        fam, pol = random_chain_instance(rng)
        r = check_claim2_chain(fam, pol, samples=chain_samples, seed=seed + j)
        name = f"chain{j}(n={fam.n},g={fam.g},k={pol.k})"
        rep.add("chain_nce_le_kl", name, r.nce_bound, r.kl_term,
                r.kl_term - r.nce_bound + 3 * r.nce_sigma, r.holds_left,
                f"sigma={r.nce_sigma:.3g}")
        rep.add("chain_kl_le_mi", name, r.kl_term, r.upper, r.upper - r.kl_term, r.holds_right)
    return rep
