"""The query network and the query loop run against a physical system."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import latent
from .autodiff import Tensor
from .expr import Expr, Const, Var, Placeholder, Unary, Binary, DomainError, compile_expr, parse
from . import kernels

STRATEGIES = ("qbd", "qbs", "qbp")

# substitution codes stored with every queried point
ORIGINAL, RESAMPLED, UNIFORM_FALLBACK = 0, 1, 2


@dataclass
class ModelConfig:
    arity: int = 1
    latent_dim: int = 256
    hidden: int = 256
    depth: int = 2
    activation: str = "relu"
    strategy: str = "qbd"
    intersection: str = "attention"
    similarity: str = "kl"
    m: int = 3
    box: tuple = (-3.0, 3.0)

    def validate(self) -> list[str]:
        errs = []
        if self.arity < 1:
            errs.append("arity must be >= 1")
        if self.latent_dim < 1 or self.hidden < 1 or self.depth < 0:
            errs.append("latent_dim/hidden must be positive and depth >= 0")
        if self.activation not in ad.ACTIVATIONS:
            errs.append(f"activation must be one of {sorted(ad.ACTIVATIONS)}")
        if self.strategy not in STRATEGIES:
            errs.append(f"strategy must be one of {STRATEGIES}")
        if self.intersection not in latent.INTERSECTIONS:
            errs.append(f"intersection must be one of {latent.INTERSECTIONS}")
        if self.similarity not in latent.SIMILARITIES:
            errs.append(f"similarity must be one of {latent.SIMILARITIES}")
        if self.m < 1:
            errs.append("m must be >= 1")
        lo, hi = self.box
        if not lo < hi:
            errs.append("box must satisfy low < high")
        return errs

    @property
    def points_per_step(self) -> int:
        return 1 if self.strategy == "qbp" else self.m


@dataclass
class QueryConfig:
    K: int = 9
    m: int = 3
    box: tuple = (-3.0, 3.0)
    retries: int = 8

    def validate(self) -> list[str]:
        errs = []
        if self.K < 0:
            errs.append("K must be >= 0")
        if self.m < 1:
            errs.append("m must be >= 1")
        if not self.box[0] < self.box[1]:
            errs.append("box must satisfy low < high")
        if self.retries < 0:
            errs.append("retries must be >= 0")
        return errs


class QueryNet:
    """Encoder/decoder networks sharing one latent dimension."""

    NETS = ("data", "attention", "query", "inversion", "qbs", "qbp")

    def __init__(self, cfg: ModelConfig, nets: dict):
        self.cfg = cfg
        self.nets = nets

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, init: str = "glorot") -> "QueryNet":
        errs = cfg.validate()
        if errs:
            raise ValueError("; ".join(errs))
        rng = np.random.default_rng([seed, 0xA11])
        d, h, M = cfg.latent_dim, cfg.hidden, cfg.arity
        hid = [h] * cfg.depth

        def mlp(n_in, n_out, out_scale=1.0):
            return ad.Mlp.build([n_in, *hid, n_out], rng, cfg.activation, init=init, out_scale=out_scale)

        nets = {
            "data": mlp(M + 1, 2 * d),
            "attention": mlp(2 * d, 1),
            "query": mlp(2 * d, 2 * d),
            "inversion": mlp(d, M),
        }
        if cfg.strategy == "qbs":
            nets["qbs"] = mlp(2 * d, cfg.m * M)
        if cfg.strategy == "qbp":
            nets["qbp"] = mlp(2 * d, M)
        return cls(cfg, nets)

    # -- parameters --------------------------------------------------------

    def named_parameters(self):
        for name in self.NETS:
            if name in self.nets:
                yield from self.nets[name].named_parameters(f"{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> dict:
        return {n: p.data for n, p in self.named_parameters()}

    def spec(self) -> dict:
        return {"config": _config_dict(self.cfg), "nets": {k: v.spec() for k, v in self.nets.items()}}

    @classmethod
    def from_state(cls, spec: dict, arrays: dict) -> "QueryNet":
        c = dict(spec["config"])
        c["box"] = tuple(c["box"])
        cfg = ModelConfig(**c)
        nets = {}
        for name, nspec in spec["nets"].items():
            n_layers = len(nspec["activations"])
            arrs = []
            for i in range(n_layers):
                arrs += [arrays[f"{name}.{i}.W"], arrays[f"{name}.{i}.b"]]
            nets[name] = ad.Mlp.from_arrays(nspec, arrs)
        return cls(cfg, nets)

    def save(self, path, meta=None):
        ad.save_arrays(path, self.state(), {"model": self.spec(), **(meta or {})})

    @classmethod
    def load(cls, path) -> tuple["QueryNet", dict]:
        arrays, meta = ad.load_arrays(path)
        net = cls.from_state(meta["model"], arrays)
        return net, meta

    # -- encoder / decoder ---------------------------------------------------

    def encode(self, X, Y, group: int) -> tuple[Tensor, Tensor]:
        """Embed consecutive groups of ``group`` points into one Gaussian each."""
        X = ad.as_tensor(X)
        if X.shape[0] == 0:
            raise ValueError("cannot encode an empty dataset")
        mu, lv = latent.embed_points(self.nets["data"], X, Y)
        return latent.intersect(mu, lv, group, self.cfg.intersection, self.nets.get("attention"))

    def _box(self, raw: Tensor, box=None) -> Tensor:
        lo, hi = box if box is not None else self.cfg.box
        c, h = 0.5 * (lo + hi), 0.5 * (hi - lo)
        lim = 1.0 - 1e-12
        return c + h * ad.clip(ad.tanh(raw), -lim, lim)

    def query_distribution(self, mu, lv) -> tuple[Tensor, Tensor]:
        q = self.nets["query"](ad.concat_cols([mu, lv]))
        return latent.split(q, self.cfg.latent_dim)

    def decode_qbd(self, mu, lv, m, rng, box=None) -> Tensor:
        mu_q, lv_q = self.query_distribution(mu, lv)
        v = latent.sample(mu_q, lv_q, m, rng)
        return self._box(self.nets["inversion"](v), box)

    def decode_qbs(self, mu, lv, m=None, box=None) -> Tensor:
        if m is not None and m != self.cfg.m:
            raise ValueError(f"query-by-set head emits {self.cfg.m} points, {m} requested")
        out = self.nets["qbs"](ad.concat_cols([mu, lv]))
        return self._box(ad.reshape(out, (out.shape[0] * self.cfg.m, self.cfg.arity)), box)

    def decode_qbp(self, mu, lv, box=None) -> Tensor:
        return self._box(self.nets["qbp"](ad.concat_cols([mu, lv])), box)

    def decode(self, mu, lv, rng, m=None, box=None) -> Tensor:
        """Next queries for each embedding row.

        Query-by-distribution draws ``m`` points (default ``cfg.m``); the
        query-by-set head always emits ``cfg.m`` and query-by-point one.
        """
        s = self.cfg.strategy
        if s == "qbd":
            return self.decode_qbd(mu, lv, m or self.cfg.m, rng, box)
        if s == "qbs":
            return self.decode_qbs(mu, lv, box=box)
        return self.decode_qbp(mu, lv, box)


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    if "box" in d:
        d["box"] = list(d["box"])
    return d


# ---------------------------------------------------------------------------
# physical systems


class ExprSystem:
    """A physical system backed by an expression; evaluation uses the kernels."""

    def __init__(self, expr: Expr, arity: int = 1):
        self.expr = expr
        self.program = compile_expr(expr, arity)

    def __call__(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return kernels.eval_program(self.program, X)


class CallableSystem:
    """Wraps ``f(x) -> float`` that signals failures via DomainError or non-finite output."""

    def __init__(self, fn: Callable):
        self.fn = fn

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.full(len(X), np.nan)
        ok = np.zeros(len(X), dtype=bool)
        for i, row in enumerate(X):
            try:
                v = float(self.fn(row))
            except (DomainError, ArithmeticError, ValueError):
                continue
            if np.isfinite(v):
                y[i], ok[i] = v, True
        return y, ok


def as_system(f, arity: int = 1):
    if isinstance(f, (ExprSystem, CallableSystem)):
        return f
    if isinstance(f, str):
        return ExprSystem(parse(f, arity), arity)
    if isinstance(f, (Const, Var, Placeholder, Unary, Binary)):
        return ExprSystem(f, arity)
    if callable(f):
        return CallableSystem(f)
    raise TypeError(f"cannot treat {type(f).__name__} as a system")


# ---------------------------------------------------------------------------
# datasets and the query loop


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    step: np.ndarray
    substituted: np.ndarray
    latent_log_var: list = field(default_factory=list)

    def __len__(self):
        return len(self.y)

    def prefix(self, n: int) -> "Dataset":
        return Dataset(self.x[:n], self.y[:n], self.step[:n], self.substituted[:n])

    def upto_step(self, k: int) -> "Dataset":
        return self.prefix(int(np.sum(self.step <= k)))

    @classmethod
    def empty(cls, arity: int) -> "Dataset":
        return cls(np.zeros((0, arity)), np.zeros(0), np.zeros(0, dtype=int), np.zeros(0, dtype=int))

    def append(self, x, y, step, sub) -> None:
        self.x = np.vstack([self.x, np.atleast_2d(x)])
        self.y = np.append(self.y, y)
        self.step = np.append(self.step, step).astype(int)
        self.substituted = np.append(self.substituted, sub).astype(int)


class QueryFailure(RuntimeError):
    pass


def _uniform_point(system, box, arity, rng, max_draws=1000):
    lo, hi = box
    for _ in range(max_draws):
        x = rng.uniform(lo, hi, size=(1, arity))
        y, ok = system(x)
        if ok[0]:
            return x[0], y[0]
    raise QueryFailure(f"no defined point found in {max_draws} uniform draws")


def initial_points(system, n, box, arity, rng) -> tuple[np.ndarray, np.ndarray]:
    """``n`` uniform points from the box at which the system is defined."""
    pts = [_uniform_point(system, box, arity, rng) for _ in range(n)]
    return np.array([p[0] for p in pts]).reshape(n, arity), np.array([p[1] for p in pts])


def run_query_loop(net: QueryNet, f, cfg: QueryConfig | None = None, seed: int = 0) -> Dataset:
    """Start from ``m`` uniform points, then run ``K`` encode/decode/query rounds.

    A queried point where ``f`` is undefined is re-drawn from the decoder up to
    ``cfg.retries`` times, then replaced by a uniform draw; the dataset's
    ``substituted`` column records which happened.
    """
    cfg = cfg or QueryConfig()
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    M = net.cfg.arity
    system = as_system(f, M)
    rng = np.random.default_rng([seed, 0x0E7])
    box = cfg.box
    ds = Dataset.empty(M)
    x0, y0 = initial_points(system, cfg.m, box, M, rng)
    ds.append(x0, y0, np.zeros(cfg.m, dtype=int), np.zeros(cfg.m, dtype=int))
    for k in range(1, cfg.K + 1):
        mu, lv = net.encode(ds.x, ds.y, len(ds))
        ds.latent_log_var.append(float(lv.data.mean()))
        X = net.decode(mu, lv, rng, cfg.m, box).data
        y, ok = system(X)
        sub = np.zeros(len(X), dtype=int)
        for i in np.flatnonzero(~ok):
            placed = False
            if net.cfg.strategy == "qbd":
                for _ in range(cfg.retries):
                    xr = net.decode(mu, lv, rng, cfg.m, box).data[i:i + 1]
                    yr, okr = system(xr)
                    if okr[0]:
                        X[i], y[i], sub[i], placed = xr[0], yr[0], RESAMPLED, True
                        break
            if not placed:
                X[i], y[i] = _uniform_point(system, box, M, rng)
                sub[i] = UNIFORM_FALLBACK
        ds.append(X, y, np.full(len(X), k), sub)
    return ds


def sample_baseline(f, method: str, n: int, box=(-3.0, 3.0), arity: int = 1,
                    seed: int = 0, per_step: int = 3) -> Dataset:
    """Non-adaptive fit points: ``uniform`` over the box or ``normal`` N(0, 1) truncated to it."""
    system = as_system(f, arity)
    rng = np.random.default_rng([seed, 0xBA5E])
    lo, hi = box
    xs, ys = [], []
    draws = 0
    while len(xs) < n:
        draws += 1
        if draws > 1000 * max(n, 1):
            raise QueryFailure("could not find enough defined baseline points")
        if method == "uniform":
            x = rng.uniform(lo, hi, size=arity)
        elif method == "normal":
            x = rng.standard_normal(arity)
            if np.any(x <= lo) or np.any(x >= hi):
                continue
        else:
            raise ValueError(f"unknown baseline method {method!r}")
        y, ok = system(x[None, :])
        if ok[0]:
            xs.append(x)
            ys.append(y[0])
    steps = np.arange(n) // per_step
    return Dataset(np.array(xs).reshape(n, arity), np.array(ys), steps, np.zeros(n, dtype=int))


# ---------------------------------------------------------------------------
# dataset files

DATASET_HEADER = "# quosr-dataset v1"


def write_datasets(path, items, meta: dict | None = None) -> None:
    """Write ``(expr_id, Dataset)`` pairs as one tab-separated table."""
    items = list(items)
    arity = items[0][1].x.shape[1] if items else int((meta or {}).get("arity", 1))
    cols = ["expr_id", "step"] + [f"x{j}" for j in range(arity)] + ["y", "substituted"]
    lines = [DATASET_HEADER, "# meta " + json.dumps(meta or {}, sort_keys=True), "\t".join(cols)]
    for eid, ds in items:
        for i in range(len(ds)):
            row = [str(eid), str(int(ds.step[i]))] + [repr(float(v)) for v in ds.x[i]]
            row += [repr(float(ds.y[i])), str(int(ds.substituted[i]))]
            lines.append("\t".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_datasets(path) -> tuple[dict, dict]:
    """Return ``({expr_id: Dataset}, meta)``; rejects unknown versions."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != DATASET_HEADER:
        raise ValueError(f"{path}: expected header {DATASET_HEADER!r}")
    if len(lines) < 3 or not lines[1].startswith("# meta "):
        raise ValueError(f"{path}: missing meta line")
    meta = json.loads(lines[1][len("# meta "):])
    cols = lines[2].split("\t")
    arity = len(cols) - 4
    if arity < 1 or cols[:2] != ["expr_id", "step"] or cols[-2:] != ["y", "substituted"]:
        raise ValueError(f"{path}: bad column header")
    rows: dict = {}
    for no, line in enumerate(lines[3:], 4):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(cols):
            raise ValueError(f"{path}:{no}: expected {len(cols)} fields")
        rows.setdefault(int(parts[0]), []).append(parts[1:])
    out = {}
    for eid, rs in rows.items():
        a = np.array([[float(v) for v in r] for r in rs])
        out[eid] = Dataset(a[:, 1:1 + arity], a[:, 1 + arity], a[:, 0].astype(int),
                           a[:, -1].astype(int))
    return out, meta
