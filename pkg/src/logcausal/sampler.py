"""Hamiltonian Monte Carlo with step-size and metric adaptation.

Chains are advanced together as one batch: a target evaluates its log
density and gradient on an array of shape ``(n_chains, dim)``.  Each
chain keeps its own step size, diagonal metric, trajectory length and
random stream, so results depend only on the seed and the chain count.

Trajectories are fixed-length leapfrog runs whose step count is drawn
uniformly from ``1..L`` each iteration; ``L`` is set during warmup from
the adapted step size.  This is a simpler engine than NUTS and can be
swapped out behind :func:`hmc_sample`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy import special, stats

LogpGrad = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]

_MAX_ENERGY_ERROR = 1000.0


class SamplerError(RuntimeError):
    pass


@dataclass
class TargetDensity:
    """A differentiable log density on an unconstrained space.

    ``logp_grad`` maps a batch ``theta`` of shape ``(k, dim)`` to the log
    densities ``(k,)`` and gradients ``(k, dim)``; Jacobian terms of any
    constraining transforms must already be included.  ``constrain`` maps
    the same batch to a dict of named constrained arrays, each with
    leading dimension ``k``.  Targets hold read-only data and must be safe
    to call concurrently.
    """

    dim: int
    logp_grad: LogpGrad
    names: Optional[list[str]] = None
    constrain: Optional[Callable[[np.ndarray], dict[str, np.ndarray]]] = None

    def log_density(self, theta: np.ndarray) -> float:
        lp, _ = self.logp_grad(np.atleast_2d(np.asarray(theta, dtype=float)))
        return float(lp[0])

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        _, g = self.logp_grad(np.atleast_2d(np.asarray(theta, dtype=float)))
        return g[0]

    def constrained(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        theta = np.atleast_2d(theta)
        if self.constrain is not None:
            return self.constrain(theta)
        names = self.names or [f"theta[{j}]" for j in range(self.dim)]
        return {"theta": theta} if self.names is None else {n: theta[:, j] for j, n in enumerate(names)}

    @classmethod
    def from_callable(cls, fn: Callable[[np.ndarray], tuple[float, np.ndarray]], dim: int, **kw) -> "TargetDensity":
        """Wrap a single-point ``theta -> (logp, grad)`` function."""

        def batched(theta):
            out = [fn(t) for t in theta]
            return np.array([o[0] for o in out], dtype=float), np.array([o[1] for o in out], dtype=float)

        return cls(dim=dim, logp_grad=batched, **kw)


@dataclass
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    iters: int = 1000
    seed: int = 0
    max_treedepth: int = 10
    target_accept: float = 0.8
    integration_time: float = math.pi
    init_radius: float = 2.0
    # cap on leapfrog steps during warmup (2**depth); None uses max_treedepth
    warmup_max_treedepth: Optional[int] = None

    def __post_init__(self):
        if self.warmup < 100:
            raise ValueError(f"warmup must be >= 100, got {self.warmup}")
        if self.chains < 1 or self.iters < 1:
            raise ValueError("chains and iters must be positive")


@dataclass
class PosteriorDraws:
    """Constrained draws laid out as ``(chains, iters, n_columns)``."""

    samples: np.ndarray
    columns: list[str]
    shapes: dict[str, tuple[int, ...]]
    divergences: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    step_size: np.ndarray = field(default_factory=lambda: np.zeros(0))
    inv_metric: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    n_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    accept_stat: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def n_chains(self) -> int:
        return self.samples.shape[0]

    @property
    def n_iters(self) -> int:
        return self.samples.shape[1]

    def _slice(self, name):
        start = 0
        for n, shp in self.shapes.items():
            size = int(np.prod(shp)) if shp else 1
            if n == name:
                return start, size, shp
            start += size
        raise KeyError(name)

    def __getitem__(self, name: str) -> np.ndarray:
        start, size, shp = self._slice(name)
        block = self.samples[:, :, start:start + size]
        return block.reshape(self.n_chains, self.n_iters, *shp)

    def __contains__(self, name) -> bool:
        return name in self.shapes

    def flat(self, name: str) -> np.ndarray:
        """Draws of ``name`` with chains pooled: ``(chains * iters, *shape)``."""
        x = self[name]
        return x.reshape(-1, *x.shape[2:])

    @property
    def divergence_rate(self) -> float:
        total = self.n_chains * self.n_iters
        return float(self.divergences.sum()) / total if total else 0.0

    def summary(self, names: Optional[list[str]] = None) -> pd.DataFrame:
        names = names or list(self.shapes)
        rows = []
        for n in names:
            x = self[n].reshape(self.n_chains, self.n_iters, -1)
            r = rhat(x)
            e = ess(x)
            labels = [n] if self.shapes[n] == () else [f"{n}[{j}]" for j in range(x.shape[2])]
            for j, lab in enumerate(labels):
                v = x[:, :, j].ravel()
                rows.append({
                    "parameter": lab,
                    "mean": v.mean(),
                    "sd": v.std(ddof=1),
                    "q05": np.quantile(v, 0.05),
                    "q95": np.quantile(v, 0.95),
                    "rhat": None if np.ma.is_masked(r[j]) else float(r[j]),
                    "ess_bulk": None if np.ma.is_masked(e[j]) else float(e[j]),
                })
        return pd.DataFrame(rows)

    def to_csv(self, path) -> None:
        c, n, p = self.samples.shape
        df = pd.DataFrame(self.samples.reshape(c * n, p), columns=self.columns)
        df.insert(0, "iter", np.tile(np.arange(n), c))
        df.insert(0, "chain", np.repeat(np.arange(c), n))
        df.to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path) -> "PosteriorDraws":
        df = pd.read_csv(path, float_precision="round_trip")
        chains = df["chain"].to_numpy()
        n_chains = int(chains.max()) + 1
        n_iters = int(df["iter"].max()) + 1
        columns = [c for c in df.columns if c not in ("chain", "iter")]
        df = df.sort_values(["chain", "iter"])
        samples = df[columns].to_numpy(dtype=float).reshape(n_chains, n_iters, len(columns))
        return cls(samples=samples, columns=columns, shapes=_shapes_from_columns(columns))


_VEC = re.compile(r"^(.*)\[(\d+)\]$")


def _shapes_from_columns(columns):
    shapes: dict[str, tuple[int, ...]] = {}
    for col in columns:
        m = _VEC.match(col)
        if m:
            name, idx = m.group(1), int(m.group(2))
            shapes[name] = (max(shapes.get(name, (0,))[0], idx + 1),)
        else:
            shapes[col] = ()
    return shapes


def _flatten_constrained(blocks: dict[str, np.ndarray], k: int):
    columns, shapes, parts = [], {}, []
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=float).reshape(k, -1) if np.ndim(arr) > 1 else np.asarray(arr, dtype=float).reshape(k, 1)
        shp = tuple(np.shape(blocks[name])[1:])
        shapes[name] = shp
        if shp == ():
            columns.append(name)
        else:
            columns.extend(f"{name}[{j}]" for j in range(arr.shape[1]))
        parts.append(arr)
    return np.concatenate(parts, axis=1), columns, shapes


class _DualAveraging:
    """Vectorised dual averaging of log step size, one slot per chain."""

    def __init__(self, eps0: np.ndarray, target: float):
        self.target = target
        self.gamma, self.t0, self.kappa = 0.05, 10.0, 0.75
        self.restart(eps0)

    def restart(self, eps0):
        self.mu = np.log(10.0 * eps0)
        self.h_bar = np.zeros_like(eps0)
        self.log_eps_bar = np.zeros_like(eps0)
        self.m = 0

    def update(self, accept: np.ndarray) -> np.ndarray:
        self.m += 1
        eta = 1.0 / (self.m + self.t0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept)
        log_eps = self.mu - math.sqrt(self.m) / self.gamma * self.h_bar
        w = self.m ** (-self.kappa)
        self.log_eps_bar = w * log_eps + (1 - w) * self.log_eps_bar
        return np.exp(log_eps)

    def final(self) -> np.ndarray:
        return np.exp(self.log_eps_bar)


def _warmup_windows(warmup: int) -> list[int]:
    # Iterations (exclusive end) at which the metric is re-estimated.
    init, term, base = 75, 50, 25
    if init + term + base > warmup:
        init, term = int(0.15 * warmup), int(0.1 * warmup)
        base = warmup - init - term
    ends, start, size = [], init, base
    slow_end = warmup - term
    while start < slow_end:
        end = start + size
        if end + 2 * size > slow_end:
            end = slow_end
        ends.append(end)
        start, size = end, 2 * size
    return ends


def _leapfrog(target, q, p, lp, g, eps, inv_metric, n_steps):
    """Run ``n_steps[c]`` leapfrog steps for chain ``c`` (batched with masks)."""
    k = q.shape[0]
    q, p, lp, g = q.copy(), p.copy(), lp.copy(), g.copy()
    e = eps[:, None]
    p = p + 0.5 * e * g
    alive = np.ones(k, dtype=bool)
    for s in range(int(n_steps.max())):
        act = (s < n_steps) & alive
        if not act.any():
            break
        a = act[:, None]
        q = np.where(a, q + e * inv_metric * p, q)
        # evaluate only the chains still integrating
        lp_new, g_new = lp.copy(), g.copy()
        with np.errstate(all="ignore"):
            lp_new[act], g_new[act] = target.logp_grad(q[act])
        bad = act & ~(np.isfinite(lp_new) & np.all(np.isfinite(g_new), axis=1))
        alive &= ~bad
        act &= ~bad
        a = act[:, None]
        lp = np.where(act, lp_new, lp)
        g = np.where(a, g_new, g)
        last = (s == n_steps - 1)[:, None]
        p = np.where(a & ~last, p + e * g, p)
        p = np.where(a & last, p + 0.5 * e * g, p)
    return q, p, lp, g, alive


def _init_points(target, rngs, radius, init=None):
    k = len(rngs)
    q = np.empty((k, target.dim))
    centre = np.zeros((k, target.dim)) if init is None else np.broadcast_to(np.asarray(init, float), (k, target.dim))
    for c, rng in enumerate(rngs):
        for _ in range(100):
            q[c] = centre[c] + rng.uniform(-radius, radius, size=target.dim)
            with np.errstate(all="ignore"):
                lp, g = target.logp_grad(q[c:c + 1])
            if np.isfinite(lp[0]) and np.all(np.isfinite(g)):
                break
        else:
            raise SamplerError("non-finite log density at initialisation after 100 attempts")
    lp, g = target.logp_grad(q)
    return q, lp, g


def _reasonable_eps(target, q, lp, g, inv_metric, rngs):
    k = q.shape[0]
    eps = np.ones(k)
    for c in range(k):
        rng = rngs[c]
        e = 1.0
        p = rng.normal(size=target.dim) / np.sqrt(inv_metric[c])
        h0 = -lp[c] + 0.5 * np.sum(inv_metric[c] * p * p)

        def log_accept(step):
            qq, pp, ll, _, ok = _leapfrog(target, q[c:c + 1], p[None], lp[c:c + 1], g[c:c + 1],
                                          np.array([step]), inv_metric[c:c + 1], np.array([1]))
            if not ok[0]:
                return -np.inf
            with np.errstate(over="ignore", invalid="ignore"):
                out = h0 - (-ll[0] + 0.5 * np.sum(inv_metric[c] * pp[0] ** 2))
            return out if np.isfinite(out) else -np.inf

        la = log_accept(e)
        direction = 1 if la > math.log(0.5) else -1
        for _ in range(50):
            e_new = e * (2.0 ** direction)
            la = log_accept(e_new)
            if (direction == 1 and not la > math.log(0.5)) or (direction == -1 and la > math.log(0.5)):
                if direction == -1:
                    e = e_new
                break
            e = e_new
        eps[c] = e
    return eps


def hmc_sample(target: TargetDensity, config: Optional[SamplerConfig] = None, init=None) -> PosteriorDraws:
    """Draw from ``target`` with jittered-length HMC.

    Warmup follows the usual three-phase schedule: a fast step-size
    phase, doubling slow windows that re-estimate a diagonal metric from
    the window's draws, then a final step-size phase.  Step size is tuned
    by dual averaging towards ``config.target_accept``.

    Args:
        target: Density on the unconstrained space.
        config: Chain counts, lengths, seed and tuning targets.
        init: Optional unconstrained starting point, shape ``(dim,)`` or
            ``(chains, dim)``; chains start at uniform jitter of half-width
            ``config.init_radius`` around it (around 0 when omitted).

    Returns:
        PosteriorDraws holding the kept draws back-transformed to the
        constrained space.
    """
    cfg = config or SamplerConfig()
    if target.dim < 1:
        raise ValueError("target dimension must be >= 1")
    k, d = cfg.chains, target.dim
    seeds = np.random.SeedSequence(cfg.seed).spawn(k + 1)
    rngs = [np.random.default_rng(s) for s in seeds[:k]]
    # one jitter fraction per iteration shared by all chains, so batched
    # trajectories have similar lengths; it is independent of every state
    jitter = np.random.default_rng(seeds[k])
    max_steps = 2 ** cfg.max_treedepth
    warm_steps = 2 ** min(cfg.max_treedepth, cfg.warmup_max_treedepth or cfg.max_treedepth)

    q, lp, g = _init_points(target, rngs, cfg.init_radius, init)
    inv_metric = np.ones((k, d))
    eps = _reasonable_eps(target, q, lp, g, inv_metric, rngs)
    da = _DualAveraging(eps, cfg.target_accept)
    windows = _warmup_windows(cfg.warmup)
    slow_start = 75 if 75 + 50 + 25 <= cfg.warmup else int(0.15 * cfg.warmup)
    window_buf: list[np.ndarray] = []

    total = cfg.warmup + cfg.iters
    kept = np.empty((k, cfg.iters, d))
    accept_kept = np.empty((k, cfg.iters))
    divergences = np.zeros(k, dtype=int)

    def n_max(e, cap=max_steps):
        return np.clip(np.ceil(cfg.integration_time / e), 1, cap).astype(int)

    for it in range(total):
        warm = it < cfg.warmup
        L = n_max(eps, warm_steps if warm else max_steps)
        n_steps = np.maximum(np.ceil((1.0 - jitter.uniform()) * L), 1).astype(int)
        p0 = np.stack([rng.normal(size=d) for rng in rngs]) / np.sqrt(inv_metric)
        h0 = -lp + 0.5 * np.sum(inv_metric * p0 * p0, axis=1)
        q1, p1, lp1, g1, alive = _leapfrog(target, q, p0, lp, g, eps, inv_metric, n_steps)
        with np.errstate(invalid="ignore", over="ignore"):
            h1 = -lp1 + 0.5 * np.sum(inv_metric * p1 * p1, axis=1)
            log_alpha = np.where(alive & np.isfinite(h1), h0 - h1, -np.inf)
        divergent = ~alive | (-log_alpha > _MAX_ENERGY_ERROR)
        log_alpha = np.where(divergent, -np.inf, log_alpha)
        accept_stat = np.exp(np.minimum(log_alpha, 0.0))
        u = np.array([rng.uniform() for rng in rngs])
        acc = np.log(u) < log_alpha
        q = np.where(acc[:, None], q1, q)
        lp = np.where(acc, lp1, lp)
        g = np.where(acc[:, None], g1, g)

        if warm:
            eps = da.update(accept_stat)
            if it >= slow_start and windows and it < windows[-1]:
                window_buf.append(q.copy())
            if windows and it + 1 == windows[0]:
                windows.pop(0)
                w = np.stack(window_buf, axis=1)  # (k, n, d)
                n = w.shape[1]
                var = w.var(axis=1, ddof=1) if n > 1 else np.ones((k, d))
                inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                window_buf = []
                eps = _reasonable_eps(target, q, lp, g, inv_metric, rngs)
                da.restart(eps)
            if it + 1 == cfg.warmup:
                eps = da.final()
        else:
            j = it - cfg.warmup
            kept[:, j] = q
            accept_kept[:, j] = accept_stat
            divergences += divergent

    blocks = target.constrained(kept.reshape(k * cfg.iters, d))
    flat, columns, shapes = _flatten_constrained(blocks, k * cfg.iters)
    return PosteriorDraws(
        samples=flat.reshape(k, cfg.iters, -1),
        columns=columns,
        shapes=shapes,
        divergences=divergences,
        step_size=eps.copy(),
        inv_metric=inv_metric.copy(),
        n_steps=n_max(eps),
        accept_stat=accept_kept,
    )


# ---------------------------------------------------------------------------
# diagnostics


def _as_cip(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError("draws must have shape (chains, iters) or (chains, iters, params)")
    return x


def _split(x):
    n = x.shape[1] // 2
    return np.concatenate([x[:, :n], x[:, x.shape[1] - n:]], axis=0)


def _check_dims(x):
    if x.shape[0] < 2:
        raise ValueError("at least 2 chains are required")
    if x.shape[1] < 100:
        raise ValueError("at least 100 post-warmup iterations are required")


def _constant(x):
    return np.ptp(x.reshape(-1, x.shape[2]), axis=0) == 0


def rhat(draws) -> np.ma.MaskedArray:
    """Split-R-hat per parameter.

    Constant parameters are masked (not applicable) instead of returned
    as NaN.
    """
    x = _as_cip(draws)
    _check_dims(x)
    s = _split(x)
    n = s.shape[1]
    const = _constant(x)
    means = s.mean(axis=1)
    w = s.var(axis=1, ddof=1).mean(axis=0)
    b = n * means.var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        var_plus = (n - 1) / n * w + b / n
        r = np.sqrt(var_plus / w)
    return np.ma.masked_array(np.where(const, 0.0, r), mask=const)


def _autocov(x):
    n = x.shape[-1]
    m = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, n=m)
    ac = np.fft.irfft(f * np.conj(f), n=m)[..., :n]
    return ac / n


def _ess_1d(chains: np.ndarray) -> float:
    m, n = chains.shape
    acov = _autocov(chains)
    chain_mean = chains.mean(axis=1)
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    var_plus = w * (n - 1) / n + (chain_mean.var(ddof=1) if m > 1 else 0.0)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer initial monotone sequence on paired autocorrelations.
    t = 0
    pair_sums = []
    while t + 1 < n:
        s = rho[t] + rho[t + 1]
        if s < 0:
            break
        pair_sums.append(s)
        t += 2
    pair_sums = np.minimum.accumulate(np.array(pair_sums)) if pair_sums else np.array([1.0])
    tau = -1.0 + 2.0 * pair_sums.sum()
    tau = max(tau, 1.0 / math.log10(m * n))
    return m * n / tau


def ess(draws) -> np.ma.MaskedArray:
    """Bulk effective sample size (rank-normalised, split chains)."""
    x = _as_cip(draws)
    _check_dims(x)
    const = _constant(x)
    s = _split(x)
    out = np.zeros(x.shape[2])
    for j in range(x.shape[2]):
        if const[j]:
            continue
        v = s[:, :, j]
        r = stats.rankdata(v.ravel(), method="average").reshape(v.shape)
        z = special.ndtri((r - 0.375) / (v.size + 0.25))
        out[j] = _ess_1d(z)
    return np.ma.masked_array(out, mask=const)


def hdi(draws_1d, mass: float = 0.95) -> tuple[float, float]:
    """Shortest interval containing ``mass`` of the draws."""
    if not 0 < mass < 1:
        raise ValueError(f"mass must lie in (0, 1), got {mass}")
    x = np.sort(np.asarray(draws_1d, dtype=float).ravel())
    n = x.size
    if n < 100:
        raise ValueError("at least 100 draws are required")
    m = int(math.ceil(mass * n))
    widths = x[m - 1:] - x[: n - m + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m - 1])


def diagnostics_ok(draws: PosteriorDraws, names: list[str], rhat_max: float = 1.01) -> tuple[bool, dict]:
    """Check split-R-hat for the named parameters.

    Returns the verdict and the worst value per name (masked entries are
    skipped, never counted as failures).
    """
    worst = {}
    for n in names:
        x = draws[n].reshape(draws.n_chains, draws.n_iters, -1)
        r = rhat(x)
        worst[n] = None if r.count() == 0 else float(r.max())
    ok = all(v is None or v < rhat_max for v in worst.values())
    return ok, worst
