"""No-U-Turn sampler with multinomial trajectory sampling.

The sampler works on any target exposing ``dim`` and ``logp_and_grad(x)``. For a
:class:`~bsc.model.ModelContext` the starting point comes from
:func:`~bsc.model.initial_point`; other targets must provide ``initial_point(seed)``
or be given explicit starting values.

Warmup follows the usual windowed scheme: step-size-only buffers at both ends
and doubling windows in between, after each of which the diagonal inverse mass
matrix is re-estimated and dual averaging restarted.
"""

from __future__ import annotations

import concurrent.futures as cf
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "SamplerSettings",
    "Trace",
    "SamplerError",
    "leapfrog",
    "sample",
    "write_trace",
    "read_trace",
]

log = logging.getLogger(__name__)

TRACE_MAGIC = b"BSCTRACE"
TRACE_FORMAT_VERSION = 1


class SamplerError(RuntimeError):
    """Sampling could not start or warmup failed entirely."""


@dataclass(frozen=True)
class SamplerSettings:
    """NUTS run configuration; defaults reproduce the full-length protocol."""

    chains: int = 2
    tune: int = 5000
    draws: int = 25000
    target_accept: float = 0.9
    max_treedepth: int = 12
    seed: int = 20190401
    divergence_threshold: float = 1000.0
    init_jitter: float = 0.5
    engine: str = "auto"

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.draws < 1:
            raise ValueError("draws must be >= 1")
        if self.tune < 0:
            raise ValueError("tune must be >= 0")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_treedepth < 1:
            raise ValueError("max_treedepth must be >= 1")
        if self.engine not in ("auto", "python", "compiled"):
            raise ValueError("engine must be 'auto', 'python' or 'compiled'")

    @classmethod
    def reduced(cls, **kw) -> "SamplerSettings":
        """Desk-scale settings: 2 chains x (1000 tune + 2000 draws)."""
        base = dict(chains=2, tune=1000, draws=2000)
        base.update(kw)
        return cls(**base)


@dataclass
class Trace:
    """Retained draws and per-iteration sampler statistics.

    Arrays indexed ``[chain, draw]``; ``draws`` has a trailing parameter axis.
    """

    draws: np.ndarray
    logp: np.ndarray
    divergent: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    saturated: np.ndarray
    accept_stat: np.ndarray
    energy: np.ndarray
    step_size: np.ndarray
    inv_mass: np.ndarray
    warmup_divergences: np.ndarray
    settings: SamplerSettings
    layout_version: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    @property
    def dim(self) -> int:
        return self.draws.shape[2]

    @property
    def n_divergences(self) -> int:
        return int(self.divergent.sum())

    def divergences(self) -> list[dict]:
        """Per-chain divergence count and the iteration indices where they occurred."""
        return [{"chain": c, "count": int(self.divergent[c].sum()),
                 "iterations": np.flatnonzero(self.divergent[c]).tolist()}
                for c in range(self.n_chains)]

    @property
    def saturation_count(self) -> int:
        return int(self.saturated.sum())

    def flat(self) -> np.ndarray:
        """Draws pooled over chains in chain order, shape ``(chains*draws, dim)``."""
        return self.draws.reshape(-1, self.dim)


def _kinetic(p, inv_mass):
    return 0.5 * float(np.dot(p, inv_mass * p))


def leapfrog(target, q, p, eps, inv_mass, grad=None):
    """One velocity-Verlet step.

    Parameters
    ----------
    target
        Object with ``logp_and_grad``.
    q, p : ndarray
        Position and momentum.
    eps : float
        Signed step size.
    inv_mass : ndarray
        Diagonal of the inverse mass matrix.
    grad : ndarray, optional
        Gradient at ``q`` if already known.

    Returns
    -------
    q_new, p_new, logp_new, grad_new
        A non-finite ``logp_new`` signals a divergence; no exception is raised.
    """
    if grad is None:
        grad = target.logp_and_grad(q)[1]
    p_half = p + 0.5 * eps * grad
    q_new = q + eps * inv_mass * p_half
    lp, g = target.logp_and_grad(q_new)
    if not math.isfinite(lp):
        return q_new, p_half, -math.inf, g
    # a non-finite gradient surfaces as a non-finite kinetic energy downstream
    return q_new, p_half + 0.5 * eps * g, lp, g


class _Tree:
    """A contiguous stretch of trajectory, edges stored in time order."""

    __slots__ = ("ql", "pl", "gl", "psl", "qr", "pr", "gr", "psr", "rho", "lsw",
                 "q", "lp", "g", "valid", "divergent")


def _logaddexp(a, b):
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def _criterion(ps_left, ps_right, rho) -> bool:
    return float(np.dot(ps_left, rho)) > 0.0 and float(np.dot(ps_right, rho)) > 0.0


def _merge_ok(left: _Tree, right: _Tree, rho) -> bool:
    """No-U-turn check over the joined trajectory and across the junction."""
    return (_criterion(left.psl, right.psr, rho)
            and _criterion(left.psl, right.psl, left.rho + right.pl)
            and _criterion(left.psr, right.psr, right.rho + left.pr))


class _Chain:
    def __init__(self, target, settings: SamplerSettings, rng: np.random.Generator):
        self.target = target
        self.s = settings
        self.rng = rng
        self.inv_mass = np.ones(target.dim)
        self.eps = 1.0
        self.H0 = 0.0
        self.model = None
        if settings.engine != "python":
            self.model = getattr(target, "compiled_model", None)
            if self.model is None and settings.engine == "compiled":
                raise SamplerError("target has no compiled log density")
        if self.model is not None:
            from . import _nuts_kernel
            self._kernel = _nuts_kernel
            self.ws = _nuts_kernel.workspace(target.dim, settings.max_treedepth)

    # -- trajectory -------------------------------------------------------
    def _leaf(self, q, p, g, direction) -> _Tree:
        qn, pn, lp, gn = leapfrog(self.target, q, p, direction * self.eps, self.inv_mass, g)
        t = _Tree()
        self.n_leapfrog += 1
        H = -lp + _kinetic(pn, self.inv_mass) if math.isfinite(lp) else math.inf
        if H != H:
            H = math.inf
        dH = H - self.H0
        t.divergent = dH > self.s.divergence_threshold
        t.valid = not t.divergent
        t.lsw = -dH
        self.sum_accept += 1.0 if dH < 0 else math.exp(-dH)
        ps = self.inv_mass * pn
        t.ql = t.qr = t.q = qn
        t.pl = t.pr = t.rho = pn
        t.gl = t.gr = t.g = gn
        t.psl = t.psr = ps
        t.lp = lp
        return t

    def _build(self, depth, q, p, g, direction) -> _Tree:
        if depth == 0:
            return self._leaf(q, p, g, direction)
        inner = self._build(depth - 1, q, p, g, direction)
        if not inner.valid:
            return inner
        if direction > 0:
            outer = self._build(depth - 1, inner.qr, inner.pr, inner.gr, direction)
        else:
            outer = self._build(depth - 1, inner.ql, inner.pl, inner.gl, direction)
        if not outer.valid:
            return outer
        left, right = (inner, outer) if direction > 0 else (outer, inner)
        t = _Tree()
        t.divergent = False
        t.lsw = _logaddexp(inner.lsw, outer.lsw)
        if math.log(self.rng.random()) < outer.lsw - t.lsw:
            t.q, t.lp, t.g = outer.q, outer.lp, outer.g
        else:
            t.q, t.lp, t.g = inner.q, inner.lp, inner.g
        t.rho = left.rho + right.rho
        t.ql, t.pl, t.gl, t.psl = left.ql, left.pl, left.gl, left.psl
        t.qr, t.pr, t.gr, t.psr = right.qr, right.pr, right.gr, right.psr
        t.valid = _merge_ok(left, right, t.rho)
        return t

    def transition(self, q, lp, g):
        """One NUTS iteration from ``(q, lp, g)``."""
        if self.model is not None:
            return self._compiled_transition(q, lp, g)
        p = self.rng.standard_normal(q.size) / np.sqrt(self.inv_mass)
        self.H0 = -lp + _kinetic(p, self.inv_mass)
        tree = _Tree()
        ps = self.inv_mass * p
        tree.ql = tree.qr = q
        tree.pl = tree.pr = tree.rho = p
        tree.gl = tree.gr = g
        tree.psl = tree.psr = ps
        tree.lsw = 0.0
        cur_q, cur_lp, cur_g = q, lp, g
        depth = 0
        divergent = False
        saturated = False
        self.sum_accept = 0.0
        self.n_leapfrog = 0
        while True:
            if depth >= self.s.max_treedepth:
                saturated = True
                break
            direction = 1 if self.rng.random() > 0.5 else -1
            if direction > 0:
                sub = self._build(depth, tree.qr, tree.pr, tree.gr, 1)
            else:
                sub = self._build(depth, tree.ql, tree.pl, tree.gl, -1)
            if not sub.valid:
                divergent = sub.divergent
                break
            depth += 1
            if sub.lsw > tree.lsw or math.log(self.rng.random()) < sub.lsw - tree.lsw:
                cur_q, cur_lp, cur_g = sub.q, sub.lp, sub.g
            tree.lsw = _logaddexp(tree.lsw, sub.lsw)
            left, right = (tree, sub) if direction > 0 else (sub, tree)
            rho = left.rho + right.rho
            ok = _merge_ok(left, right, rho)
            merged = _Tree()
            merged.ql, merged.pl, merged.gl, merged.psl = left.ql, left.pl, left.gl, left.psl
            merged.qr, merged.pr, merged.gr, merged.psr = right.qr, right.pr, right.gr, right.psr
            merged.rho = rho
            merged.lsw = tree.lsw
            tree = merged
            if not ok:
                break
        stats = dict(depth=depth, divergent=divergent, saturated=saturated,
                     accept=self.sum_accept / max(self.n_leapfrog, 1),
                     n_leapfrog=self.n_leapfrog, energy=self.H0)
        return cur_q, cur_lp, cur_g, stats

    def _compiled_transition(self, q, lp, g):
        out_q = np.empty_like(q)
        out_g = np.empty_like(g)
        lp_new, depth, div, sat, acc, n, H0 = self._kernel.transition(
            q, lp, g, self.inv_mass, self.eps, self.s.max_treedepth,
            self.s.divergence_threshold, self.ws, self.model, self.rng, out_q, out_g)
        self.H0 = H0
        stats = dict(depth=depth, divergent=div, saturated=sat, accept=acc, n_leapfrog=n,
                     energy=H0)
        return out_q, lp_new, out_g, stats

    # -- adaptation -------------------------------------------------------
    def find_step_size(self, q, lp, g):
        """Double or halve ``eps`` until one leapfrog step crosses acceptance 0.8."""
        log08 = math.log(0.8)

        def delta_h():
            p = self.rng.standard_normal(q.size) / np.sqrt(self.inv_mass)
            H0 = -lp + _kinetic(p, self.inv_mass)
            _, pn, lpn, _ = leapfrog(self.target, q, p, self.eps, self.inv_mass, g)
            if not math.isfinite(lpn):
                return -math.inf
            return H0 - (-lpn + _kinetic(pn, self.inv_mass))

        d = delta_h()
        direction = 1 if d > log08 else -1
        for _ in range(100):
            d = delta_h()
            if direction == 1 and not d > log08:
                break
            if direction == -1 and not d < log08:
                break
            self.eps = self.eps * 2.0 if direction == 1 else self.eps * 0.5
            if self.eps > 1e7:
                raise SamplerError("step size search diverged; posterior may be improper")


class _DualAveraging:
    gamma = 0.05
    t0 = 10.0
    kappa = 0.75

    def __init__(self, eps, target):
        self.target = target
        self.restart(eps)

    def restart(self, eps):
        self.mu = math.log(10.0 * eps)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept):
        self.counter += 1
        accept = min(1.0, accept)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** -self.kappa
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    def final(self):
        return math.exp(self.x_bar)


def adaptation_windows(tune: int) -> list[tuple[int, int]]:
    """``[start, end)`` iteration ranges over which the mass matrix is estimated.

    The first 15% and last 10% of warmup adapt the step size only; windows in
    between start at 25 iterations and double, the last one stretched to the
    terminal buffer.
    """
    if tune < 20:
        return []
    init = int(0.15 * tune)
    term = int(0.10 * tune)
    stop = tune - term
    windows = []
    start, width = init, 25
    while start < stop:
        end = start + width
        if end + 2 * width > stop:
            end = stop
        windows.append((start, end))
        start, width = end, width * 2
    return windows


def _initial_state(target, settings, seed, init):
    if init is None:
        from .model import ModelContext, initial_point
        if isinstance(target, ModelContext):
            make = lambda s: initial_point(target, s, settings.init_jitter)  # noqa: E731
        elif hasattr(target, "initial_point"):
            make = target.initial_point
        else:
            make = lambda s: np.random.default_rng(s).uniform(-2, 2, target.dim)  # noqa: E731
        rng = np.random.default_rng(seed)
        for _ in range(100):
            q = np.asarray(make(int(rng.integers(2 ** 32))), dtype=float)
            lp, g = target.logp_and_grad(q)
            if math.isfinite(lp) and np.all(np.isfinite(g)):
                return q, lp, g
        raise SamplerError("non-finite log density at every one of 100 jittered starting points")
    q = np.array(init, dtype=float)
    lp, g = target.logp_and_grad(q)
    if not (math.isfinite(lp) and np.all(np.isfinite(g))):
        raise SamplerError("non-finite log density at the supplied starting point")
    return q, lp, g


def _run_chain(target, settings: SamplerSettings, chain: int, seed_seq, init=None):
    init_seed, = seed_seq.generate_state(1)
    rng = np.random.default_rng(seed_seq)
    q, lp, g = _initial_state(target, settings, int(init_seed), init)
    ch = _Chain(target, settings, rng)
    ch.find_step_size(q, lp, g)
    da = _DualAveraging(ch.eps, settings.target_accept)
    windows = adaptation_windows(settings.tune)
    win_idx = 0
    buf = []

    n, d = settings.draws, target.dim
    out = dict(
        draws=np.empty((n, d)), logp=np.empty(n), divergent=np.zeros(n, bool),
        tree_depth=np.empty(n, np.int32), n_leapfrog=np.empty(n, np.int64),
        saturated=np.zeros(n, bool), accept_stat=np.empty(n), energy=np.empty(n),
    )
    warm_div = 0
    for it in range(settings.tune + settings.draws):
        q, lp, g, st = ch.transition(q, lp, g)
        if it < settings.tune:
            warm_div += st["divergent"]
            ch.eps = da.update(st["accept"])
            if win_idx < len(windows):
                a, b = windows[win_idx]
                if a <= it < b:
                    buf.append(q)
                if it == b - 1:
                    x = np.asarray(buf)
                    k = x.shape[0]
                    var = x.var(axis=0, ddof=1) if k > 1 else np.ones(d)
                    ch.inv_mass = (k / (k + 5.0)) * var + 1e-3 * (5.0 / (k + 5.0))
                    buf = []
                    win_idx += 1
                    ch.find_step_size(q, lp, g)
                    da.restart(ch.eps)
                    log.info("chain %d: mass window %d/%d done at iteration %d, eps=%.3g",
                             chain, win_idx, len(windows), it + 1, ch.eps)
            if it == settings.tune - 1:
                ch.eps = da.final()
                if warm_div == settings.tune:
                    raise SamplerError(f"chain {chain}: every warmup iteration diverged")
                log.info("chain %d: warmup done, eps=%.3g, %d warmup divergences",
                         chain, ch.eps, warm_div)
        else:
            i = it - settings.tune
            out["draws"][i] = q
            out["logp"][i] = lp
            out["divergent"][i] = st["divergent"]
            out["tree_depth"][i] = st["depth"]
            out["n_leapfrog"][i] = st["n_leapfrog"]
            out["saturated"][i] = st["saturated"]
            out["accept_stat"][i] = st["accept"]
            out["energy"][i] = st["energy"]
    out["step_size"] = ch.eps
    out["inv_mass"] = ch.inv_mass
    out["warmup_divergences"] = warm_div
    log.info("chain %d: %d draws, %d divergences", chain, n, int(out["divergent"].sum()))
    return out


def _worker_count(chains: int) -> int:
    env = os.environ.get("BSC_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(chains, cap))


def sample(target, settings: SamplerSettings, init=None, workers: int | None = None) -> Trace:
    """Run ``settings.chains`` independent NUTS chains.

    Parameters
    ----------
    target
        A :class:`~bsc.model.ModelContext` or any object with ``dim`` and
        ``logp_and_grad``.
    settings : SamplerSettings
    init : array_like, optional
        Starting point(s), shape ``(dim,)`` or ``(chains, dim)``.
    workers : int, optional
        Worker processes; defaults to ``min(chains, BSC_THREADS or cpu_count)``.
        Results do not depend on this value.
    """
    if target.dim < 1:
        raise ValueError("target has no parameters")
    seqs = np.random.SeedSequence(settings.seed).spawn(settings.chains)
    inits = [None] * settings.chains
    if init is not None:
        arr = np.asarray(init, dtype=float)
        inits = [arr] * settings.chains if arr.ndim == 1 else list(arr)
    workers = _worker_count(settings.chains) if workers is None else workers
    if workers > 1:
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_run_chain, target, settings, c, seqs[c], inits[c])
                    for c in range(settings.chains)]
            results = [f.result() for f in futs]
    else:
        results = [_run_chain(target, settings, c, seqs[c], inits[c])
                   for c in range(settings.chains)]

    def stack(key):
        return np.stack([r[key] for r in results])

    from .model import LAYOUT_VERSION, ModelContext
    return Trace(
        draws=stack("draws"), logp=stack("logp"), divergent=stack("divergent"),
        tree_depth=stack("tree_depth"), n_leapfrog=stack("n_leapfrog"),
        saturated=stack("saturated"), accept_stat=stack("accept_stat"),
        energy=stack("energy"), step_size=np.array([r["step_size"] for r in results]),
        inv_mass=stack("inv_mass"),
        warmup_divergences=np.array([r["warmup_divergences"] for r in results]),
        settings=settings,
        layout_version=LAYOUT_VERSION if isinstance(target, ModelContext) else "",
    )


# -- binary trace dump --------------------------------------------------------
#
# magic "BSCTRACE" | uint32 format version | uint32 header length | JSON header
# then little-endian arrays in header["arrays"] order, each C-contiguous.

_ARRAYS = (("draws", "<f8"), ("logp", "<f8"), ("divergent", "u1"), ("tree_depth", "<i4"),
           ("n_leapfrog", "<i8"), ("saturated", "u1"), ("accept_stat", "<f8"),
           ("energy", "<f8"), ("step_size", "<f8"), ("inv_mass", "<f8"),
           ("warmup_divergences", "<i8"))


def write_trace(trace: Trace, path) -> None:
    header = {
        "chains": trace.n_chains, "draws": trace.n_draws, "dim": trace.dim,
        "layout_version": trace.layout_version,
        "settings": asdict(trace.settings),
        "arrays": [[name, dt, list(getattr(trace, name).shape)] for name, dt in _ARRAYS],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<II", TRACE_FORMAT_VERSION, len(hb)))
        fh.write(hb)
        for name, dt in _ARRAYS:
            fh.write(np.ascontiguousarray(getattr(trace, name), dtype=dt).tobytes())


def read_trace(path) -> Trace:
    raw = Path(path).read_bytes()
    if raw[:8] != TRACE_MAGIC:
        raise ValueError(f"{path} is not a trace file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != TRACE_FORMAT_VERSION:
        raise ValueError(f"unsupported trace format version {version}")
    header = json.loads(raw[16:16 + hlen])
    off = 16 + hlen
    arrays = {}
    for name, dt, shape in header["arrays"]:
        n = int(np.prod(shape)) * np.dtype(dt).itemsize
        arrays[name] = np.frombuffer(raw[off:off + n], dtype=dt).reshape(shape).copy()
        off += n
    for name in ("divergent", "saturated"):
        arrays[name] = arrays[name].astype(bool)
    return Trace(settings=SamplerSettings(**header["settings"]),
                 layout_version=header["layout_version"], **arrays)
