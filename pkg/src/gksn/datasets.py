"""Synthetic Lennard-Jones / linear-polymer datasets and the frames file format."""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diffengine import Tape
from .invariants import Frame

log = logging.getLogger(__name__)

# named random sub-streams derived from one run seed
GEN_STREAM, INIT_STREAM, SHUFFLE_STREAM, SPLIT_STREAM = 0, 1, 2, 3

MD_TRAIN, MD_TEST = 8000, 200


def substream(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), *map(int, keys)]))


@dataclass(frozen=True)
class OscillatorySpec:
    """``f(x) = x + sum_l a_l sin(w_l x)``."""

    a: tuple = (1.0, 0.3, 0.1)
    w: tuple = (11.0, 30.0, 50.0)

    def __post_init__(self):
        a = tuple(float(v) for v in self.a)
        w = tuple(float(v) for v in self.w)
        if len(a) != 3 or len(w) != 3:
            raise ValueError("oscillatory term needs three amplitudes and three frequencies")
        if not all(map(math.isfinite, a + w)):
            raise ValueError("oscillatory parameters must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "w", w)

    @classmethod
    def default(cls) -> "OscillatorySpec":
        return cls()

    @classmethod
    def zero(cls) -> "OscillatorySpec":
        return cls((0.0, 0.0, 0.0))

    @property
    def is_zero(self) -> bool:
        return not any(self.a)

    def __call__(self, x):
        out = x
        for a, w in zip(self.a, self.w):
            if a:
                out = out + a * np.sin(w * x)
        return out

    def derivative(self, x):
        out = np.ones_like(x)
        for a, w in zip(self.a, self.w):
            if a:
                out = out + a * w * np.cos(w * x)
        return out

    def trace(self, tape: Tape, x):
        out = x
        for a, w in zip(self.a, self.w):
            if a:
                out = out + a * tape.sin(w * x)
        return out

    def to_dict(self):
        return {"a": list(self.a), "w": list(self.w)}


@dataclass
class GenConfig:
    m: int = 4
    n: int = 3
    num_samples: int = 10000
    seed: int = 0
    em_lr: float = 0.01
    em_iters: int = 500
    lj_a: float = 1.0
    bond_target: float = 1.0

    def __post_init__(self):
        if self.m < 2 or self.n < 1:
            raise ValueError("need m >= 2 particles and n >= 1 dimensions")
        if self.num_samples < 0 or self.em_iters < 0:
            raise ValueError("counts must be non-negative")
        if self.em_lr <= 0 or self.lj_a <= 0 or self.bond_target <= 0:
            raise ValueError("learning rate and length scales must be positive")


# --- potentials -----------------------------------------------------------------


class Potential:
    """Pair potential over batches of frames ``(F, m, n)``."""

    def pairs(self, m: int):
        raise NotImplementedError

    def pair_term(self, i, j, r):
        """Energy of one pair and its derivative with respect to the distance."""
        raise NotImplementedError

    def trace_pair(self, tape, i, j, r):
        raise NotImplementedError

    def energy_and_grad(self, coords, grad: bool = True):
        X = np.asarray(coords, dtype=float)
        single = X.ndim == 2
        if single:
            X = X[None]
        F, m, n = X.shape
        E = np.zeros(F)
        G = np.zeros_like(X) if grad else None
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            for i, j in self.pairs(m):
                diff = X[:, i] - X[:, j]
                r2 = np.zeros(F)
                for d in range(n):
                    r2 = r2 + diff[:, d] * diff[:, d]
                r = np.sqrt(r2)
                u, du = self.pair_term(i, j, r)
                E = E + u
                if grad:
                    g = (du / r)[:, None] * diff
                    G[:, i] += g
                    G[:, j] -= g
        if single:
            return (E[0], G[0]) if grad else E[0]
        return (E, G) if grad else E

    def energy(self, coords):
        return self.energy_and_grad(coords, grad=False)

    def __call__(self, frame) -> float:
        X = frame.coords if isinstance(frame, Frame) else np.asarray(frame, dtype=float)
        m = X.shape[0]
        for i, j in self.pairs(m):
            if np.array_equal(X[i], X[j]):
                raise ValueError(f"particles {i} and {j} coincide")
        return float(self.energy(X))

    def trace(self, tape: Tape, nodes: list, m: int, n: int):
        total = None
        for i, j in self.pairs(m):
            diff = [nodes[i * n + d] - nodes[j * n + d] for d in range(n)]
            r = tape.sqrt(tape.dot(diff, diff))
            u = self.trace_pair(tape, i, j, r)
            total = u if total is None else total + u
        return total


@dataclass(frozen=True)
class LennardJones(Potential):
    a: float = 1.0
    osc: OscillatorySpec = field(default_factory=OscillatorySpec)

    def pairs(self, m):
        return [(i, j) for i in range(m) for j in range(i + 1, m)]

    def _lj(self, r):
        s6 = (self.a / r) ** 6
        x = s6 * s6 - s6
        dx = (-12.0 * s6 * s6 + 6.0 * s6) / r
        return x, dx

    def pair_term(self, i, j, r):
        x, dx = self._lj(r)
        return self.osc(x), self.osc.derivative(x) * dx

    def trace_pair(self, tape, i, j, r):
        s = self.a / r
        s2 = s * s
        s6 = s2 * s2 * s2
        return self.osc.trace(tape, s6 * s6 - s6)


@dataclass(frozen=True)
class LinearPolymer(LennardJones):
    """Chain bonded between consecutive indices; LJ between every non-bonded pair."""

    d_hat: float = 1.0

    def pair_term(self, i, j, r):
        if j == i + 1:
            x = (r - self.d_hat) ** 2
            return self.osc(x), self.osc.derivative(x) * 2.0 * (r - self.d_hat)
        return super().pair_term(i, j, r)

    def trace_pair(self, tape, i, j, r):
        if j == i + 1:
            d = r - self.d_hat
            return self.osc.trace(tape, d * d)
        return super().trace_pair(tape, i, j, r)


def lj_energy(frame, a: float = 1.0, osc: OscillatorySpec = OscillatorySpec()) -> float:
    """Sum over unordered pairs of ``f((a/r)^12 - (a/r)^6)``."""
    return LennardJones(a, osc)(frame)


def polymer_energy(frame, d_hat: float = 1.0, a: float = 1.0, osc: OscillatorySpec = OscillatorySpec()) -> float:
    """Bond terms ``f((d - d_hat)^2)`` between consecutive particles plus LJ for the rest."""
    return LinearPolymer(a, osc, d_hat)(frame)


# --- minimization ---------------------------------------------------------------

MAX_HALVINGS = 20
MAX_DISP = 0.1


def _capped_step(lr, G, max_disp):
    """Per-frame step size so that no particle moves further than ``max_disp``."""
    gmax = np.sqrt((G * G).sum(axis=-1)).max(axis=-1)
    with np.errstate(divide="ignore"):
        cap = np.where(gmax > 0, max_disp / gmax, np.inf)
    return np.minimum(lr, cap)


def minimize(frame, potential: Potential, lr: float = 0.01, iters: int = 500,
             max_disp: float = MAX_DISP) -> Frame:
    """Gradient descent with step halving on energy increase; gradients from the tape.

    The step is also capped so that no particle moves more than ``max_disp``
    per iteration (the r^-12 wall otherwise launches close pairs apart).
    """
    frame = frame if isinstance(frame, Frame) else Frame(frame)
    X = frame.coords.copy()
    m, n = X.shape
    E = float(potential.energy(X))
    if not math.isfinite(E):
        raise ValueError("non-finite starting energy")
    for _ in range(iters):
        tape = Tape()
        nodes = tape.leaves(X)
        out = potential.trace(tape, nodes, m, n)
        g = tape.backward(out).of(nodes).reshape(m, n)
        step = _capped_step(lr, g[None], max_disp)[0]
        for _ in range(MAX_HALVINGS + 1):
            trial = X - step * g
            Et = float(potential.energy(trial))
            if Et <= E:
                X, E = trial, Et
                break
            step *= 0.5
    return Frame(X, frame.types, E)


def minimize_batch(coords, potential: Potential, lr: float = 0.01, iters: int = 500, max_disp: float = MAX_DISP,
                   return_history=False):
    """Vectorized version of :func:`minimize` with analytic gradients.

    Every operation is elementwise across frames, so each frame's trajectory
    does not depend on which other frames share the batch.
    """
    X = np.array(coords, dtype=float)
    E = potential.energy(X)
    history = [E.copy()] if return_history else None
    # a frame whose whole line search failed stays put forever after
    stuck = np.zeros(X.shape[0], dtype=bool)
    for _ in range(iters):
        active = np.flatnonzero(~stuck)
        G = np.zeros_like(X)
        if active.size:
            _, G[active] = potential.energy_and_grad(X[active])
        step = _capped_step(lr, G, max_disp)
        pending = ~stuck & np.isfinite(E) & np.all(np.isfinite(G), axis=(1, 2))
        for _ in range(MAX_HALVINGS + 1):
            if not pending.any():
                break
            idx = np.flatnonzero(pending)
            trial = X[idx] - step[idx, None, None] * G[idx]
            Et = potential.energy(trial)
            ok = Et <= E[idx]
            acc = idx[ok]
            X[acc] = trial[ok]
            E[acc] = Et[ok]
            pending[acc] = False
            step[idx[~ok]] *= 0.5
        stuck |= pending
        if return_history:
            history.append(E.copy())
    return (X, E, np.array(history)) if return_history else (X, E)


# --- datasets -------------------------------------------------------------------


@dataclass
class FrameSet:
    """Homogeneous collection of frames (same m and n)."""

    coords: np.ndarray
    types: np.ndarray
    energies: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.coords.ndim != 3:
            raise ValueError("coords must have shape (frames, m, n)")
        F, m, _ = self.coords.shape
        self.types = np.asarray(self.types, dtype=np.int64).reshape(F, m)
        self.energies = np.asarray(self.energies, dtype=float).reshape(F)

    @classmethod
    def empty(cls, m: int = 0, n: int = 0) -> "FrameSet":
        return cls(np.zeros((0, m, n)), np.zeros((0, m), dtype=np.int64), np.zeros(0))

    @classmethod
    def from_frames(cls, frames) -> "FrameSet":
        frames = list(frames)
        if not frames:
            return cls.empty()
        coords = np.stack([f.coords for f in frames])
        types = np.stack([f.types if f.types is not None else np.zeros(f.m, dtype=np.int64) for f in frames])
        energies = np.array([np.nan if f.energy is None else f.energy for f in frames])
        return cls(coords, types, energies)

    def __len__(self):
        return self.coords.shape[0]

    @property
    def m(self):
        return self.coords.shape[1]

    @property
    def n(self):
        return self.coords.shape[2]

    def __getitem__(self, i) -> Frame:
        e = self.energies[i]
        return Frame(self.coords[i], self.types[i], None if np.isnan(e) else e)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "FrameSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FrameSet(self.coords[idx], self.types[idx], self.energies[idx])

    def equals(self, other: "FrameSet") -> bool:
        return (self.coords.shape == other.coords.shape and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.types, other.types)
                and np.array_equal(self.energies, other.energies, equal_nan=True))


INIT_SPREAD = 0.25
MAX_PLACEMENT_DRAWS = 10_000


def initial_positions(rng: np.random.Generator, m: int, n: int, a: float) -> np.ndarray:
    """Normal positions placed one at a time, each redrawn until it is at least ``a`` from the others.

    The normal spread grows as ``m ** (1/n)`` so the cloud keeps roughly unit
    density in units of ``a``. Starting outside the repulsive wall matters: the
    oscillatory term has local minima deep inside it, where relaxation stalls.
    """
    sigma = INIT_SPREAD * a * m ** (1.0 / n)
    X = np.empty((m, n))
    for i in range(m):
        for _ in range(MAX_PLACEMENT_DRAWS):
            x = sigma * rng.standard_normal(n)
            if i == 0 or np.min(np.sum((X[:i] - x) ** 2, axis=1)) >= a * a:
                X[i] = x
                break
        else:
            raise RuntimeError(f"could not place particle {i} of {m} at distance >= {a}")
    return X


def make_potential(kind: str, config: GenConfig, osc: OscillatorySpec) -> Potential:
    if kind == "lj":
        return LennardJones(config.lj_a, osc)
    if kind == "polymer":
        return LinearPolymer(config.lj_a, osc, config.bond_target)
    raise ValueError(f"unknown dataset kind {kind!r}")


MAX_RETRIES = 10


def _generate_chunk(indices, potential, config):
    m, n = config.m, config.n
    X0 = np.stack([initial_positions(substream(config.seed, GEN_STREAM, i, 0), m, n, config.lj_a)
                   for i in indices]) if len(indices) else np.zeros((0, m, n))
    X, E = minimize_batch(X0, potential, config.em_lr, config.em_iters, config.lj_a * MAX_DISP)
    for attempt in range(1, MAX_RETRIES + 1):
        bad = np.flatnonzero(~np.isfinite(E) | ~np.all(np.isfinite(X), axis=(1, 2)))
        if bad.size == 0:
            break
        log.info("re-seeding %d frame(s), attempt %d", bad.size, attempt)
        X0b = np.stack([initial_positions(substream(config.seed, GEN_STREAM, indices[b], attempt), m, n,
                                          config.lj_a) for b in bad])
        Xb, Eb = minimize_batch(X0b, potential, config.em_lr, config.em_iters, config.lj_a * MAX_DISP)
        X[bad], E[bad] = Xb, Eb
    else:
        if not (np.all(np.isfinite(E)) and np.all(np.isfinite(X))):
            raise RuntimeError(f"non-finite energy after {MAX_RETRIES} re-seeds")
    return X, E


def generate(kind: str, config: GenConfig, osc: OscillatorySpec = OscillatorySpec(), workers: int = 1,
             chunk: int = 5000) -> FrameSet:
    """Relaxed random configurations labelled with their energy; deterministic given the seed."""
    potential = make_potential(kind, config, osc)
    F, m, n = config.num_samples, config.m, config.n
    if F == 0:
        return FrameSet.empty(m, n)
    chunks = [list(range(s, min(F, s + chunk))) for s in range(0, F, chunk)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda c: _generate_chunk(c, potential, config), chunks))
    else:
        results = [_generate_chunk(c, potential, config) for c in chunks]
    X = np.concatenate([r[0] for r in results])
    E = np.concatenate([r[1] for r in results])
    return FrameSet(X, np.zeros((F, m), dtype=np.int64), E)


# --- splits and target scaling ----------------------------------------------------


def split_indices(num_frames: int, kind: str = "80/20", seed: int = 0):
    """Seeded shuffle, then train/test cut: 80/20, or 8000/200 for MD trajectories."""
    perm = substream(seed, SPLIT_STREAM).permutation(num_frames)
    if kind == "80/20":
        n_train = int(round(0.8 * num_frames))
        return perm[:n_train], perm[n_train:]
    if kind == "md":
        if num_frames < MD_TRAIN + MD_TEST:
            raise ValueError(f"md split needs at least {MD_TRAIN + MD_TEST} frames, got {num_frames}")
        return perm[:MD_TRAIN], perm[MD_TRAIN:MD_TRAIN + MD_TEST]
    raise ValueError(f"unknown split {kind!r}")


@dataclass(frozen=True)
class MinMaxScaler:
    lo: float
    hi: float

    @classmethod
    def fit(cls, y) -> "MinMaxScaler":
        y = np.asarray(y, dtype=float)
        if y.size == 0 or not np.all(np.isfinite(y)):
            raise ValueError("need finite targets to fit the scaler")
        return cls(float(y.min()), float(y.max()))

    @property
    def span(self) -> float:
        return self.hi - self.lo if self.hi > self.lo else 1.0

    def transform(self, y):
        return (np.asarray(y, dtype=float) - self.lo) / self.span

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.span + self.lo


# --- frames file ------------------------------------------------------------------


class FramesFormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else format(float(x), ".17g")


def format_frames(ds: FrameSet) -> str:
    lines = [f"{ds.m} {ds.n}"]
    for f in range(len(ds)):
        lines.append(f"E {_fmt(ds.energies[f])}")
        for i in range(ds.m):
            lines.append(" ".join([str(int(ds.types[f, i]))] + [_fmt(v) for v in ds.coords[f, i]]))
    return "\n".join(lines) + "\n"


def save_frames(ds: FrameSet, path) -> None:
    from .network import atomic_write_text

    atomic_write_text(path, format_frames(ds))


def parse_frames(text: str, source: str = "<string>") -> FrameSet:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append((lineno, line.split()))
    if not rows:
        warnings.warn(f"{source}: no frames", RuntimeWarning, stacklevel=2)
        return FrameSet.empty()
    lineno, header = rows[0]
    try:
        m, n = (int(v) for v in header)
    except ValueError:
        raise FramesFormatError(f"{source}:{lineno}: malformed header {' '.join(header)!r}, expected 'm n'") from None
    if m < 1 or n < 1:
        raise FramesFormatError(f"{source}:{lineno}: header needs positive m and n")
    coords, types, energies = [], [], []
    k = 1
    while k < len(rows):
        frame_idx = len(energies)
        lineno, tok = rows[k]
        if tok[0] != "E" or len(tok) != 2:
            raise FramesFormatError(f"{source}:{lineno}: frame {frame_idx}: expected 'E <energy>'")
        try:
            energies.append(float(tok[1]))
        except ValueError:
            raise FramesFormatError(f"{source}:{lineno}: frame {frame_idx}: non-numeric energy {tok[1]!r}") from None
        k += 1
        xs, ts = [], []
        for a in range(m):
            if k >= len(rows) or rows[k][1][0] == "E":
                where = rows[k][0] if k < len(rows) else "EOF"
                raise FramesFormatError(
                    f"{source}:{where}: frame {frame_idx}: expected {m} atom rows, found {a}")
            lineno, tok = rows[k]
            if len(tok) != n + 1:
                raise FramesFormatError(
                    f"{source}:{lineno}: frame {frame_idx}: expected type and {n} coordinates, got {len(tok)} fields")
            try:
                ts.append(int(tok[0]))
                xs.append([float(v) for v in tok[1:]])
            except ValueError:
                raise FramesFormatError(f"{source}:{lineno}: frame {frame_idx}: non-numeric field") from None
            k += 1
        coords.append(xs)
        types.append(ts)
    if not energies:
        return FrameSet.empty(m, n)
    return FrameSet(np.array(coords, dtype=float), np.array(types, dtype=np.int64), np.array(energies))


def load_frames(path) -> FrameSet:
    with open(path, encoding="utf-8") as fh:
        return parse_frames(fh.read(), str(path))


def summarize(ds: FrameSet) -> dict:
    return {"frames": len(ds), "m": ds.m, "n": ds.n,
            "energy_min": float(np.nanmin(ds.energies)) if len(ds) else None,
            "energy_max": float(np.nanmax(ds.energies)) if len(ds) else None}


def pairwise_min_distance(coords) -> np.ndarray:
    X = np.asarray(coords, dtype=float)
    D = np.sqrt(((X[:, :, None, :] - X[:, None, :, :]) ** 2).sum(-1))
    m = X.shape[1]
    D[:, np.arange(m), np.arange(m)] = np.inf
    return D.min(axis=(1, 2))

