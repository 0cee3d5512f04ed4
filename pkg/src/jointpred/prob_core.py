"""Exact finite-probability machinery.

Everything here works in nats. Pmfs are small explicit tables; joints are dense
numpy arrays with one named axis per variable.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Any, Hashable, Sequence

import numpy as np

NORMALIZATION_TOL = 1e-12


class FinitePmf:
    """Probability mass function over an explicitly enumerated outcome set.

    ``probs`` is stored as a read-only float64 array aligned with ``outcomes``.
    A table whose mass is within ``NORMALIZATION_TOL`` of 1 is renormalized;
    anything further off raises ``ValueError``.
    """

    __slots__ = ("outcomes", "probs", "_index")

    def __init__(self, outcomes: Sequence[Hashable], probs):
        outcomes = list(outcomes)
        p = np.array(probs, dtype=float).reshape(-1)
        if len(outcomes) != p.size:
            raise ValueError(f"{len(outcomes)} outcomes but {p.size} probabilities")
        if p.size == 0:
            raise ValueError("empty pmf")
        if np.any(~np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probabilities must be finite and non-negative")
        total = p.sum()
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"probabilities sum to {total!r}, not 1")
        p = p / total
        index = {o: i for i, o in enumerate(outcomes)}
        if len(index) != len(outcomes):
            raise ValueError("outcome identifiers must be unique")
        p.setflags(write=False)
        self.outcomes = tuple(outcomes)
        self.probs = p
        self._index = index

    @classmethod
    def from_dict(cls, mapping: dict) -> "FinitePmf":
        return cls(list(mapping), list(mapping.values()))

    @classmethod
    def point_mass(cls, outcome: Hashable, support: Sequence[Hashable] | None = None):
        support = [outcome] if support is None else list(support)
        probs = [1.0 if o == outcome else 0.0 for o in support]
        return cls(support, probs)

    @classmethod
    def uniform(cls, outcomes: Sequence[Hashable]) -> "FinitePmf":
        n = len(outcomes)
        return cls(outcomes, np.full(n, 1.0 / n))

    @classmethod
    def bernoulli(cls, p: float) -> "FinitePmf":
        return cls([0, 1], [1.0 - p, p])

    def __len__(self):
        return len(self.outcomes)

    def __getitem__(self, outcome) -> float:
        i = self._index.get(outcome)
        return 0.0 if i is None else float(self.probs[i])

    def __repr__(self):
        items = ", ".join(f"{o!r}: {p:.6g}" for o, p in zip(self.outcomes, self.probs))
        return f"FinitePmf({{{items}}})"

    def index(self, outcome) -> int:
        return self._index[outcome]

    def as_dict(self) -> dict:
        return dict(zip(self.outcomes, self.probs.tolist()))

    def support(self) -> list:
        return [o for o, p in zip(self.outcomes, self.probs) if p > 0]

    def expectation(self, fn) -> float:
        return float(sum(p * fn(o) for o, p in zip(self.outcomes, self.probs) if p > 0))

    def same_outcomes(self, other: "FinitePmf") -> bool:
        return self.outcomes == other.outcomes

    def aligned_to(self, outcomes: Sequence[Hashable]) -> "FinitePmf":
        """Reorder onto ``outcomes`` (a superset of the support)."""
        missing = set(self.support()) - set(outcomes)
        if missing:
            raise ValueError(f"outcomes {sorted(map(repr, missing))} carry mass but are absent")
        return FinitePmf(outcomes, [self[o] for o in outcomes])


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"Beta parameters must be positive, got ({self.alpha}, {self.beta})")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


class JointPmf:
    """Dense joint pmf over named finite axes.

    ``values[name]`` lists the outcomes of each axis; ``array`` has one
    dimension per axis in ``axes`` order.
    """

    def __init__(self, axes: Sequence[str], values: Sequence[Sequence[Hashable]], array):
        axes = list(axes)
        if len(set(axes)) != len(axes):
            raise ValueError("axis names must be unique")
        arr = np.asarray(array, dtype=float)
        shape = tuple(len(v) for v in values)
        if arr.shape != shape:
            raise ValueError(f"table shape {arr.shape} does not match axis sizes {shape}")
        if np.any(arr < 0):
            raise ValueError("negative probability in joint table")
        total = arr.sum()
        if abs(total - 1.0) > NORMALIZATION_TOL * max(1, arr.size) ** 0.5:
            raise ValueError(f"joint table sums to {total!r}")
        self.axes = axes
        self.values = {a: tuple(v) for a, v in zip(axes, values)}
        self.array = arr / total

    @property
    def table(self) -> FinitePmf:
        """The joint as a flat pmf over tuples of axis values."""
        outcomes = list(itertools.product(*(self.values[a] for a in self.axes)))
        return FinitePmf(outcomes, self.array.reshape(-1))

    def marginal(self, keep: Sequence[str]) -> "JointPmf":
        keep = list(keep)
        unknown = set(keep) - set(self.axes)
        if unknown:
            raise KeyError(f"unknown axes {sorted(unknown)}")
        drop = tuple(i for i, a in enumerate(self.axes) if a not in keep)
        arr = self.array.sum(axis=drop)
        kept = [a for a in self.axes if a in keep]
        arr = np.transpose(arr, [kept.index(a) for a in keep])
        return JointPmf(keep, [self.values[a] for a in keep], arr)

    def _flat(self, groups: Sequence[Sequence[str]]) -> np.ndarray:
        """Marginal over the union of ``groups``, one flattened dimension per group.

        An empty group becomes a singleton dimension.
        """
        names = [a for g in groups for a in g]
        arr = self.marginal(names).array if names else np.ones(())
        sizes = [int(np.prod([len(self.values[a]) for a in g])) for g in groups]
        return arr.reshape(sizes)


class RngStream:
    """Seeded random stream keyed by ``(master_seed, stream_id)``.

    The pair is mixed by numpy's ``SeedSequence`` hash (``stream_id`` enters as
    the spawn key), and the resulting state drives a PCG64 generator. Streams
    with different ids share no state. A stream is single-owner.
    """

    def __init__(self, master_seed: int, stream_id: int = 0):
        if not (0 <= master_seed < 2**64 and 0 <= stream_id < 2**64):
            raise ValueError("master_seed and stream_id must be 64-bit unsigned integers")
        self.master_seed = int(master_seed)
        self.stream_id = int(stream_id)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_id={self.stream_id})"

    def random(self, size=None):
        return self.generator.random(size)

    def beta(self, a, b, size=None):
        return self.generator.beta(a, b, size)

    def binomial(self, n, p, size=None):
        return self.generator.binomial(n, p, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, n, p=None, size=None):
        return self.generator.choice(n, p=p, size=size)


def _aligned_pair(p: FinitePmf, q: FinitePmf):
    if not p.same_outcomes(q):
        if set(p.outcomes) != set(q.outcomes) or len(p) != len(q):
            raise ValueError("pmfs are defined over different outcome sets")
        q = q.aligned_to(p.outcomes)
    return p.probs, q.probs


def kl_array(p: np.ndarray, q: np.ndarray, axis=-1) -> np.ndarray:
    """Elementwise-batched KL(p || q) along ``axis`` with 0 ln 0 = 0.

    Returns ``inf`` wherever p puts mass on a zero of q.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    p, q = np.broadcast_arrays(p, q)
    pos = p > 0
    bad = np.any(pos & (q <= 0), axis=axis)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pos, p * (np.log(np.where(pos, p, 1.0)) - np.log(np.where(pos & (q > 0), q, 1.0))), 0.0)
    out = terms.sum(axis=axis)
    # rounding can push a tiny true KL below zero
    out = np.maximum(out, 0.0)
    return np.where(bad, np.inf, out)


def kl_divergence(p: FinitePmf, q: FinitePmf) -> float:
    """KL(p || q) in nats; ``math.inf`` when p is not absolutely continuous wrt q."""
    a, b = _aligned_pair(p, q)
    return float(kl_array(a, b))


def entropy_array(p: np.ndarray, axis=-1) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.maximum(terms.sum(axis=axis), 0.0)


def entropy(p: FinitePmf) -> float:
    return float(entropy_array(p.probs))


def total_variation(p: FinitePmf, q: FinitePmf) -> float:
    a, b = _aligned_pair(p, q)
    return 0.5 * float(np.abs(a - b).sum())


class MIResult(float):
    """Mutual information value; ``empty_side`` flags the empty-subset convention."""

    empty_side: bool = False

    def __new__(cls, value, empty_side=False):
        obj = super().__new__(cls, value)
        obj.empty_side = empty_side
        return obj


def mutual_information(j: JointPmf, vars_a: Sequence[str], vars_b: Sequence[str],
                       vars_cond: Sequence[str] = ()) -> MIResult:
    """Exact conditional mutual information I(A; B | C) in nats.

    Computed as the P(C)-weighted KL between P(A,B|C) and P(A|C)P(B|C).
    If either side is empty the result is 0 with ``empty_side`` set and a
    ``RuntimeWarning`` emitted.
    """
    a, b, c = list(vars_a), list(vars_b), list(vars_cond)
    everything = a + b + c
    if len(set(everything)) != len(everything):
        raise ValueError("variable subsets must be disjoint")
    unknown = set(everything) - set(j.axes)
    if unknown:
        raise KeyError(f"unknown axes {sorted(unknown)}")
    if not a or not b:
        warnings.warn("mutual information with an empty variable set is 0", RuntimeWarning, stacklevel=2)
        return MIResult(0.0, empty_side=True)

    pabc = j._flat([a, b, c])                      # (A, B, C)
    pc = pabc.sum(axis=(0, 1))                      # (C,)
    pac = pabc.sum(axis=1)                          # (A, C)
    pbc = pabc.sum(axis=0)                          # (B, C)
    with np.errstate(divide="ignore", invalid="ignore"):
        indep = pac[:, None, :] * pbc[None, :, :] / np.where(pc > 0, pc, 1.0)[None, None, :]
        pos = pabc > 0
        terms = np.where(pos, pabc * (np.log(np.where(pos, pabc, 1.0)) - np.log(np.where(pos, indep, 1.0))), 0.0)
    return MIResult(max(float(terms.sum()), 0.0))


def conditional_entropy(j: JointPmf, vars_a: Sequence[str], vars_cond: Sequence[str] = ()) -> float:
    """H(A | C) by direct enumeration of -sum P(a, c) ln P(a | c)."""
    pac = j._flat([list(vars_a), list(vars_cond)])
    pc = pac.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = pac / np.where(pc > 0, pc, 1.0)[None, :]
        terms = np.where(pac > 0, -pac * np.log(np.where(pac > 0, cond, 1.0)), 0.0)
    return max(float(terms.sum()), 0.0)


def beta_update(prior: BetaParams, successes: int, failures: int) -> BetaParams:
    if successes < 0 or failures < 0:
        raise ValueError("counts must be non-negative")
    return BetaParams(prior.alpha + successes, prior.beta + failures)


def sample(dist: FinitePmf | BetaParams, rng: RngStream) -> Any:
    """One draw from a finite pmf (returns the outcome) or a Beta (returns a float)."""
    if isinstance(dist, BetaParams):
        return float(rng.beta(dist.alpha, dist.beta))
    if isinstance(dist, FinitePmf):
        i = int(np.searchsorted(np.cumsum(dist.probs), rng.random(), side="right"))
        # guard against cumsum ending a hair below 1
        i = min(i, len(dist) - 1)
        while dist.probs[i] == 0:
            i -= 1
        return dist.outcomes[i]
    raise TypeError(f"cannot sample from {type(dist).__name__}")


def product_pmf(factors: Sequence[FinitePmf]) -> FinitePmf:
    """Independent product; outcomes are tuples of the factor outcomes."""
    outcomes = list(itertools.product(*(f.outcomes for f in factors)))
    probs = np.ones(1)
    for f in factors:
        probs = np.multiply.outer(probs, f.probs).reshape(-1)
    return FinitePmf(outcomes, probs)


def mixture_pmf(weights: Sequence[float], components: Sequence[FinitePmf]) -> FinitePmf:
    outcomes = components[0].outcomes
    probs = np.zeros(len(outcomes))
    for w, c in zip(weights, components):
        probs += w * c.aligned_to(outcomes).probs
    return FinitePmf(outcomes, probs)


def binary_sequences(n: int) -> list[tuple[int, ...]]:
    """All length-``n`` 0/1 tuples in lexicographic order."""
    return list(itertools.product((0, 1), repeat=n))
