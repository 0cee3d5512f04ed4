"""Environment families: the coin, the two-type movie recommender, and
Bernoulli bandit priors (independent Beta arms or a finite hypothesis set).

Arms and movies are 0-indexed in code. Anything reported to users adds 1 so
labels line up with X_1..X_N.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .prob_core import BetaParams, FinitePmf, RngStream, binary_sequences

DEFAULT_DELTA = 1e-6


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


# ---------------------------------------------------------------------------
# Bandit priors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvModel:
    """Prior over K-armed Bernoulli environments.

    ``kind == "independent_beta"`` uses ``beta_priors`` (one per arm);
    ``kind == "finite_hypothesis"`` uses ``weights`` and the (H, K) matrix
    ``hypotheses`` of arm means.
    """

    kind: str
    K: int
    beta_priors: tuple[BetaParams, ...] = ()
    weights: np.ndarray | None = field(default=None, compare=False)
    hypotheses: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.kind == "independent_beta":
            if len(self.beta_priors) != self.K:
                raise ValueError(f"need {self.K} Beta priors, got {len(self.beta_priors)}")
        elif self.kind == "finite_hypothesis":
            w = np.asarray(self.weights, dtype=float).reshape(-1)
            P = np.asarray(self.hypotheses, dtype=float)
            if P.ndim != 2 or P.shape != (w.size, self.K):
                raise ValueError(f"hypotheses must have shape ({w.size}, {self.K}), got {P.shape}")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("hypothesis weights must be non-negative and sum to 1")
            if np.any((P < 0) | (P > 1)):
                raise ValueError("arm means must lie in [0, 1]")
            w = w / w.sum()
            w.setflags(write=False)
            P = P.copy()
            P.setflags(write=False)
            object.__setattr__(self, "weights", w)
            object.__setattr__(self, "hypotheses", P)
        else:
            raise ValueError(f"unknown EnvModel kind {self.kind!r}")

    @classmethod
    def independent_beta(cls, K: int, alpha=1.0, beta=1.0) -> "EnvModel":
        a = np.broadcast_to(np.asarray(alpha, dtype=float), (K,))
        b = np.broadcast_to(np.asarray(beta, dtype=float), (K,))
        return cls("independent_beta", K, beta_priors=tuple(BetaParams(float(x), float(y)) for x, y in zip(a, b)))

    @classmethod
    def finite_hypothesis(cls, weights, hypotheses) -> "EnvModel":
        P = np.asarray(hypotheses, dtype=float)
        return cls("finite_hypothesis", P.shape[1], weights=np.asarray(weights, dtype=float), hypotheses=P)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([b.alpha for b in self.beta_priors])

    @property
    def betas(self) -> np.ndarray:
        return np.array([b.beta for b in self.beta_priors])

    def prior_means(self) -> np.ndarray:
        """Per-arm prior mean of p, i.e. the tau=1 marginal P(Y_k = 1)."""
        if self.kind == "independent_beta":
            return self.alphas / (self.alphas + self.betas)
        return self.weights @ self.hypotheses

    def expected_max_mean(self) -> float:
        """E[max_k p_k] under the prior (finite hypotheses only)."""
        if self.kind != "finite_hypothesis":
            raise NotImplementedError("closed form only for finite hypothesis priors")
        return float(self.weights @ self.hypotheses.max(axis=1))

    def to_dict(self) -> dict:
        if self.kind == "independent_beta":
            return {"kind": self.kind, "K": self.K,
                    "alpha": self.alphas.tolist(), "beta": self.betas.tolist()}
        return {"kind": self.kind, "K": self.K, "weights": self.weights.tolist(),
                "hypotheses": self.hypotheses.tolist()}


@dataclass(frozen=True)
class SampledEnv:
    p: tuple[float, ...]

    def __post_init__(self):
        if any(not (0.0 <= x <= 1.0) for x in self.p):
            raise ValueError("arm means must lie in [0, 1]")

    @property
    def K(self) -> int:
        return len(self.p)

    @property
    def p_star(self) -> float:
        return max(self.p)

    @property
    def best_arm(self) -> int:
        return int(np.argmax(self.p))


def informative_arm_env(K: int, delta: float = DEFAULT_DELTA) -> EnvModel:
    """Two equally likely hypotheses that differ only on the last arm.

    Arms 0..K-2 are known fair coins; the last arm pays 1-delta under the
    "high" hypothesis (index 0) and delta under the "low" one (index 1).
    """
    if K < 2:
        raise ValueError("informative-arm environment needs K >= 2")
    if not (0.0 <= delta < 0.5):
        raise ValueError("delta must lie in [0, 0.5)")
    P = np.full((2, K), 0.5)
    P[0, K - 1] = 1.0 - delta
    P[1, K - 1] = delta
    return EnvModel.finite_hypothesis([0.5, 0.5], P)


def env_sample(model: EnvModel, rng: RngStream) -> SampledEnv:
    if model.kind == "independent_beta":
        return SampledEnv(tuple(float(x) for x in rng.beta(model.alphas, model.betas)))
    h = int(rng.choice(len(model.weights), p=model.weights))
    return SampledEnv(tuple(float(x) for x in model.hypotheses[h]))


def env_sample_batch(model: EnvModel, n: int, rng: RngStream) -> np.ndarray:
    """``n`` environments as an (n, K) array of arm means."""
    if model.kind == "independent_beta":
        return rng.beta(model.alphas, model.betas, size=(n, model.K))
    idx = rng.choice(len(model.weights), p=model.weights, size=n)
    return np.array(model.hypotheses[idx])


def env_step(env: SampledEnv, arm: int, rng: RngStream) -> int:
    if not (0 <= arm < env.K):
        raise IndexError(f"arm {arm} out of range for K={env.K}")
    return int(rng.random() < env.p[arm])


# ---------------------------------------------------------------------------
# Coin
# ---------------------------------------------------------------------------

def coin_sequence_pmf(p: float, tau: int) -> FinitePmf:
    """Joint pmf of ``tau`` i.i.d. Ber(p) tosses over 0/1 tuples."""
    seqs = binary_sequences(tau)
    probs = [p ** sum(s) * (1 - p) ** (tau - sum(s)) for s in seqs]
    return FinitePmf(seqs, probs)


def coin_mixture_pmf(prior: FinitePmf, tau: int) -> FinitePmf:
    """Joint of ``tau`` tosses when the bias is drawn from ``prior`` (over p values)."""
    seqs = binary_sequences(tau)
    probs = np.zeros(len(seqs))
    for p, w in zip(prior.outcomes, prior.probs):
        probs += w * coin_sequence_pmf(p, tau).probs
    return FinitePmf(seqs, probs)


def coin_agents():
    """The two coin agents, as functions tau -> joint pmf over {0,1}^tau.

    Agent 1 believes p = 2/3 with independent tosses. Agent 2 believes the coin
    is all-heads w.p. 2/3 and all-tails w.p. 1/3.
    """

    def agent1(tau: int) -> FinitePmf:
        _check_tau(tau)
        return coin_sequence_pmf(2.0 / 3.0, tau)

    def agent2(tau: int) -> FinitePmf:
        _check_tau(tau)
        return coin_mixture_pmf(FinitePmf([1.0, 0.0], [2.0 / 3.0, 1.0 / 3.0]), tau)

    return agent1, agent2


def _check_tau(tau):
    if tau < 1:
        raise ValueError("tau must be >= 1")


# ---------------------------------------------------------------------------
# Recommender
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecommenderInstance:
    movies: np.ndarray          # (N, d)
    type_weights: np.ndarray    # (U,)
    user_types: np.ndarray      # (U, d)
    K_select: int = 2

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.movies, dtype=float))
        phi = np.atleast_2d(np.asarray(self.user_types, dtype=float))
        w = np.asarray(self.type_weights, dtype=float).reshape(-1)
        if X.shape[1] != phi.shape[1]:
            raise ValueError("movie and user-type dimensions differ")
        if w.size != phi.shape[0]:
            raise ValueError("one weight per user type required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("user-type weights must sum to 1")
        if not (1 <= self.K_select <= X.shape[0]):
            raise ValueError("K_select must be between 1 and the number of movies")
        object.__setattr__(self, "movies", X)
        object.__setattr__(self, "user_types", phi)
        object.__setattr__(self, "type_weights", w / w.sum())

    @property
    def n_movies(self) -> int:
        return self.movies.shape[0]

    def enjoy_probs(self) -> np.ndarray:
        """(U, N) matrix of sigma(phi_u . X_i)."""
        return sigmoid(self.user_types @ self.movies.T)

    def marginal_probs(self) -> np.ndarray:
        return self.type_weights @ self.enjoy_probs()

    def outcome_joint(self, movies: Sequence[int] | None = None) -> FinitePmf:
        """Joint pmf of (Y_i) over the chosen movies, mixing over user types."""
        idx = list(range(self.n_movies)) if movies is None else list(movies)
        P = self.enjoy_probs()[:, idx]
        seqs = binary_sequences(len(idx))
        Y = np.array(seqs, dtype=float)                          # (S, n)
        per_type = np.prod(np.where(Y[None] == 1, P[:, None, :], 1 - P[:, None, :]), axis=2)
        return FinitePmf(seqs, self.type_weights @ per_type)

    def marginal_product_joint(self, movies: Sequence[int] | None = None) -> FinitePmf:
        """Joint implied by treating each movie independently with its marginal."""
        idx = list(range(self.n_movies)) if movies is None else list(movies)
        m = self.marginal_probs()[idx]
        seqs = binary_sequences(len(idx))
        Y = np.array(seqs, dtype=float)
        return FinitePmf(seqs, np.prod(np.where(Y == 1, m, 1 - m), axis=1))


def table1_instance() -> RecommenderInstance:
    return RecommenderInstance(
        movies=np.array([[10.0, -10.0], [-10.0, 10.0], [1.0, 0.0], [0.0, 1.0]]),
        type_weights=np.array([0.5, 0.5]),
        user_types=np.array([[1.0, 0.0], [0.0, 1.0]]),
        K_select=2,
    )


def recommender_success_prob(inst: RecommenderInstance, pair: Sequence[int]) -> float:
    """P(user enjoys at least one movie in ``pair``), averaged over user types."""
    pair = list(pair)
    if len(set(pair)) != len(pair):
        raise ValueError("movie indices must be distinct")
    for i in pair:
        if not (0 <= i < inst.n_movies):
            raise IndexError(f"movie index {i} out of range")
    P = inst.enjoy_probs()[:, pair]
    miss = np.prod(1.0 - P, axis=1)
    return float(inst.type_weights @ (1.0 - miss))


@dataclass(frozen=True)
class PairSelection:
    marginal_pair: tuple[int, ...]
    joint_pair: tuple[int, ...]
    marginal_success: float
    joint_success: float


def marginal_vs_joint_pair(inst: RecommenderInstance) -> PairSelection:
    """Top-K by marginal enjoyment versus the best K-subset by joint success."""
    m = inst.marginal_probs()
    # stable sort on -m keeps the smaller index first among ties
    order = np.argsort(-m, kind="stable")
    marginal = tuple(sorted(int(i) for i in order[: inst.K_select]))
    best, best_val = None, -np.inf
    for combo in itertools.combinations(range(inst.n_movies), inst.K_select):
        v = recommender_success_prob(inst, combo)
        if v > best_val:
            best, best_val = combo, v
    return PairSelection(marginal, tuple(best), recommender_success_prob(inst, marginal), best_val)
