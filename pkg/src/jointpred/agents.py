"""Agents that imagine joint outcomes for every arm.

An agent's parameters are held with a leading batch axis so one ``AgentState``
can stand for a single agent (batch size 1) or for many independent
replications advanced in lock-step by the bandit runner. Every kind generates
imagined rows that are i.i.d. Ber(q) given some latent arm-mean vector q:

* ``exact_posterior``: q drawn from the exact posterior
* ``static_prior``: q drawn from the prior, never updated
* ``ensemble``: q is one of M sampled environments, picked by weight
* ``marginal_product``: q is the vector of posterior means (no coupling)
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import betaln, logsumexp, xlogy

from .envs import EnvModel
from .prob_core import FinitePmf, RngStream

AGENT_KINDS = ("exact_posterior", "marginal_product", "ensemble", "static_prior")
ENUMERATION_CUTOFF_BITS = 20


class ContradictionError(RuntimeError):
    """Every hypothesis has zero likelihood under the observed data."""


@dataclass(frozen=True)
class ImaginedOutcomes:
    matrix: np.ndarray  # (tau, K) of 0/1

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2:
            raise ValueError("imagined outcomes must be a tau x K matrix")
        if np.any((m != 0) & (m != 1)):
            raise ValueError("imagined outcomes must be binary")
        object.__setattr__(self, "matrix", m.astype(np.int8))

    @property
    def tau(self) -> int:
        return self.matrix.shape[0]

    @property
    def K(self) -> int:
        return self.matrix.shape[1]

    def column_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=0)

    def key(self) -> tuple:
        return tuple(tuple(int(v) for v in row) for row in self.matrix)


@dataclass(frozen=True)
class AgentState:
    kind: str
    prior: EnvModel
    alpha: np.ndarray | None = None        # (B, K) Beta posteriors
    beta: np.ndarray | None = None
    log_w: np.ndarray | None = None        # (B, H) hypothesis log-weights
    members: np.ndarray | None = None      # (B, M, K) ensemble arm means
    member_log_w: np.ndarray | None = None  # (B, M)
    rng: RngStream | None = None
    resample_threshold: float = 0.5

    @property
    def batch_size(self) -> int:
        for arr in (self.alpha, self.log_w, self.members):
            if arr is not None:
                return arr.shape[0]
        raise AssertionError("agent state holds no parameters")

    @property
    def K(self) -> int:
        return self.prior.K


def make_agent(kind: str, prior: EnvModel, batch_size: int = 1, rng: RngStream | None = None,
               n_members: int = 10, resample_threshold: float = 0.5) -> AgentState:
    """Initial agent parameters computed from the prior.

    ``rng`` is required for ensembles: it draws the initial members and later
    drives resampling.
    """
    if kind not in AGENT_KINDS:
        raise ValueError(f"unknown agent kind {kind!r}; expected one of {AGENT_KINDS}")
    B, K = batch_size, prior.K
    if kind == "ensemble":
        if rng is None:
            raise ValueError("ensemble agents need an RngStream")
        if n_members < 1:
            raise ValueError("ensemble needs at least one member")
        if prior.kind == "independent_beta":
            members = rng.beta(prior.alphas, prior.betas, size=(B, n_members, K))
        else:
            idx = rng.choice(len(prior.weights), p=prior.weights, size=(B, n_members))
            members = np.array(prior.hypotheses[idx])
        return AgentState(kind, prior, members=members,
                          member_log_w=np.full((B, n_members), -np.log(n_members)),
                          rng=rng, resample_threshold=resample_threshold)
    if prior.kind == "independent_beta":
        return AgentState(kind, prior, alpha=np.tile(prior.alphas, (B, 1)),
                          beta=np.tile(prior.betas, (B, 1)), rng=rng)
    with np.errstate(divide="ignore"):
        lw = np.log(prior.weights)
    return AgentState(kind, prior, log_w=np.tile(lw, (B, 1)), rng=rng)


def _normalized(log_w: np.ndarray) -> np.ndarray:
    w = np.exp(log_w - log_w.max(axis=-1, keepdims=True))
    return w / w.sum(axis=-1, keepdims=True)


def hypothesis_weights(state: AgentState) -> np.ndarray:
    """(B, H) posterior weights for finite-hypothesis agents."""
    if state.log_w is None:
        raise ValueError("agent does not track hypothesis weights")
    return _normalized(state.log_w)


def marginal_means(state: AgentState) -> np.ndarray:
    """(B, K) posterior predictive P(Y_k = 1) for each arm."""
    if state.members is not None:
        return np.einsum("bm,bmk->bk", _normalized(state.member_log_w), state.members)
    if state.alpha is not None:
        return state.alpha / (state.alpha + state.beta)
    return _normalized(state.log_w) @ state.prior.hypotheses


def sample_categorical(weights: np.ndarray, rng: RngStream) -> np.ndarray:
    """One index per row of a (B, n) weight matrix, by inverse CDF."""
    cw = np.cumsum(weights, axis=1)
    cw /= cw[:, -1:]
    cw[:, -1] = 1.0
    u = rng.random(weights.shape[0])
    return (cw <= u[:, None]).sum(axis=1)


def sample_latent_means(state: AgentState, rng: RngStream) -> np.ndarray:
    """(B, K) arm means q such that the agent's imagined rows are i.i.d. Ber(q)."""
    if state.kind == "marginal_product":
        return marginal_means(state)
    if state.members is not None:
        idx = sample_categorical(_normalized(state.member_log_w), rng)
        return state.members[np.arange(state.batch_size), idx]
    if state.alpha is not None:
        return rng.beta(state.alpha, state.beta)
    idx = sample_categorical(_normalized(state.log_w), rng)
    return np.array(state.prior.hypotheses[idx])


def predict_counts(state: AgentState, tau: int, rng: RngStream) -> np.ndarray:
    """(B, K) column sums of a tau x K imagined matrix.

    Column sums are sufficient for every downstream Bayes update on Bernoulli
    arms, so the bandit runner never materializes the full matrix.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    q = sample_latent_means(state, rng)
    return rng.binomial(tau, q)


def predict_joint_batch(state: AgentState, tau: int, rng: RngStream) -> np.ndarray:
    """(B, tau, K) imagined binary outcomes."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    q = sample_latent_means(state, rng)
    u = rng.random((state.batch_size, tau, state.K))
    return (u < q[:, None, :]).astype(np.int8)


def predict_joint(state: AgentState, tau: int, rng: RngStream) -> ImaginedOutcomes:
    _require_single(state)
    return ImaginedOutcomes(predict_joint_batch(state, tau, rng)[0])


def _require_single(state: AgentState):
    if state.batch_size != 1:
        raise ValueError("operation needs a single agent (batch size 1)")


def _bernoulli_loglik(counts: np.ndarray, n: int, q: np.ndarray) -> np.ndarray:
    """sum_k log P(column k has counts[k] ones in a fixed order | q_k).

    ``counts`` (..., K) broadcasts against ``q`` (..., K).
    """
    return (xlogy(counts, q) + xlogy(n - counts, 1.0 - q)).sum(axis=-1)


def imagined_matrices(tau: int, K: int) -> np.ndarray:
    """All (2^(tau*K), tau, K) binary matrices in row-major lexicographic order."""
    bits = np.array(list(itertools.product((0, 1), repeat=tau * K)), dtype=np.int8)
    return bits.reshape(-1, tau, K)


def _matrix_keys(Y: np.ndarray) -> list:
    """``ImaginedOutcomes.key()`` for every matrix in a (S, tau, K) stack."""
    return [tuple(map(tuple, m)) for m in Y.tolist()]


def joint_pmf(state: AgentState, tau: int) -> FinitePmf:
    """Exact law of ``predict_joint`` over {0,1}^(tau x K).

    Outcomes are tuples of row tuples (see ``ImaginedOutcomes.key``).
    """
    _require_single(state)
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if tau * state.K > ENUMERATION_CUTOFF_BITS:
        raise ValueError(f"tau*K = {tau * state.K} exceeds enumeration cutoff {ENUMERATION_CUTOFF_BITS}")
    Y = imagined_matrices(tau, state.K)
    s = Y.sum(axis=1).astype(float)                       # (S, K)
    if state.kind == "marginal_product":
        logp = _bernoulli_loglik(s, tau, marginal_means(state)[0])
    elif state.members is not None:
        lw = state.member_log_w[0] - logsumexp(state.member_log_w[0])
        logp = logsumexp(lw[None, :] + _bernoulli_loglik(s[:, None, :], tau, state.members[0][None]), axis=1)
    elif state.alpha is not None:
        a, b = state.alpha[0], state.beta[0]
        logp = (betaln(a + s, b + tau - s) - betaln(a, b)).sum(axis=1)
    else:
        lw = state.log_w[0] - logsumexp(state.log_w[0])
        logp = logsumexp(lw[None, :] + _bernoulli_loglik(s[:, None, :], tau, state.prior.hypotheses[None]), axis=1)
    p = np.exp(logp)
    return FinitePmf(_matrix_keys(Y), p / p.sum())


def update(state: AgentState, arm, reward) -> AgentState:
    """Posterior after observing ``reward`` on ``arm``.

    ``arm`` and ``reward`` may be scalars (single agent) or length-B arrays.
    """
    B = state.batch_size
    arm = np.broadcast_to(np.asarray(arm, dtype=np.int64), (B,))
    reward = np.broadcast_to(np.asarray(reward), (B,))
    if np.any((arm < 0) | (arm >= state.K)):
        raise IndexError(f"arm index out of range for K={state.K}")
    if np.any((reward != 0) & (reward != 1)):
        raise ValueError("rewards must be 0 or 1")
    if state.kind == "static_prior":
        return state
    rows = np.arange(B)
    r = reward.astype(float)

    if state.members is not None:
        q = state.members[rows, :, arm]                                     # (B, M)
        lw = state.member_log_w + xlogy(r[:, None], q) + xlogy(1 - r[:, None], 1 - q)
        if np.any(np.all(np.isneginf(lw), axis=1)):
            raise ContradictionError("every ensemble member assigns zero probability to the observation")
        lw = lw - logsumexp(lw, axis=1, keepdims=True)
        members = state.members
        w = np.exp(lw)
        M = w.shape[1]
        ess = 1.0 / (w ** 2).sum(axis=1)
        low = ess < state.resample_threshold * M
        if np.any(low):
            idx = _multinomial_resample(w[low], M, state.rng)
            members = members.copy()
            sub = members[low]
            members[low] = sub[np.arange(sub.shape[0])[:, None], idx]
            lw = lw.copy()
            lw[low] = -np.log(M)
        return replace(state, members=members, member_log_w=lw)

    if state.alpha is not None:
        alpha, beta = state.alpha.copy(), state.beta.copy()
        alpha[rows, arm] += r
        beta[rows, arm] += 1 - r
        return replace(state, alpha=alpha, beta=beta)

    q = state.prior.hypotheses[:, arm].T                                    # (B, H)
    lw = state.log_w + xlogy(r[:, None], q) + xlogy(1 - r[:, None], 1 - q)
    dead = np.all(np.isneginf(lw), axis=1)
    if np.any(dead):
        raise ContradictionError(
            f"observation reward={int(reward[dead][0])} on arm {int(arm[dead][0])} has zero likelihood "
            "under every hypothesis (use delta > 0)")
    return replace(state, log_w=lw - logsumexp(lw, axis=1, keepdims=True))


def _multinomial_resample(w: np.ndarray, M: int, rng: RngStream) -> np.ndarray:
    """(n, M) member indices drawn i.i.d. from each row of ``w``."""
    cw = np.cumsum(w, axis=1)
    cw /= cw[:, -1:]
    cw[:, -1] = 1.0
    u = rng.random((w.shape[0], M))
    return (cw[:, None, :] <= u[:, :, None]).sum(axis=2)


def observe_history(state: AgentState, history) -> AgentState:
    for arm, reward in history:
        state = update(state, arm, reward)
    return state


def true_predictive_joint(prior: EnvModel, history, tau: int) -> FinitePmf:
    """P(Ỹ_{1:tau} | H_t) by Bayes' rule on the full history at once.

    Built independently of ``update`` so it can check the incremental agents.
    """
    K = prior.K
    if tau * K > ENUMERATION_CUTOFF_BITS:
        raise ValueError("enumeration cutoff exceeded")
    succ = np.zeros(K)
    fail = np.zeros(K)
    for arm, reward in history:
        succ[arm] += reward
        fail[arm] += 1 - reward
    Y = imagined_matrices(tau, K)
    s = Y.sum(axis=1).astype(float)
    if prior.kind == "independent_beta":
        a, b = prior.alphas, prior.betas
        # P(history, Y) / P(history), both as Beta-function ratios
        logp = (betaln(a + succ + s, b + fail + tau - s) - betaln(a + succ, b + fail)).sum(axis=1)
    else:
        P = prior.hypotheses
        with np.errstate(divide="ignore"):
            log_joint_h = np.log(prior.weights) + _bernoulli_loglik(succ[None], succ + fail, P)
        logp = logsumexp(log_joint_h[None, :] + _bernoulli_loglik(s[:, None, :], tau, P[None]), axis=1) \
            - logsumexp(log_joint_h)
    p = np.exp(logp)
    return FinitePmf(_matrix_keys(Y), p / p.sum())
