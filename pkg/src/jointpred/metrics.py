"""Joint-prediction metrics: tau-th order cross-entropy, expected KL, and the
decision-quality certificate derived from them.

A ``PredictiveScenario`` is described by finite pmfs so the same object can be
evaluated exactly (enumeration) or by Monte Carlo.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Hashable

import numpy as np

from .envs import coin_sequence_pmf
from .prob_core import FinitePmf, RngStream, binary_sequences, kl_divergence, sample

ENUMERATION_CUTOFF = 2 ** 20


@dataclass(frozen=True)
class PredictiveScenario:
    """Generative description of (environment, training data, test targets, agent).

    env_prior:   pmf over environment identifiers
    data_pmf:    (env, horizon) -> pmf over training datasets D_T
    target_pmf:  (env, tau) -> pmf over test label sequences Y_{T+1:T+tau}
    agent:       (dataset, tau) -> the agent's joint pmf over label sequences
    Test inputs are fixed per scenario, so they do not appear explicitly.
    """

    env_prior: FinitePmf
    data_pmf: Callable[[Hashable, int], FinitePmf]
    target_pmf: Callable[[Hashable, int], FinitePmf]
    agent: Callable[[Hashable, int], FinitePmf]
    tau: int = 1
    horizon: int = 0

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")

    def with_agent(self, agent) -> "PredictiveScenario":
        return PredictiveScenario(self.env_prior, self.data_pmf, self.target_pmf, agent, self.tau, self.horizon)

    def posterior_joint(self, dataset) -> FinitePmf:
        """P̄: the Bayes posterior predictive of the targets given ``dataset``."""
        w = np.array([pe * self.data_pmf(e, self.horizon)[dataset]
                      for e, pe in zip(self.env_prior.outcomes, self.env_prior.probs)])
        if w.sum() <= 0:
            raise ValueError(f"dataset {dataset!r} has zero probability")
        w = w / w.sum()
        comps = [self.target_pmf(e, self.tau) for e in self.env_prior.outcomes]
        outcomes = comps[0].outcomes
        probs = sum(wi * c.aligned_to(outcomes).probs for wi, c in zip(w, comps) if wi > 0)
        return FinitePmf(outcomes, probs)

    def dataset_pmf(self) -> FinitePmf:
        """Marginal law of D_T."""
        acc: dict = {}
        for e, pe in zip(self.env_prior.outcomes, self.env_prior.probs):
            if pe == 0:
                continue
            d = self.data_pmf(e, self.horizon)
            for o, po in zip(d.outcomes, d.probs):
                acc[o] = acc.get(o, 0.0) + pe * po
        return FinitePmf.from_dict(acc)


@dataclass(frozen=True)
class DecisionProblem:
    actions: tuple
    reward: Callable[[Hashable, Hashable], float]
    outcome_space: tuple

    def reward_matrix(self) -> np.ndarray:
        """(|A|, |Y|) rewards; raises if any lies outside [0, 1]."""
        R = np.array([[float(self.reward(a, y)) for y in self.outcome_space] for a in self.actions])
        if R.size and (R.min() < 0 or R.max() > 1):
            raise ValueError("rewards must lie in [0, 1]")
        return R


@dataclass(frozen=True)
class MetricEstimate:
    mean: float
    se: float
    n: int
    n_infinite: int = 0


@dataclass(frozen=True)
class GapCertificate:
    gap: float
    bound: float
    holds: bool
    agent_action: Hashable
    best_action: Hashable


def exact_dkl_tau(posterior_joint: FinitePmf, agent_joint: FinitePmf) -> float:
    """KL(P̄ || P̂) for a single realization of the data and agent parameters."""
    return kl_divergence(posterior_joint, agent_joint)


def exact_metrics(scenario: PredictiveScenario) -> dict:
    """Enumerated d_CE^tau, d_KL^tau and the agent-independent offset.

    Returns ``{"d_ce", "d_kl", "neg_log_posterior"}``; the identity
    d_KL = d_CE - E[-ln P̄(Y)] holds term by term.
    """
    data = scenario.dataset_pmf()
    n_cells = len(data) * len(scenario.target_pmf(scenario.env_prior.outcomes[0], scenario.tau))
    if n_cells > ENUMERATION_CUTOFF:
        raise ValueError(f"{n_cells} table entries exceed the enumeration cutoff {ENUMERATION_CUTOFF}")
    d_ce = d_kl = h_post = 0.0
    for dset, pd in zip(data.outcomes, data.probs):
        if pd == 0:
            continue
        post = scenario.posterior_joint(dset)
        agent = scenario.agent(dset, scenario.tau).aligned_to(post.outcomes)
        d_kl += pd * exact_dkl_tau(post, agent)
        pos = post.probs > 0
        with np.errstate(divide="ignore"):
            d_ce += pd * float(-(post.probs[pos] * np.log(agent.probs[pos])).sum())
        h_post += pd * float(-(post.probs[pos] * np.log(post.probs[pos])).sum())
    return {"d_ce": d_ce, "d_kl": d_kl, "neg_log_posterior": h_post}


def mc_cross_entropy(scenario: PredictiveScenario, n_samples: int, rng: RngStream) -> MetricEstimate:
    """Monte-Carlo d_CE^tau: mean of -ln P̂(Y) over draws of (env, D_T, Y).

    Draws where the agent gives the observed targets zero probability are
    counted in ``n_infinite`` and make the estimate infinite.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    losses = np.empty(n_samples)
    n_inf = 0
    agent_cache: dict = {}
    for i in range(n_samples):
        env = sample(scenario.env_prior, rng)
        dset = sample(scenario.data_pmf(env, scenario.horizon), rng)
        y = sample(scenario.target_pmf(env, scenario.tau), rng)
        if dset not in agent_cache:
            agent_cache[dset] = scenario.agent(dset, scenario.tau)
        q = agent_cache[dset][y]
        if q <= 0:
            n_inf += 1
            losses[i] = math.inf
        else:
            losses[i] = -math.log(q)
    if n_inf:
        return MetricEstimate(math.inf, math.inf, n_samples, n_inf)
    se = float(losses.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else math.inf
    return MetricEstimate(float(losses.mean()), se, n_samples, 0)


def universality_gap(dp: DecisionProblem, posterior_joint: FinitePmf, agent_joint: FinitePmf) -> GapCertificate:
    """Reward lost by acting on the agent's joint instead of the posterior.

    The agent's action maximizes expected reward under ``agent_joint`` (ties
    to the smallest index); the certificate checks the loss against
    sqrt(2 KL(posterior || agent)).
    """
    if not dp.actions:
        raise ValueError("action set is empty")
    R = dp.reward_matrix()
    post = posterior_joint.aligned_to(dp.outcome_space).probs
    agent = agent_joint.aligned_to(dp.outcome_space).probs
    v_post = R @ post
    v_agent = R @ agent
    a_hat = int(np.argmax(v_agent))
    a_star = int(np.argmax(v_post))
    gap = float(v_post[a_star] - v_post[a_hat])
    bound = math.sqrt(2.0 * exact_dkl_tau(posterior_joint.aligned_to(dp.outcome_space),
                                          agent_joint.aligned_to(dp.outcome_space)))
    return GapCertificate(gap, bound, gap <= bound + 1e-10, dp.actions[a_hat], dp.actions[a_star])


# ---------------------------------------------------------------------------
# Ready-made scenarios
# ---------------------------------------------------------------------------

def coin_scenario(prior: FinitePmf, agent, tau: int, horizon: int = 0) -> PredictiveScenario:
    """Coin tossing with bias drawn from ``prior`` (a pmf over p values).

    Datasets are the 0/1 tuples of the first ``horizon`` tosses; targets are
    the next ``tau`` tosses.
    """
    def data_pmf(p, n):
        return coin_sequence_pmf(p, n) if n > 0 else FinitePmf([()], [1.0])

    def target_pmf(p, t):
        return coin_sequence_pmf(p, t)

    return PredictiveScenario(prior, data_pmf, target_pmf, agent, tau, horizon)


def bayes_coin_agent(prior: FinitePmf):
    """Agent whose joint is the exact posterior predictive under ``prior``."""

    def agent(dataset, tau):
        heads = sum(dataset)
        n = len(dataset)
        w = np.array([pe * p ** heads * (1 - p) ** (n - heads) for p, pe in zip(prior.outcomes, prior.probs)])
        w = w / w.sum()
        seqs = binary_sequences(tau)
        probs = np.zeros(len(seqs))
        for wi, p in zip(w, prior.outcomes):
            probs += wi * coin_sequence_pmf(p, tau).probs
        return FinitePmf(seqs, probs)

    return agent


def fixed_agent(joint_for_tau):
    """Agent that ignores data and returns ``joint_for_tau(tau)``."""
    return lambda dataset, tau: joint_for_tau(tau)


def random_decision_problem(rng: RngStream, max_actions: int = 5, max_tau: int = 3,
                            zero_prob: float = 0.2):
    """Random (DecisionProblem, posterior joint, agent joint) over {0,1}^tau.

    Rewards are Uniform[0, 1]. Each agent cell is zeroed with probability
    ``zero_prob`` so infinite-KL cases are exercised too.
    """
    g = rng.generator
    tau = int(g.integers(1, max_tau + 1))
    n_actions = int(g.integers(1, max_actions + 1))
    seqs = binary_sequences(tau)
    R = g.random((n_actions, len(seqs)))
    post = FinitePmf(seqs, g.dirichlet(np.ones(len(seqs))))
    q = g.dirichlet(np.ones(len(seqs))) * (g.random(len(seqs)) >= zero_prob)
    if q.sum() == 0:
        q[int(g.integers(len(seqs)))] = 1.0
    agent = FinitePmf(seqs, q / q.sum())
    index = {s: i for i, s in enumerate(seqs)}
    dp = DecisionProblem(tuple(range(n_actions)), lambda a, y: R[a, index[y]], tuple(seqs))
    return dp, post, agent


def recommender_certificate(inst) -> GapCertificate:
    """Universality certificate for picking K_select movies from the joint vs the marginal product.

    Reward is 1 when the user enjoys at least one chosen movie. The agent is
    the product of per-movie marginals.
    """
    actions = tuple(itertools.combinations(range(inst.n_movies), inst.K_select))
    outcomes = tuple(binary_sequences(inst.n_movies))
    dp = DecisionProblem(actions, lambda a, y: float(any(y[i] for i in a)), outcomes)
    return universality_gap(dp, inst.outcome_joint(), inst.marginal_product_joint())
