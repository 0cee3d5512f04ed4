"""Approximate Thompson sampling on Bernoulli bandits, baselines, and regret.

Replications are simulated in fixed-size blocks. Each block draws from its own
``RngStream`` family (ids derived from the block index and a role), so results
do not depend on how many worker threads process the blocks or in what order.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from . import agents as ag
from .agents import AgentState, ImaginedOutcomes
from .envs import EnvModel, SampledEnv, env_sample_batch
from .prob_core import RngStream, kl_divergence

POLICIES = ("approx_ts", "exact_ts", "greedy_marginal", "uniform_random")
VARIANTS = ("posterior_sample", "sample_mean")
BLOCK_SIZE = 1000
GREEDY_TIE_TOL = 1e-12

# stream roles inside a replication block
_ENV, _AGENT, _POLICY = 0, 1, 2
_ROLES = 4


def block_stream(master_seed: int, block: int, role: int) -> RngStream:
    return RngStream(master_seed, block * _ROLES + role)


def min_argmax(values) -> np.ndarray | int:
    """Smallest index attaining the maximum, along the last axis."""
    values = np.asarray(values)
    # np.argmax already returns the first maximizer under exact comparison
    idx = np.argmax(values, axis=-1)
    return int(idx) if values.ndim == 1 else idx


@dataclass
class BanditHistory:
    K: int
    steps: list = field(default_factory=list)

    def append(self, arm: int, reward: int):
        if not (0 <= arm < self.K):
            raise IndexError(f"arm {arm} out of range")
        if reward not in (0, 1):
            raise ValueError("reward must be 0 or 1")
        self.steps.append((int(arm), int(reward)))

    def __iter__(self):
        return iter(self.steps)

    def __len__(self):
        return len(self.steps)


@dataclass
class TsStepRecord:
    imagined: ImaginedOutcomes | None
    p_hat: np.ndarray
    action: int
    reward: int | None = None


# ---------------------------------------------------------------------------
# Approximate TS building blocks
# ---------------------------------------------------------------------------

def posterior_given_counts(prior: EnvModel, counts: np.ndarray, tau: int, rng: RngStream):
    """Draw p from the prior conditioned on imagined column sums.

    ``counts`` is (B, K). Returns ``(p, n_contradictions)`` where ``p`` is
    (B, K) and ``n_contradictions`` counts rows where every hypothesis had zero
    likelihood and the prior weights were used instead.
    """
    counts = np.asarray(counts, dtype=float)
    if prior.kind == "independent_beta":
        return rng.beta(prior.alphas + counts, prior.betas + tau - counts), 0
    P = prior.hypotheses
    with np.errstate(divide="ignore"):
        log_prior = np.log(prior.weights)
    loglik = (xlogy(counts[:, None, :], P[None]) + xlogy(tau - counts[:, None, :], 1.0 - P[None])).sum(axis=2)
    lw = log_prior[None, :] + loglik
    dead = np.all(np.isneginf(lw), axis=1)
    if np.any(dead):
        lw[dead] = log_prior
    w = np.exp(lw - lw.max(axis=1, keepdims=True))
    idx = ag.sample_categorical(w, rng)
    return np.array(P[idx]), int(dead.sum())


class ContradictionCounter:
    def __init__(self):
        self.count = 0


def conditional_posterior_given_imagined(prior: EnvModel, imagined: ImaginedOutcomes, rng: RngStream,
                                         counter: ContradictionCounter | None = None) -> SampledEnv:
    """Sample p ~ P(p | Ỹ_{1:tau} = imagined) under the true prior."""
    if imagined.K != prior.K:
        raise ValueError(f"imagined outcomes have {imagined.K} arms, prior has {prior.K}")
    p, bad = posterior_given_counts(prior, imagined.column_sums()[None, :], imagined.tau, rng)
    if counter is not None:
        counter.count += bad
    return SampledEnv(tuple(float(x) for x in p[0]))


def approx_ts_step(agent: AgentState, prior: EnvModel, tau: int, variant: str, rng: RngStream) -> TsStepRecord:
    """One action choice of approximate Thompson sampling for a single agent."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    imagined = ag.predict_joint(agent, tau, rng)
    if variant == "posterior_sample":
        p_hat = np.array(conditional_posterior_given_imagined(prior, imagined, rng).p)
    else:
        p_hat = imagined.matrix.mean(axis=0)
    return TsStepRecord(imagined, p_hat, min_argmax(p_hat))


def theorem2_bound(K: int, T: int, tau: float, epsilon: float) -> float:
    """sqrt(K T ln K / 2) + (K / sqrt(2 tau) + sqrt(2 epsilon)) T.

    ``tau`` may be ``math.inf`` (exact Thompson sampling).
    """
    if K < 2 or T < 1 or tau < 1 or epsilon < 0:
        raise ValueError("need K >= 2, T >= 1, tau >= 1, epsilon >= 0")
    target_term = 0.0 if math.isinf(tau) else K / math.sqrt(2.0 * tau)
    return math.sqrt(0.5 * K * T * math.log(K)) + (target_term + math.sqrt(2.0 * epsilon)) * T


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    se: float
    n: int

    def __float__(self):
        return self.mean


def target_suboptimality(env_model: EnvModel, tau: int, n_mc: int, rng: RngStream) -> MCEstimate:
    """Monte-Carlo E[p_{A*} - p_Ã] for the learning target Ã.

    p ~ prior, Ỹ_{1:tau} ~ p (as column sums), p̃ ~ P(p | Ỹ), Ã = min argmax p̃.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    p = env_sample_batch(env_model, n_mc, rng)
    counts = rng.binomial(tau, p)
    p_tilde, _ = posterior_given_counts(env_model, counts, tau, rng)
    rows = np.arange(n_mc)
    gap = p[rows, min_argmax(p)] - p[rows, min_argmax(p_tilde)]
    se = float(gap.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else math.inf
    return MCEstimate(float(gap.mean()), se, n_mc)


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BanditConfig:
    env_model: EnvModel
    policy: str = "approx_ts"
    agent_kind: str = "exact_posterior"
    T: int = 100
    tau: int = 16
    variant: str = "posterior_sample"
    n_replications: int = 100
    master_seed: int = 0
    n_members: int = 10
    resample_threshold: float = 0.5
    greedy_tie_break: str = "random"
    epsilon: float = 0.0
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.agent_kind not in ag.AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.agent_kind!r}")
        if self.policy == "exact_ts" and self.agent_kind != "exact_posterior":
            raise ValueError("exact_ts requires the exact_posterior agent")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.greedy_tie_break not in ("min", "random"):
            raise ValueError("greedy_tie_break must be 'min' or 'random'")
        if self.T < 1 or self.tau < 1 or self.n_replications < 1 or self.block_size < 1:
            raise ValueError("T, tau, n_replications and block_size must be positive")


@dataclass
class RegretTrace:
    replication_id: int
    p: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    step_regret: np.ndarray

    @property
    def p_star(self) -> float:
        return float(self.p.max())

    @property
    def cum_regret(self) -> np.ndarray:
        return np.cumsum(self.step_regret)

    def rows(self):
        """(t, action, reward, step_regret, cum_regret) per step."""
        cum = self.cum_regret
        for t in range(len(self.actions)):
            yield t, int(self.actions[t]), int(self.rewards[t]), float(self.step_regret[t]), float(cum[t])


@dataclass
class _BlockResult:
    start: int
    p: np.ndarray
    actions: np.ndarray | None
    rewards: np.ndarray | None
    step_regret: np.ndarray | None
    first_pull: np.ndarray
    n: int
    cum_mean: np.ndarray
    cum_m2: np.ndarray
    contradictions: int


@dataclass
class BanditResult:
    config: BanditConfig
    p: np.ndarray                       # (R, K) realized environments
    first_pull: np.ndarray              # (R, K) first step each arm was pulled, -1 if never
    mean_cum_regret: np.ndarray         # (T,)
    se_cum_regret: np.ndarray           # (T,)
    contradictions: int
    actions: np.ndarray | None = None   # (R, T), kept when traces are requested
    rewards: np.ndarray | None = None
    step_regret: np.ndarray | None = None

    @property
    def n_replications(self) -> int:
        return self.p.shape[0]

    @property
    def regret(self) -> MCEstimate:
        return MCEstimate(float(self.mean_cum_regret[-1]), float(self.se_cum_regret[-1]), self.n_replications)

    def trace(self, i: int) -> RegretTrace:
        if self.actions is None:
            raise ValueError("run was executed without keep_traces")
        return RegretTrace(i, self.p[i], self.actions[i], self.rewards[i], self.step_regret[i])

    def traces(self):
        for i in range(self.n_replications):
            yield self.trace(i)

    def time_to_first_pull(self, arm: int) -> np.ndarray:
        """Number of pulls up to and including the first pull of ``arm`` (T+1 if never)."""
        fp = self.first_pull[:, arm]
        return np.where(fp >= 0, fp + 1, self.config.T + 1)

    def bound(self) -> float | None:
        c = self.config
        if c.policy not in ("approx_ts", "exact_ts") or c.env_model.K < 2:
            return None
        tau = math.inf if c.policy == "exact_ts" else c.tau
        return theorem2_bound(c.env_model.K, c.T, tau, c.epsilon)

    def summary(self) -> dict:
        reg = self.regret
        bound = self.bound()
        return {
            "policy": self.config.policy,
            "agent_kind": self.config.agent_kind,
            "K": self.config.env_model.K,
            "T": self.config.T,
            "tau": self.config.tau,
            "epsilon": self.config.epsilon,
            "n_replications": self.n_replications,
            "master_seed": self.config.master_seed,
            "mean_cum_regret": self.mean_cum_regret.tolist(),
            "se_cum_regret": self.se_cum_regret.tolist(),
            "final_regret": reg.mean,
            "final_regret_se": reg.se,
            "theorem2_bound": bound,
            "bound_satisfied": None if bound is None else bool(reg.mean <= bound),
            "bound_satisfied_within_5se": None if bound is None else bool(reg.mean <= bound + 5 * reg.se),
            "mean_time_to_first_pull": [float(self.time_to_first_pull(k).mean()) for k in range(self.config.env_model.K)],
            "contradictions": self.contradictions,
        }


def _choose(cfg: BanditConfig, state: AgentState | None, policy_rng: RngStream, agent_rng: RngStream, B: int):
    K = cfg.env_model.K
    if cfg.policy == "uniform_random":
        return policy_rng.integers(0, K, size=B), 0
    if cfg.policy == "exact_ts":
        return min_argmax(ag.sample_latent_means(state, policy_rng)), 0
    if cfg.policy == "greedy_marginal":
        m = ag.marginal_means(state)
        if cfg.greedy_tie_break == "min":
            return min_argmax(m), 0
        ties = m >= m.max(axis=1, keepdims=True) - GREEDY_TIE_TOL
        return ag.sample_categorical(ties.astype(float), policy_rng), 0
    counts = ag.predict_counts(state, cfg.tau, agent_rng)
    if cfg.variant == "sample_mean":
        return min_argmax(counts / cfg.tau), 0
    p_hat, bad = posterior_given_counts(cfg.env_model, counts, cfg.tau, policy_rng)
    return min_argmax(p_hat), bad


def _run_block(cfg: BanditConfig, block: int, start: int, B: int, keep_traces: bool) -> _BlockResult:
    env_rng = block_stream(cfg.master_seed, block, _ENV)
    agent_rng = block_stream(cfg.master_seed, block, _AGENT)
    policy_rng = block_stream(cfg.master_seed, block, _POLICY)
    K, T = cfg.env_model.K, cfg.T

    p = env_sample_batch(cfg.env_model, B, env_rng)
    p_star = p.max(axis=1)
    state = None
    if cfg.policy != "uniform_random":
        state = ag.make_agent(cfg.agent_kind, cfg.env_model, batch_size=B, rng=agent_rng,
                              n_members=cfg.n_members, resample_threshold=cfg.resample_threshold)
    rows = np.arange(B)
    first_pull = np.full((B, K), -1, dtype=np.int64)
    cum = np.zeros(B)
    cum_mean = np.empty(T)
    cum_m2 = np.empty(T)
    if keep_traces:
        actions = np.empty((B, T), dtype=np.int16)
        rewards = np.empty((B, T), dtype=np.int8)
        step_regret = np.empty((B, T))
    contradictions = 0

    for t in range(T):
        a, bad = _choose(cfg, state, policy_rng, agent_rng, B)
        contradictions += bad
        u = env_rng.random(B)
        pa = p[rows, a]
        r = (u < pa).astype(np.int8)
        regret_t = p_star - pa
        cum += regret_t
        mu = cum.mean()
        cum_mean[t] = mu
        cum_m2[t] = ((cum - mu) ** 2).sum()
        unseen = first_pull[rows, a] < 0
        first_pull[rows[unseen], a[unseen]] = t
        if keep_traces:
            actions[:, t] = a
            rewards[:, t] = r
            step_regret[:, t] = regret_t
        if state is not None:
            state = ag.update(state, a, r)

    return _BlockResult(start, p, actions if keep_traces else None, rewards if keep_traces else None,
                        step_regret if keep_traces else None, first_pull, B, cum_mean, cum_m2, contradictions)


def _merge_moments(blocks):
    """Chan et al. pairwise merge of per-block means and M2, in block order."""
    n, mean, m2 = 0, None, None
    for b in blocks:
        if mean is None:
            n, mean, m2 = b.n, b.cum_mean.copy(), b.cum_m2.copy()
            continue
        tot = n + b.n
        d = b.cum_mean - mean
        mean = mean + d * (b.n / tot)
        m2 = m2 + b.cum_m2 + d * d * (n * b.n / tot)
        n = tot
    return n, mean, m2


def run_bandit(cfg: BanditConfig, threads: int = 1, keep_traces: bool = False) -> BanditResult:
    """Simulate ``cfg.n_replications`` independent bandit runs.

    Each replication draws p from the prior, then plays ``cfg.T`` steps. Per-step
    regret is p_star - p_{A_t} against the realized environment.
    """
    R, bs = cfg.n_replications, cfg.block_size
    starts = list(range(0, R, bs))
    jobs = [(i, s, min(bs, R - s)) for i, s in enumerate(starts)]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            blocks = list(ex.map(lambda j: _run_block(cfg, *j, keep_traces), jobs))
    else:
        blocks = [_run_block(cfg, *j, keep_traces) for j in jobs]

    n, mean, m2 = _merge_moments(blocks)
    se = np.sqrt(m2 / (n - 1) / n) if n > 1 else np.full_like(mean, np.inf)
    cat = lambda name: np.concatenate([getattr(b, name) for b in blocks])  # noqa: E731
    return BanditResult(
        config=cfg,
        p=cat("p"),
        first_pull=cat("first_pull"),
        mean_cum_regret=mean,
        se_cum_regret=se,
        contradictions=sum(b.contradictions for b in blocks),
        actions=cat("actions") if keep_traces else None,
        rewards=cat("rewards") if keep_traces else None,
        step_regret=cat("step_regret") if keep_traces else None,
    )


def linear_fit_r2(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2 of y on x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def agent_kl_profile(env_model: EnvModel, agent_kind: str, T: int, tau: int, n_histories: int,
                     rng: RngStream, **agent_kw) -> list[MCEstimate]:
    """Empirical per-t d_KL^tau of an agent along uniformly random histories.

    For each history, p ~ prior, arms are drawn uniformly and the agent's
    exact joint over tau imagined rows is compared with the true posterior
    predictive at t = 0..T-1. Returns one MCEstimate per t. Only feasible
    when tau*K is within the enumeration cutoff.
    """
    K = env_model.K
    kls = np.zeros((n_histories, T))
    p = env_sample_batch(env_model, n_histories, rng)
    for i in range(n_histories):
        state = ag.make_agent(agent_kind, env_model, rng=rng, **agent_kw)
        history = []
        for t in range(T):
            truth = ag.true_predictive_joint(env_model, history, tau)
            kls[i, t] = kl_divergence(truth, ag.joint_pmf(state, tau))
            arm = int(rng.integers(0, K))
            reward = int(rng.random() < p[i, arm])
            history.append((arm, reward))
            state = ag.update(state, arm, reward)
    se = kls.std(axis=0, ddof=1) / math.sqrt(n_histories) if n_histories > 1 else np.full(T, math.inf)
    return [MCEstimate(float(m), float(s), n_histories) for m, s in zip(kls.mean(axis=0), se)]
