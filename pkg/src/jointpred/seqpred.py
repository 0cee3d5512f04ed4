"""Sequential prediction with incrementally updated agents.

Inputs X_0..X_{T-1} are fixed constants, so the dataset D_t is represented by
the label prefix Y_{1:t}. ``enumerate_joint`` builds the exact joint law of
(env, Y_1..Y_T, theta_0..theta_T) and everything else reads off it.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np

from .prob_core import FinitePmf, JointPmf, RngStream, kl_array, mutual_information

ENUMERATION_CUTOFF = 10 ** 7
HOLD_TOL = 1e-9


@dataclass(frozen=True)
class SeqPredProblem:
    """Prior over environments with fixed inputs.

    ``label_probs[e, t, y]`` is P(Y_{t+1} = labels[y] | env e, X_t).
    """

    weights: np.ndarray
    label_probs: np.ndarray
    labels: tuple = (0, 1)
    inputs: tuple = ()
    env_names: tuple = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        L = np.asarray(self.label_probs, dtype=float)
        if L.ndim != 3 or L.shape[0] != w.size or L.shape[2] != len(self.labels):
            raise ValueError("label_probs must have shape (n_envs, T, n_labels)")
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError("environment weights must sum to 1")
        if np.any(L < 0) or np.any(np.abs(L.sum(axis=2) - 1) > 1e-12):
            raise ValueError("every label pmf must be valid")
        object.__setattr__(self, "weights", w / w.sum())
        object.__setattr__(self, "label_probs", L / L.sum(axis=2, keepdims=True))
        if not self.inputs:
            object.__setattr__(self, "inputs", tuple(range(L.shape[1])))
        if not self.env_names:
            object.__setattr__(self, "env_names", tuple(f"env{i}" for i in range(w.size)))

    @classmethod
    def from_envs(cls, env_support: Sequence[tuple[float, Callable]], inputs: Sequence[Hashable],
                  labels: Sequence[Hashable] = (0, 1)):
        """Build from (weight, env) pairs where ``env(x)`` is a FinitePmf over labels."""
        L = np.array([[env(x).aligned_to(labels).probs for x in inputs] for _, env in env_support])
        return cls(np.array([w for w, _ in env_support]), L, tuple(labels), tuple(inputs))

    @property
    def n_envs(self) -> int:
        return self.weights.size

    @property
    def T(self) -> int:
        return self.label_probs.shape[1]

    @property
    def n_labels(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class IncrementalAgent:
    """Agent whose next state depends only on (state, input, label, t).

    ``kernel[t, s, y, s2]`` = P(theta_{t+1} = s2 | theta_t = s, X_t, Y_{t+1} = y)
    ``predictor[t, s, y]`` = the agent's P̂(Y_{t+1} = y | theta_t = s, X_t)
    """

    init: np.ndarray
    kernel: np.ndarray
    predictor: np.ndarray
    state_names: tuple = ()

    def __post_init__(self):
        init = np.asarray(self.init, dtype=float)
        K = np.asarray(self.kernel, dtype=float)
        P = np.asarray(self.predictor, dtype=float)
        S = init.size
        if K.ndim != 4 or K.shape[1] != S or K.shape[3] != S:
            raise ValueError("kernel must have shape (T, n_states, n_labels, n_states)")
        if P.shape != (K.shape[0], S, K.shape[2]):
            raise ValueError("predictor must have shape (T, n_states, n_labels)")
        for name, arr, ax in (("init", init, 0), ("kernel", K, 3), ("predictor", P, 2)):
            if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=ax) - 1) > 1e-12):
                raise ValueError(f"{name} rows must be valid pmfs")
        object.__setattr__(self, "init", init)
        object.__setattr__(self, "kernel", K)
        object.__setattr__(self, "predictor", P)
        if not self.state_names:
            object.__setattr__(self, "state_names", tuple(range(S)))

    @property
    def n_states(self) -> int:
        return self.init.size

    def with_predictor(self, predictor) -> "IncrementalAgent":
        return IncrementalAgent(self.init, self.kernel, predictor, self.state_names)


def _check_compatible(problem: SeqPredProblem, agent: IncrementalAgent):
    if agent.kernel.shape[0] != problem.T or agent.kernel.shape[2] != problem.n_labels:
        raise ValueError("agent kernel does not match the problem horizon / label set")


def joint_size(problem: SeqPredProblem, agent: IncrementalAgent) -> int:
    return problem.n_envs * problem.n_labels ** problem.T * agent.n_states ** (problem.T + 1)


def axis_names(T: int) -> list[str]:
    return ["env"] + [f"Y{i}" for i in range(1, T + 1)] + [f"theta{i}" for i in range(T + 1)]


def enumerate_joint(problem: SeqPredProblem, agent: IncrementalAgent,
                    cutoff: int = ENUMERATION_CUTOFF) -> JointPmf:
    """Exact joint pmf of (env, Y_1..Y_T, theta_0..theta_T)."""
    _check_compatible(problem, agent)
    size = joint_size(problem, agent)
    if size > cutoff:
        raise ValueError(f"joint table has {size} entries, above the enumeration cutoff {cutoff}")
    E, T, L, S = problem.n_envs, problem.T, problem.n_labels, agent.n_states
    # running shape: (env, label prefix, earlier states, current state)
    arr = (problem.weights[:, None] * agent.init[None, :])[:, None, None, :]
    for t in range(T):
        nxt = np.einsum("eaps,ey,syz->eaypsz", arr, problem.label_probs[:, t, :], agent.kernel[t])
        e, a, y, p, s, z = nxt.shape
        arr = nxt.reshape(e, a * y, p * s, z)
    arr = arr.reshape((E,) + (L,) * T + (S,) * (T + 1))
    values = [problem.env_names] + [problem.labels] * T + [agent.state_names] * (T + 1)
    return JointPmf(axis_names(T), values, arr)


def _y(t0: int, t1: int) -> list[str]:
    """Names of labels Y_{t0}..Y_{t1} inclusive."""
    return [f"Y{i}" for i in range(t0, t1 + 1)]


def _posterior_predictive(problem: SeqPredProblem, joint: JointPmf, t: int) -> np.ndarray:
    """(L^t, L) matrix of P(Y_{t+1} | Y_{1:t}); rows for impossible prefixes are uniform."""
    m = joint._flat([_y(1, t), ["env"]])                         # (prefix, env)
    nxt = m @ problem.label_probs[:, t, :]                      # (prefix, L)
    tot = nxt.sum(axis=1, keepdims=True)
    return np.where(tot > 0, nxt / np.where(tot > 0, tot, 1), 1.0 / problem.n_labels)


def _expected_kl(weights: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    """sum of weights * KL(p || q) over matching leading axes, ignoring zero weights."""
    kl = kl_array(p, q)
    pos = weights > 0
    return float((weights[pos] * kl[pos]).sum())


@dataclass(frozen=True)
class CumulativeKL:
    total: float
    per_step: tuple
    infinite_steps: tuple


def cumulative_kl(problem: SeqPredProblem, agent: IncrementalAgent, start: int = 0,
                  joint: JointPmf | None = None) -> CumulativeKL:
    """Sum over t >= start of E[KL(P(Y_{t+1} | D_t) || predictor(theta_t, X_t))]."""
    joint = enumerate_joint(problem, agent) if joint is None else joint
    per_step = []
    for t in range(start, problem.T):
        post = _posterior_predictive(problem, joint, t)                   # (A, L)
        w = joint._flat([_y(1, t), [f"theta{t}"]])                        # (A, S)
        per_step.append(_expected_kl(w, post[:, None, :], agent.predictor[t][None, :, :]))
    inf_steps = tuple(start + i for i, v in enumerate(per_step) if np.isinf(v))
    return CumulativeKL(float(sum(per_step)), tuple(per_step), inf_steps)


def _mi(joint: JointPmf, a, b, c=()) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return float(mutual_information(joint, a, b, c))


@dataclass(frozen=True)
class Theorem1Check:
    t: int
    epsilon: float
    I_theta: float
    I_data: float
    holds: bool
    data_processing: bool

    def to_dict(self) -> dict:
        return {"t": self.t, "epsilon": self.epsilon, "I_theta": self.I_theta, "I_data": self.I_data,
                "holds": self.holds, "data_processing": self.data_processing}


def verify_theorem1(problem: SeqPredProblem, agent: IncrementalAgent, t: int,
                    joint: JointPmf | None = None) -> Theorem1Check:
    """Check I(Y_{t+1:T}; theta_t) >= I(Y_{t+1:T}; D_t) - epsilon.

    epsilon is the agent's remaining cumulative KL from step t on. With t = 0
    the dataset is empty and I(Y; D_0) = 0.
    """
    if not (0 <= t < problem.T):
        raise ValueError(f"t must lie in [0, {problem.T - 1}]")
    joint = enumerate_joint(problem, agent) if joint is None else joint
    eps = cumulative_kl(problem, agent, start=t, joint=joint).total
    future = _y(t + 1, problem.T)
    i_theta = _mi(joint, future, [f"theta{t}"])
    i_data = _mi(joint, future, _y(1, t)) if t > 0 else 0.0
    return Theorem1Check(t, eps, i_theta, i_data,
                         holds=bool(i_theta >= i_data - eps - HOLD_TOL),
                         data_processing=bool(i_data >= i_theta - HOLD_TOL))


def induced_predictor(joint: JointPmf, problem: SeqPredProblem, t: int) -> np.ndarray:
    """(S, L) matrix of P(Y_{t+1} | theta_t) read off the joint; unreachable states get uniform rows."""
    m = joint._flat([[f"theta{t}"], [f"Y{t + 1}"]])
    tot = m.sum(axis=1, keepdims=True)
    return np.where(tot > 0, m / np.where(tot > 0, tot, 1), 1.0 / problem.n_labels)


@dataclass(frozen=True)
class Lemma3Check:
    induced_kl: float
    candidate_kls: tuple
    holds: bool


def expected_predictor_kl(problem: SeqPredProblem, joint: JointPmf, t: int, q: np.ndarray) -> float:
    """E[KL(P(Y_{t+1} | D_t) || q(theta_t))] for an (S, L) predictor matrix ``q``."""
    post = _posterior_predictive(problem, joint, t)
    w = joint._flat([_y(1, t), [f"theta{t}"]])
    return _expected_kl(w, post[:, None, :], np.asarray(q)[None, :, :])


def verify_lemma3(problem: SeqPredProblem, agent: IncrementalAgent, t: int,
                  candidate_predictors: Sequence[np.ndarray], joint: JointPmf | None = None) -> Lemma3Check:
    """The induced conditional P(Y_{t+1} | theta_t) beats every candidate predictor."""
    joint = enumerate_joint(problem, agent) if joint is None else joint
    base = expected_predictor_kl(problem, joint, t, induced_predictor(joint, problem, t))
    cands = tuple(expected_predictor_kl(problem, joint, t, q) for q in candidate_predictors)
    return Lemma3Check(base, cands, all(c >= base - HOLD_TOL for c in cands))


# ---------------------------------------------------------------------------
# Information identities
# ---------------------------------------------------------------------------

def _conditional_table(m: np.ndarray) -> np.ndarray:
    """Normalize the last axis of a joint table into conditionals (uniform where empty)."""
    tot = m.sum(axis=-1, keepdims=True)
    return np.where(tot > 0, m / np.where(tot > 0, tot, 1), 1.0 / m.shape[-1])


def chain_rule_kl(problem: SeqPredProblem, joint: JointPmf, t: int) -> tuple[float, float]:
    """Both sides of the KL chain rule for the future block Y_{t+1:T}.

    lhs = E[KL(P(Y_{t+1:T} | D_t) || P(Y_{t+1:T} | theta_t))]
    rhs = sum_{t' >= t} E[KL(P(Y_{t'+1} | D_{t'}) || P(Y_{t'+1} | theta_t, Y_{t+1:t'}))]
    """
    T = problem.T
    th = [f"theta{t}"]
    m = joint._flat([_y(1, t), th, _y(t + 1, T)])                 # (A, S, F)
    w_ds = m.sum(axis=2)                                          # P(d, theta)
    p_d = _conditional_table(m.sum(axis=1))                       # P(future | d)   (A, F)
    p_th = _conditional_table(m.sum(axis=0))                      # P(future | theta) (S, F)
    lhs = _expected_kl(w_ds, p_d[:, None, :], p_th[None, :, :])

    rhs = 0.0
    for tp in range(t, T):
        # (d_t, theta_t, Y_{t+1:t'}, Y_{t'+1}) -- D_{t'} = (d_t, Y_{t+1:t'})
        m2 = joint._flat([_y(1, t), th, _y(t + 1, tp), [f"Y{tp + 1}"]])   # (A, S, B, L)
        w = m2.sum(axis=3)                                                # (A, S, B)
        p_data = _conditional_table(m2.sum(axis=1))                       # (A, B, L)
        p_agent = _conditional_table(m2.sum(axis=0))                      # (S, B, L)
        rhs += _expected_kl(w, p_data[:, None, :, :], p_agent[None, :, :, :])
    return lhs, rhs


def mi_chain_two_ways(joint: JointPmf, T: int, t: int) -> dict:
    """I(Y_{t+1:T}; D_t, theta_t) via theta first and via D_t first."""
    fut, th, data = _y(t + 1, T), [f"theta{t}"], _y(1, t)
    total = _mi(joint, fut, data + th)
    return {
        "total": total,
        "via_theta": _mi(joint, fut, th) + (_mi(joint, fut, data, th) if data else 0.0),
        "via_data": (_mi(joint, fut, data) if data else 0.0) + _mi(joint, fut, th, data),
        "theta_given_data": _mi(joint, fut, th, data),
    }


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def coin_problem(T: int, p_heads_env: float = 2.0 / 3.0) -> SeqPredProblem:
    """Heads-only coin with probability ``p_heads_env``, tails-only otherwise."""
    if T < 1:
        raise ValueError("T must be >= 1")
    L = np.zeros((2, T, 2))
    L[0, :, 1] = 1.0
    L[1, :, 0] = 1.0
    return SeqPredProblem(np.array([p_heads_env, 1 - p_heads_env]), L, env_names=("heads_only", "tails_only"))


def bayes_predictive(problem: SeqPredProblem, prefix: Sequence[int]) -> np.ndarray:
    """P(Y_{t+1} | Y_{1:t} = prefix) as a label-probability vector (prefix holds label indices)."""
    t = len(prefix)
    w = problem.weights.copy()
    for i, y in enumerate(prefix):
        w = w * problem.label_probs[:, i, y]
    if w.sum() <= 0:
        return np.full(problem.n_labels, 1.0 / problem.n_labels)
    return (w / w.sum()) @ problem.label_probs[:, t, :]


def perfect_memory_agent(problem: SeqPredProblem) -> IncrementalAgent:
    """theta_t is the observed label prefix; predictions are exact Bayes."""
    T, L = problem.T, problem.n_labels
    states = [p for n in range(T + 1) for p in itertools.product(range(L), repeat=n)]
    index = {s: i for i, s in enumerate(states)}
    S = len(states)
    init = np.zeros(S)
    init[index[()]] = 1.0
    kernel = np.zeros((T, S, L, S))
    predictor = np.zeros((T, S, L))
    for t in range(T):
        for s in states:
            i = index[s]
            predictor[t, i] = bayes_predictive(problem, s) if len(s) < T else np.full(L, 1.0 / L)
            for y in range(L):
                kernel[t, i, y, index[s + (y,)] if len(s) < T else i] = 1.0
    names = tuple("".join(str(problem.labels[y]) for y in s) for s in states)
    return IncrementalAgent(init, kernel, predictor, names)


def amnesiac_agent(problem: SeqPredProblem) -> IncrementalAgent:
    """Single constant state predicting the prior marginal at every step."""
    T, L = problem.T, problem.n_labels
    predictor = np.array([[problem.weights @ problem.label_probs[:, t, :]] for t in range(T)])
    return IncrementalAgent(np.ones(1), np.ones((T, 1, L, 1)), predictor, ("constant",))


def random_instance(rng: RngStream, max_envs: int = 3, max_states: int = 4, max_T: int = 4,
                    n_labels: int = 2, predictor: str = "random") -> tuple[SeqPredProblem, IncrementalAgent]:
    """Random enumerable instance; every row is drawn from a symmetric Dirichlet(1).

    ``predictor="induced"`` replaces the random predictor with the conditional
    P(Y_{t+1} | theta_t) implied by the kernel, the tightest possible choice.
    """
    g = rng.generator
    E = int(g.integers(1, max_envs + 1))
    S = int(g.integers(1, max_states + 1))
    T = int(g.integers(1, max_T + 1))
    L = n_labels
    problem = SeqPredProblem(g.dirichlet(np.ones(E)), g.dirichlet(np.ones(L), size=(E, T)),
                             labels=tuple(range(L)))
    agent = IncrementalAgent(g.dirichlet(np.ones(S)), g.dirichlet(np.ones(S), size=(T, S, L)),
                             g.dirichlet(np.ones(L), size=(T, S)))
    if predictor == "induced":
        joint = enumerate_joint(problem, agent)
        agent = agent.with_predictor(np.array([induced_predictor(joint, problem, t) for t in range(T)]))
    elif predictor != "random":
        raise ValueError("predictor must be 'random' or 'induced'")
    return problem, agent


def label_pmf(problem: SeqPredProblem, env: int, t: int) -> FinitePmf:
    return FinitePmf(problem.labels, problem.label_probs[env, t])
