"""Cross-entropy / expected-KL metrics and the decision-quality certificate."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointpred.envs import coin_agents, table1_instance
from jointpred.metrics import (DecisionProblem, bayes_coin_agent, coin_scenario, exact_dkl_tau, exact_metrics,
                               fixed_agent, mc_cross_entropy, random_decision_problem, recommender_certificate,
                               universality_gap)
from jointpred.prob_core import FinitePmf, RngStream, binary_sequences

from oracles import COIN_TAU3_DKL, ENTROPY_BER_TWO_THIRDS, TABLE1_GAP, kl_dict

COIN_PRIOR = FinitePmf([1.0, 0.0], [2 / 3, 1 / 3])


class TestExactDklTau:
    def test_identical_is_zero(self):
        _, a2 = coin_agents()
        assert exact_dkl_tau(a2(3), a2(3)) == 0.0

    def test_tau1_marginals_agree(self):
        a1, a2 = coin_agents()
        assert exact_dkl_tau(a2(1), a1(1)) == pytest.approx(0.0, abs=1e-15)

    def test_tau2_coin(self):
        a1, a2 = coin_agents()
        assert exact_dkl_tau(a2(2), a1(2)) == pytest.approx(ENTROPY_BER_TWO_THIRDS, abs=1e-12)


class TestExactMetrics:
    def test_coin_tau3(self):
        a1, a2 = coin_agents()
        m1 = exact_metrics(coin_scenario(COIN_PRIOR, fixed_agent(a1), 3))
        m2 = exact_metrics(coin_scenario(COIN_PRIOR, fixed_agent(a2), 3))
        assert m1["d_kl"] == pytest.approx(COIN_TAU3_DKL, abs=1e-12)
        assert m2["d_kl"] == pytest.approx(0.0, abs=1e-15)
        assert m1["d_ce"] - m2["d_ce"] == pytest.approx(COIN_TAU3_DKL, abs=1e-12)

    def test_infinite_kl_reported(self):
        _, a2 = coin_agents()
        # agent2 gives zero probability to mixed sequences that a fair-ish coin produces
        prior = FinitePmf([0.5], [1.0])
        m = exact_metrics(coin_scenario(prior, fixed_agent(a2), 2))
        assert m["d_kl"] == math.inf and m["d_ce"] == math.inf

    @given(st.lists(st.floats(0.05, 0.95), min_size=1, max_size=3, unique=True), st.integers(1, 3),
           st.integers(0, 2), st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_ce_and_kl_differ_by_agent_independent_constant(self, ps, tau, horizon, seed):
        rng = np.random.default_rng(seed)
        prior = FinitePmf(ps, rng.dirichlet(np.ones(len(ps))))
        other = FinitePmf([0.3, 0.8], [0.5, 0.5])
        offsets = []
        for agent in (bayes_coin_agent(prior), bayes_coin_agent(other), fixed_agent(coin_agents()[0])):
            m = exact_metrics(coin_scenario(prior, agent, tau, horizon))
            offsets.append(m["d_ce"] - m["d_kl"])
            assert m["d_kl"] >= 0
            assert m["d_ce"] - m["d_kl"] == pytest.approx(m["neg_log_posterior"], abs=1e-10)
        assert max(offsets) - min(offsets) <= 1e-10

    def test_bayes_agent_has_zero_kl_with_data(self):
        prior = FinitePmf([0.2, 0.6, 0.9], [0.3, 0.3, 0.4])
        m = exact_metrics(coin_scenario(prior, bayes_coin_agent(prior), 2, horizon=3))
        assert m["d_kl"] == pytest.approx(0.0, abs=1e-12)

    def test_matches_dict_oracle(self):
        prior = FinitePmf([0.2, 0.7], [0.4, 0.6])
        a1 = coin_agents()[0]
        sc = coin_scenario(prior, fixed_agent(a1), 2, horizon=1)
        expected = 0.0
        for d in ((0,), (1,)):
            w = {p: pe * (p if d[0] else 1 - p) for p, pe in zip(prior.outcomes, prior.probs)}
            z = sum(w.values())
            post = {s: sum(w[p] / z * p ** sum(s) * (1 - p) ** (2 - sum(s)) for p in w) for s in binary_sequences(2)}
            expected += z * kl_dict(post, a1(2).as_dict())
        assert exact_metrics(sc)["d_kl"] == pytest.approx(expected, abs=1e-12)


class TestMonteCarlo:
    def test_bayes_agent_converges_to_entropy(self):
        est = mc_cross_entropy(coin_scenario(COIN_PRIOR, bayes_coin_agent(COIN_PRIOR), 1), 20_000,
                               RngStream(1, 0))
        assert abs(est.mean - ENTROPY_BER_TWO_THIRDS) <= 3 * est.se

    def test_deterministic_environment(self):
        prior = FinitePmf([1.0], [1.0])
        est = mc_cross_entropy(coin_scenario(prior, bayes_coin_agent(prior), 3), 500, RngStream(2, 0))
        assert est.mean == 0.0

    def test_tau3_gap_matches_enumeration(self):
        a1, a2 = coin_agents()
        e1 = mc_cross_entropy(coin_scenario(COIN_PRIOR, fixed_agent(a1), 3), 20_000, RngStream(3, 0))
        e2 = mc_cross_entropy(coin_scenario(COIN_PRIOR, fixed_agent(a2), 3), 20_000, RngStream(3, 1))
        se = math.hypot(e1.se, e2.se)
        assert abs((e1.mean - e2.mean) - COIN_TAU3_DKL) <= 5 * se

    def test_infinite_draws_counted(self):
        _, a2 = coin_agents()
        est = mc_cross_entropy(coin_scenario(FinitePmf([0.5], [1.0]), fixed_agent(a2), 2), 200, RngStream(4, 0))
        assert est.n_infinite > 0 and est.mean == math.inf


class TestUniversalityGap:
    def test_agent_equals_posterior(self):
        seqs = binary_sequences(2)
        post = FinitePmf(seqs, [0.1, 0.2, 0.3, 0.4])
        dp = DecisionProblem((0, 1, 2), lambda a, y: float(sum(y) == a), tuple(seqs))
        cert = universality_gap(dp, post, post)
        assert cert.gap == 0.0 and cert.holds

    def test_recommender(self):
        cert = recommender_certificate(table1_instance())
        assert cert.agent_action == (2, 3)
        assert cert.best_action == (0, 1)
        assert cert.gap == pytest.approx(TABLE1_GAP, abs=1e-12)
        assert cert.bound > cert.gap and cert.holds

    def test_random_instances(self):
        for k in range(500):
            dp, post, agent = random_decision_problem(RngStream(5, k))
            assert universality_gap(dp, post, agent).holds

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_property(self, seed):
        dp, post, agent = random_decision_problem(RngStream(seed, 0), max_actions=4, max_tau=2, zero_prob=0.0)
        cert = universality_gap(dp, post, agent)
        assert cert.gap >= 0 and cert.holds

    def test_reward_range_enforced(self):
        dp = DecisionProblem((0,), lambda a, y: 2.0, ((0,), (1,)))
        with pytest.raises(ValueError):
            universality_gap(dp, FinitePmf.uniform([(0,), (1,)]), FinitePmf.uniform([(0,), (1,)]))

    def test_empty_actions(self):
        with pytest.raises(ValueError):
            universality_gap(DecisionProblem((), lambda a, y: 0.0, ((0,),)), FinitePmf([(0,)], [1.0]),
                             FinitePmf([(0,)], [1.0]))
