import json
import math

import numpy as np
import pytest

from robustcomm.fixtures import (coin_policy, coordinated_coin, product_policy, random_game,
                                 random_policy, slip_line, two_line)
from robustcomm.infometrics import (END, RESUME, CommModel, HorizonError, bound_report,
                                    bound_theorem1, bound_theorem2, bound_theorem3, bounds_summary,
                                    check_lemma_inequalities, entropy, enumerate_path_distribution,
                                    exact_total_correlation, kl, random_history_fn,
                                    total_correlation_of, write_reports_json)
from robustcomm.markov_game import prepare
from robustcomm.occupancy import occupancy_from_policy, value_and_length_from_occupancy


def _cases(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        g = prepare(random_game(rng, n_agents=2, max_states=3, acyclic=True, min_actions=2))
        if g.terminal_mask[g.joint_initial]:
            continue
        out.append((g, random_policy(g, rng, deterministic_frac=0.2)))
    return out


def _fixtures():
    g = prepare(coordinated_coin(1))
    yield "coin1", g, coin_policy(g)
    g = prepare(coordinated_coin(2))
    yield "coin2", g, coin_policy(g)
    g = prepare(slip_line(0.9))
    go = np.array([[1.0, 0.0], [0.0, 1.0]])
    yield "slip_line", g, product_policy(g, [go, go])


def test_entropy_and_kl_basics():
    assert entropy([0.5, 0.5]) == pytest.approx(math.log(2))
    assert entropy({"a": 1.0}) == 0.0
    assert kl([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert kl({"a": 1.0}, {"b": 1.0}) == math.inf
    assert kl([0.25, 0.75], [0.5, 0.5]) == pytest.approx(
        0.25 * math.log(0.5) + 0.75 * math.log(1.5))
    with pytest.raises(ValueError):
        entropy([-0.1, 1.1])
    with pytest.raises(ValueError):
        kl([1.0], [0.5, 0.5])


def test_path_distribution_matches_occupancy():
    for g, pi in _cases(15, seed=30):
        dist = enumerate_path_distribution(g, pi, horizon=12)
        v, length = value_and_length_from_occupancy(g, occupancy_from_policy(g, pi))
        assert dist.total == pytest.approx(1.0, abs=1e-12)
        assert dist.success_probability == pytest.approx(v, abs=1e-12)
        assert dist.expected_length == pytest.approx(length, abs=1e-10)


def test_no_comm_law_is_product_of_marginals():
    for g, pi in _cases(15, seed=31):
        full = enumerate_path_distribution(g, pi, CommModel.full(), horizon=12)
        img0 = enumerate_path_distribution(g, pi, CommModel.none(), horizon=12)
        m0, m1 = full.marginal(0), full.marginal(1)
        assert img0.total == pytest.approx(1.0, abs=1e-12)
        for (p0, p1), p in img0.support.items():
            assert p == pytest.approx(m0.get(p0, 0.0) * m1.get(p1, 0.0), abs=1e-14)


def test_total_correlation_equals_kl_to_no_comm():
    for g, pi in _cases(30, seed=32):
        full = enumerate_path_distribution(g, pi, CommModel.full(), horizon=12)
        img0 = enumerate_path_distribution(g, pi, CommModel.none(), horizon=12)
        assert total_correlation_of(full) == pytest.approx(kl(full.support, img0.support), abs=1e-9)


def test_coin_total_correlation():
    for rounds in (1, 2):
        g = prepare(coordinated_coin(rounds))
        assert exact_total_correlation(g, coin_policy(g), horizon=rounds + 2) == pytest.approx(
            rounds * math.log(2), abs=1e-12)


def test_coin_loss_time_matters():
    # one shared draw at step 0 is all coin1 needs: losing it afterwards costs nothing
    g = prepare(coordinated_coin(1))
    pi = coin_policy(g)
    full = enumerate_path_distribution(g, pi, CommModel.full(), horizon=4)
    d0 = kl(full.support, enumerate_path_distribution(g, pi, CommModel.loss_at(0), 4).support)
    d1 = kl(full.support, enumerate_path_distribution(g, pi, CommModel.loss_at(1), 4).support)
    assert d0 == pytest.approx(math.log(2))
    assert d1 == 0.0
    assert enumerate_path_distribution(g, pi, CommModel.none(), 4).success_probability == pytest.approx(0.5)
    assert enumerate_path_distribution(g, pi, CommModel.loss_at(1), 4).success_probability == pytest.approx(1.0)


@pytest.mark.parametrize("name,g,pi", list(_fixtures()), ids=lambda v: v if isinstance(v, str) else "")
def test_lemmas_on_fixtures(name, g, pi):
    rep = check_lemma_inequalities(g, pi, horizon=12, q_values=(0.1, 0.5, 0.9), name=name)
    assert rep.all_satisfied, rep.violations()
    sched = [c for c in rep.cases if c.lemma == "schedule"]
    assert len(sched) == 2 ** 4
    assert len({c.case for c in sched}) == 16


def test_lemmas_on_random_games():
    for k, (g, pi) in enumerate(_cases(12, seed=33)):
        rep = check_lemma_inequalities(g, pi, horizon=12, q_values=(0.2, 0.5, 0.8),
                                       history_seeds=range(3), name=f"r{k}")
        assert rep.all_satisfied, rep.violations()


def test_lemma_report_json():
    g = prepare(coordinated_coin(1))
    rep = check_lemma_inequalities(g, coin_policy(g), horizon=4, q_values=(0.5,), history_seeds=(0,))
    data = json.loads(rep.to_json())
    assert {d["lemma"] for d in data} == {"persistent-loss", "schedule", "bernoulli", "history"}
    assert any(d["case"].endswith("t_loss=inf") for d in data)


def test_resume_marker_after_recovery():
    # slip_line: under no communication at step 0 an agent can believe the team is done,
    # stop early, and rejoin when communication returns
    g = prepare(slip_line(0.8))
    go = np.array([[1.0, 0.0], [0.0, 1.0]])
    pi = product_policy(g, [go, go])
    dist = enumerate_path_distribution(g, pi, CommModel.schedule((0, 0, 1), fill=1), horizon=30)
    assert dist.total == pytest.approx(1.0)
    assert all(p[-1] == END for path in dist.support for p in path)
    resumed = [path for path in dist.support if any(RESUME in p for p in path)]
    assert resumed
    for path in resumed:
        for p in path:
            if RESUME in p:
                assert p[p.index(RESUME) + 1] == 2


def test_horizon_error():
    g = prepare(slip_line(0.5))
    go = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(HorizonError):
        enumerate_path_distribution(g, product_policy(g, [go, go]), horizon=3)


def test_comm_model_validation():
    with pytest.raises(ValueError):
        CommModel("bogus")
    with pytest.raises(ValueError):
        CommModel.bernoulli_intermittent(1.5)
    with pytest.raises(ValueError):
        CommModel.schedule((0, 2))
    with pytest.raises(ValueError):
        CommModel("history_fn")
    with pytest.raises(ValueError):
        CommModel.loss_at(-1)


def test_comm_model_branches():
    assert CommModel.full().branches(5, False) == [(1, 1.0)]
    assert CommModel.none().branches(0, False) == [(0, 1.0)]
    assert CommModel.loss_at(2).branches(1, False) == [(1, 1.0)]
    assert CommModel.bernoulli_persistent(0.3).branches(3, True) == [(0, 1.0)]
    assert CommModel.bernoulli_intermittent(0.3).branches(3, True) == [(1, 0.7), (0, 0.3)]
    assert CommModel.schedule((1, 0)).branches(5, False) == [(0, 1.0)]
    assert CommModel.schedule((1, 0), fill=1).branches(5, False) == [(1, 1.0)]
    f = random_history_fn(3)
    assert CommModel.history_fn(f).persistent and not CommModel.history_fn(f, recover=True).persistent
    assert CommModel.history_fn(f).describe()["fn"] == "random_history_fn[3]"
    assert CommModel.loss_at(math.inf).describe() == {"variant": "loss_at", "t_loss": None}


def test_bound_closed_forms():
    assert bound_theorem1(1.0, math.log(2)) == pytest.approx(1 - math.sqrt(0.5))
    assert bound_theorem1(0.5, 50.0) == pytest.approx(-0.5)
    assert bound_theorem1(0.1, 1e6) == pytest.approx(-0.9)
    v, C, l = 0.9, 0.5, 5.0
    t1 = 0.9 - math.sqrt(1 - math.exp(-0.5))
    assert bound_theorem2(v, C, l, 0.1) == pytest.approx(max(t1, 0.9 * 0.9 ** (5 / 0.9)))
    assert bound_theorem2(v, 0.0, l, 0.5) == pytest.approx(0.9)
    assert bound_theorem3(v, C, l, 0.2) == pytest.approx(
        max(0.9 - math.sqrt(1 - math.exp(-0.1)), 0.9 * 0.8 ** (5 / 0.9)))
    assert bound_theorem3(v, C, l, 0.0) == pytest.approx(0.9)
    assert bound_theorem3(v, C, l, 1.0) == pytest.approx(max(t1, 0.0))


def test_bounds_at_zero_value():
    assert bound_theorem2(0.0, 1.0, 3.0, 0.1) == 0.0
    assert bound_theorem3(0.0, 1.0, 3.0, 0.1) == 0.0
    assert bound_theorem1(0.0, 0.0) == 0.0


def test_bound_input_validation_and_roundoff():
    with pytest.raises(ValueError):
        bound_theorem1(1.5, 0.0)
    with pytest.raises(ValueError):
        bound_theorem1(0.5, -1.0)
    with pytest.raises(ValueError):
        bound_theorem2(0.5, 0.0, -1.0, 0.1)
    with pytest.raises(ValueError):
        bound_theorem3(0.5, 0.0, 1.0, 2.0)
    assert bound_theorem1(1.0 + 1e-12, -1e-12) == 1.0


def test_bound_report(tmp_path):
    r = bound_report("thm3", 0.9, 0.5, 5.0, rate=0.2, empirical=0.8, stderr=0.01)
    assert r.satisfied and r.bound == bound_theorem3(0.9, 0.5, 5.0, 0.2)
    assert not bound_report("thm1", 1.0, 0.0, empirical=0.5).satisfied
    with pytest.raises(ValueError):
        bound_report("thm9", 1.0, 0.0)
    p = tmp_path / "b.json"
    write_reports_json(p, [r, bounds_summary(0.9, 0.5, 5.0, 0.1, 0.2)])
    data = json.loads(p.read_text())
    assert data[0]["theorem"] == "thm3" and set(data[1]) == {"thm1", "thm2", "thm3"}


def test_bounds_hold_against_exact_success():
    cases = [(n, g, pi) for n, g, pi in _fixtures()] + [
        (f"r{k}", g, pi) for k, (g, pi) in enumerate(_cases(10, seed=34))]
    for name, g, pi in cases:
        v, l = value_and_length_from_occupancy(g, occupancy_from_policy(g, pi))
        C = exact_total_correlation(g, pi, horizon=14)
        none = enumerate_path_distribution(g, pi, CommModel.none(), 14).success_probability
        assert none >= bound_theorem1(v, C) - 1e-9, name
        for r in (0.1, 0.5, 0.9):
            pers = enumerate_path_distribution(g, pi, CommModel.bernoulli_persistent(r), 14)
            inter = enumerate_path_distribution(g, pi, CommModel.bernoulli_intermittent(r), 14)
            assert pers.success_probability >= bound_theorem2(v, C, l, r) - 1e-9, (name, r)
            assert inter.success_probability >= bound_theorem3(v, C, l, r) - 1e-9, (name, r)
