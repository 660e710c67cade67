"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and printed in the pytest terminal summary.
"""
import json
import math
import time

import numpy as np
import pytest

import conftest
from robustcomm import cli
from robustcomm import executor as ex
from robustcomm.fixtures import (coin_policy, free_coins, product_policy, random_game,
                                 random_policy)
from robustcomm.gridworld import build_three_agent_navigation, build_two_agent_navigation
from robustcomm.infometrics import (CommModel, bound_report, check_lemma_inequalities,
                                    enumerate_path_distribution, exact_total_correlation, kl,
                                    total_correlation_of)
from robustcomm.markov_game import compute_dead_set, prepare
from robustcomm.occupancy import occupancy_from_policy, solve_baseline_lp
from robustcomm.synthesis import (agent_entropy_bound, joint_entropy_term, linearize_convex_part,
                                  total_correlation_bound)
from test_markov_game import _dead_set_brute_force
from test_occupancy import max_reach_value_iteration
from test_synthesis import _f, _joint_path_entropy, _local_path_entropy

N_MC = 10_000
SEED = 0


def report(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert ok, line


def _rate(game, pi, comm):
    return ex.estimate_success(game, pi, comm, N_MC, SEED)


def _acyclic(rng, n_agents=2):
    while True:
        g = prepare(random_game(rng, n_agents=n_agents, max_states=3, acyclic=True, min_actions=2))
        if not g.terminal_mask[g.joint_initial]:
            return g


# -- 1. baseline LP -----------------------------------------------------------------------

@pytest.mark.parametrize("n,build,target", [(2, build_two_agent_navigation, 0.99864),
                                            (3, build_three_agent_navigation, 0.99132)])
def test_c1_baseline_lp(n, build, target):
    t0 = time.perf_counter()
    res = solve_baseline_lp(prepare(build()))
    dt = time.perf_counter() - t0
    ok = abs(res.value - target) <= 1e-3 and dt < 60
    report(f"C1 baseline LP {n}-agent", ok,
           f"v={res.value:.6f} (target {target} +/- 1e-3), {dt:.1f} s (< 60 s)")


# -- 2. synthesis -------------------------------------------------------------------------

@pytest.mark.parametrize("n,iters,cbar_rng,v_rng", [(2, 100, (2.0, 3.2), (0.94, 0.98)),
                                                    (3, 50, (2.8, 4.2), (0.80, 0.88))])
def test_c2_synthesis(n, iters, cbar_rng, v_rng, md2, md3):
    _, trace, _ = md2 if n == 2 else md3
    dt = conftest.SECONDS[("md", n)]
    last = trace.records[-1]
    obj = trace.column("objective")
    drop = float(max(0.0, -np.diff(obj).min()))
    ok = (len(trace.records) == iters and trace.status == "ok"
          and cbar_rng[0] <= last.C_bar <= cbar_rng[1] and v_rng[0] <= last.v_full <= v_rng[1]
          and drop <= 1e-6 and dt < 1800)
    report(f"C2 synthesis {n}-agent", ok,
           f"{len(trace.records)} iters, C_bar={last.C_bar:.4f} in {list(cbar_rng)}, "
           f"v={last.v_full:.4f} in {list(v_rng)}, max objective drop {drop:.2e} (<= 1e-6), "
           f"{dt:.1f} s (< 1800 s)")


# -- 3. Monte Carlo -----------------------------------------------------------------------

def test_c3_base_no_comm_2agent(game2, baseline2):
    r = _rate(game2, baseline2[1], CommModel.none())
    report("C3 2-agent pi_base no-comm", 0.79 <= r.rate <= 0.85,
           f"{r.rate:.4f} +/- {r.stderr:.4f} (target [0.79, 0.85])")


def test_c3_md_no_comm_2agent(game2, md2):
    r = _rate(game2, md2[0], CommModel.none())
    report("C3 2-agent pi_MD no-comm", 0.93 <= r.rate <= 0.99,
           f"{r.rate:.4f} +/- {r.stderr:.4f} (target [0.93, 0.99])")


def test_c3_md_flatness_2agent(game2, md2):
    rows = ex.sweep_dropout(game2, md2[0], ex.DEFAULT_Q_GRID, N_MC, SEED)
    rates = np.array([r["rate"] for r in rows])
    se = max(r["stderr"] for r in rows)
    spread = rates.max() - rates.min()
    report("C3 2-agent pi_MD flatness", spread <= 0.02 + 6 * se,
           f"max-min={spread:.4f} (<= 0.02 + 6*{se:.4f} = {0.02 + 6 * se:.4f})")


def test_c3_base_q09_2agent(game2, baseline2):
    r = _rate(game2, baseline2[1], CommModel.bernoulli_intermittent(0.9))
    report("C3 2-agent pi_base q=0.9", 0.85 <= r.rate <= 0.91,
           f"{r.rate:.4f} +/- {r.stderr:.4f} (target [0.85, 0.91])")


def test_c3_base_no_comm_3agent(game3, baseline3):
    r = _rate(game3, baseline3[1], CommModel.none())
    report("C3 3-agent pi_base no-comm", 0.13 <= r.rate <= 0.20,
           f"{r.rate:.4f} +/- {r.stderr:.4f} (target [0.13, 0.20])")


# -- 4. property suites ---------------------------------------------------------------------

def test_c4_product_law():
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(100):
        g = random_game(rng, n_agents=int(rng.integers(2, 4)))
        P = g.transition_matrix.toarray()
        worst = max(worst, np.abs(P.sum(axis=1) - 1).max())
        sd, ad = g.state_digits, g.action_digits
        for s in range(g.n_states):
            for a in range(g.n_actions):
                expect = np.ones(g.n_states)
                for i, m in enumerate(g.agents):
                    expect *= m.kernel[sd[s, i], ad[a, i], sd[:, i]]
                worst = max(worst, np.abs(P[s * g.n_actions + a] - expect).max())
    report("C4 product law + row-stochastic (100 games)", worst <= 1e-12, f"max error {worst:.1e}")


def test_c4_dead_set():
    rng = np.random.default_rng(101)
    n = bad = 0
    while n < 100:
        g = random_game(rng, n_agents=2, max_states=3, sparsity=0.4)
        if g.n_states > 6:
            continue
        bad += compute_dead_set(g) != _dead_set_brute_force(g)
        n += 1
    report("C4 dead set = brute force (<= 6 joint states)", bad == 0, f"{bad}/{n} mismatches")


def test_c4_lp_vs_value_iteration(game2, baseline2):
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(30):
        g = prepare(random_game(rng, n_agents=2, max_states=3))
        worst = max(worst, abs(solve_baseline_lp(g, backend="highs").value
                               - max_reach_value_iteration(g)[g.joint_initial]))
    worst = max(worst, abs(baseline2[0].value
                           - max_reach_value_iteration(game2, tol=1e-15)[game2.joint_initial]))
    report("C4 LP = value iteration", worst <= 1e-7, f"max |diff| {worst:.1e} (<= 1e-7)")


def test_c4_entropy_closed_forms():
    rng = np.random.default_rng(103)
    worst = 0.0
    for _ in range(15):
        g = _acyclic(rng)
        pi = random_policy(g, rng, deterministic_frac=0.2)
        x = occupancy_from_policy(g, pi)
        worst = max(worst, abs(joint_entropy_term(g, x) - _joint_path_entropy(g, pi)))
        for i in range(g.n_agents):
            worst = max(worst, abs(agent_entropy_bound(g, x, i) - _local_path_entropy(g, x, i)))
    report("C4 entropy closed forms = brute force", worst <= 1e-8, f"max |diff| {worst:.1e} (<= 1e-8)")


def test_c4_correlation_order_and_product():
    rng = np.random.default_rng(104)
    worst_order, worst_prod, min_nonprod = 0.0, 0.0, math.inf
    for _ in range(15):
        g = _acyclic(rng)
        pi = random_policy(g, rng, deterministic_frac=0.2)
        C = exact_total_correlation(g, pi, horizon=12)
        Cb = total_correlation_bound(g, occupancy_from_policy(g, pi))
        worst_order = max(worst_order, C - Cb, -C)
    for rounds, n in [(1, 2), (2, 2), (1, 3)]:
        g = prepare(free_coins(rounds, n))
        m = g.agents[0]
        for _ in range(3):
            locs = [rng.dirichlet(np.ones(m.n_actions), size=m.n_states) for _ in range(n)]
            worst_prod = max(worst_prod, abs(exact_total_correlation(g, product_policy(g, locs),
                                                                     horizon=rounds + 2)))
            min_nonprod = min(min_nonprod, exact_total_correlation(g, random_policy(g, rng),
                                                                   horizon=rounds + 2))
        min_nonprod = min(min_nonprod, exact_total_correlation(g, coin_policy(g), horizon=rounds + 2))
    ok = worst_order <= 1e-9 and worst_prod <= 1e-9 and min_nonprod > 1e-9
    report("C4 C_bar >= C >= 0, C = 0 iff product", ok,
           f"order violation {worst_order:.1e}, product |C| {worst_prod:.1e}, "
           f"min non-product C {min_nonprod:.3e}")


def test_c4_kl_identity():
    rng = np.random.default_rng(105)
    worst = 0.0
    for _ in range(20):
        g = _acyclic(rng)
        pi = random_policy(g, rng)
        full = enumerate_path_distribution(g, pi, CommModel.full(), 12)
        img0 = enumerate_path_distribution(g, pi, CommModel.none(), 12)
        worst = max(worst, abs(total_correlation_of(full) - kl(full.support, img0.support)))
    report("C4 C = KL(full || img_0)", worst <= 1e-9, f"max |diff| {worst:.1e} (<= 1e-9)")


def test_c4_lemmas():
    cfg = cli.resolve_config()
    cases = bad = sched = 0
    for name, g, pi in cli.verify_fixtures(cfg):
        rep = check_lemma_inequalities(prepare(g), pi, horizon=12, schedule_length=4,
                                       q_values=(0.1, 0.5, 0.9), history_seeds=range(4), name=name)
        cases += len(rep.cases)
        bad += len(rep.violations())
        sched += sum(c.lemma == "schedule" for c in rep.cases)
    n_fix = len(cli.verify_fixtures(cfg))
    ok = bad == 0 and sched == 16 * n_fix
    report("C4 lemmas (schedules exhaustive over 2^4)", ok,
           f"{cases} cases on {n_fix} games, {sched} schedule cases, {bad} violations")


def test_c4_theorem_bounds_vs_monte_carlo(game2, baseline2, md2):
    checks = []
    for name, pi, x in (("base", baseline2[1], baseline2[0].x), ("md", md2[0], md2[2])):
        s = cli._policy_summary(game2, name, x, cli.resolve_config())
        v, l, cb = s["v_full"], s["l_full"], s["C_bar"]
        none = _rate(game2, pi, CommModel.none())
        checks.append(bound_report("thm1", v, cb, l, None, none.rate, none.stderr))
        for r in (0.1, 0.5):
            pers = _rate(game2, pi, CommModel.bernoulli_persistent(r))
            checks.append(bound_report("thm2", v, cb, l, r, pers.rate, pers.stderr))
        for row in ex.sweep_dropout(game2, pi, (0.1, 0.3, 0.5, 0.7, 0.9), N_MC, SEED):
            checks.append(bound_report("thm3", v, cb, l, row["q"], row["rate"], row["stderr"]))
    bad = [c for c in checks if not c.satisfied]
    report("C4 theorem bounds <= empirical + 4 stderr", not bad,
           f"{len(checks) - len(bad)}/{len(checks)} checks hold")


def test_c4_gradient():
    rng = np.random.default_rng(106)
    h, worst = 1e-6, 0.0
    from robustcomm.occupancy import admissible_mask
    for _ in range(20):
        g = _acyclic(rng, n_agents=int(rng.integers(2, 4)))
        mask = admissible_mask(g)
        x = np.where(mask, rng.random(mask.shape) + 0.05, 0.0)
        d = np.where(mask, rng.standard_normal(mask.shape), 0.0)
        an = float(np.sum(linearize_convex_part(g, x) * d))
        fd = (_f(g, x + h * d) - _f(g, x - h * d)) / (2 * h)
        worst = max(worst, abs(fd - an) / max(abs(an), 1.0))
    report("C4 gradient = central differences (20 points)", worst <= 1e-5,
           f"max relative error {worst:.1e} (<= 1e-5)")


# -- 5. reproducibility ---------------------------------------------------------------------

def test_c5_byte_identical_csvs(tmp_path):
    over = {"evaluation": {"n_rollouts": 2000}}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(over))
    dirs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        for cmd in ("synth", "eval"):
            assert cli.main([cmd, "--preset", "paper-2agent", "--config", str(cfg_path),
                             "--seed", "3", "--out", str(d)]) == 0
        dirs.append(d)
    names = sorted(p.name for p in dirs[0].glob("*.csv"))
    same = [n for n in names if (dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes()]
    report("C5 byte-identical CSVs (same config + seed)", len(names) >= 9 and same == names,
           f"{len(same)}/{len(names)} CSVs identical")
