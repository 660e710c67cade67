"""Minimum-dependency policy synthesis by the convex-concave procedure.

The objective over occupancy measures is

    v(x) - delta * l(x) - beta * (sum_i Hbar_i(x) - H(x))

where ``H`` is the entropy of the absorbed joint state-action process and
``Hbar_i`` the entropy of the stationary local process sharing agent ``i``'s
marginal occupancy. ``-beta * sum_i Hbar_i`` is convex; each iteration
replaces it by its tangent at the previous iterate and solves the remaining
concave program.

The concave subproblem is an entropy-regularised stochastic shortest path
problem, so its optimum is the fixed point of a log-sum-exp Bellman operator.
``solve_ccp_subproblem`` finds that fixed point by soft policy iteration.
A generic exponential-cone formulation through cvxpy is available as
``backend="cvxpy"`` for cross-checking on small games.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import logsumexp

from .markov_game import JointGame, prepare
from .occupancy import (
    DEFAULT_CAP, SolverError, admissible_mask, agent_marginals, complete_terminal_mass,
    flow_residual, flow_structure, marginal_operator, occupancy_from_policy,
    policy_from_occupancy, value_and_length_from_occupancy,
)

log = logging.getLogger(__name__)

DEFAULT_CLAMP = 1e-12


def _xlogy_ratio(num, den):
    """sum of num * log(den / num) with 0 log(. / 0) = 0."""
    num = np.asarray(num, dtype=float)
    den = np.broadcast_to(den, num.shape)
    if np.any(num < 0):
        raise ValueError("occupancy must be nonnegative")
    pos = num > 0
    return float(np.sum(num[pos] * (np.log(den[pos]) - np.log(num[pos]))))


def joint_entropy_term(game: JointGame, x: np.ndarray) -> float:
    """Entropy (nats) of the joint state-action process until absorption."""
    game = prepare(game)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("occupancy must be nonnegative")
    fs = flow_structure(game)
    block = x[fs.nt, :game.n_actions]
    tot = block.sum(axis=1, keepdims=True)
    policy_part = _xlogy_ratio(block, tot)
    transition_part = float(np.sum(block * game.transition_entropy[fs.nt]))
    return policy_part + transition_part


def _local_entropy(game: JointGame, marg: np.ndarray, i: int) -> float:
    m = game.agents[i]
    tot = marg.sum(axis=1, keepdims=True)
    policy_part = _xlogy_ratio(marg, tot)
    transition_part = float(np.sum(marg[:m.n_states, :m.n_actions] * m.transition_entropy))
    return policy_part + transition_part


def agent_entropy_bound(game: JointGame, x: np.ndarray, i: int) -> float:
    """Entropy (nats) of the stationary local process matching agent ``i``'s marginals.

    The normaliser at each local state includes the local end action, so a
    local state visited both before and at termination contributes the
    uncertainty about whether the team stops there.
    """
    game = prepare(game)
    marg = agent_marginals(game, np.asarray(x, dtype=float), i)
    if np.any(marg < 0):
        raise ValueError("marginal occupancy must be nonnegative")
    return _local_entropy(game, marg, i)


def total_correlation_bound(game: JointGame, x: np.ndarray) -> float:
    """sum_i Hbar_i - H, an upper bound on the total correlation of the joint policy."""
    return sum(agent_entropy_bound(game, x, i) for i in range(game.n_agents)) - joint_entropy_term(game, x)


@dataclass
class ObjectiveTerms:
    objective: float
    v_full: float
    l_full: float
    H_joint: float
    H_agents: float
    C_bar: float


def objective_terms(game: JointGame, x: np.ndarray, delta: float, beta: float) -> ObjectiveTerms:
    game = prepare(game)
    v, length = value_and_length_from_occupancy(game, x)
    H = joint_entropy_term(game, x)
    Hbar = sum(agent_entropy_bound(game, x, i) for i in range(game.n_agents))
    C = Hbar - H
    return ObjectiveTerms(v - delta * length - beta * C, v, length, H, Hbar, C)


def objective(game: JointGame, x: np.ndarray, delta: float, beta: float) -> float:
    return objective_terms(game, x, delta, beta).objective


def linearize_convex_part(game: JointGame, x_prev: np.ndarray,
                          clamp: float = DEFAULT_CLAMP, include_end: bool = True) -> np.ndarray:
    """Gradient of ``-sum_i Hbar_i`` at ``x_prev`` as a joint coefficient array.

    For agent ``i`` the derivative with respect to its marginal
    ``x_{s,a}`` is ``log(x_{s,a} / sum_b x_{s,b}) - h_i(s, a)``. Marginals
    (and their row sums) below ``clamp`` are raised to ``clamp`` before the
    logarithm. Joint coefficients add up the coefficients of the marginal
    coordinates each joint pair maps to. Entries outside admissible pairs
    are zero.

    With ``include_end=False`` the local end actions are dropped from the
    marginal processes, i.e. the gradient of the relaxed bound used by the
    ``"relaxed"`` warm start.
    """
    game = prepare(game)
    x_prev = np.asarray(x_prev, dtype=float)
    if np.any(x_prev < 0):
        raise ValueError("occupancy must be nonnegative")
    flat = np.zeros(x_prev.size)
    for i, m in enumerate(game.agents):
        marg = agent_marginals(game, x_prev, i)
        if not include_end:
            marg[:, m.n_actions] = 0.0
        tot = marg.sum(axis=1, keepdims=True)
        g = np.log(np.maximum(marg, clamp)) - np.log(np.maximum(tot, clamp))
        if not include_end:
            g[:, m.n_actions] = 0.0
        g[:m.n_states, :m.n_actions] -= m.transition_entropy
        flat += marginal_operator(game, i).T @ g.ravel()
    coeffs = flat.reshape(x_prev.shape)
    coeffs[~admissible_mask(game)] = 0.0
    return coeffs


def surrogate_value(game: JointGame, x: np.ndarray, coeffs: np.ndarray,
                    delta: float, beta: float) -> float:
    """v - delta*l + beta*H + beta*<coeffs, x>: the concave CCP subproblem objective."""
    v, length = value_and_length_from_occupancy(game, x)
    return v - delta * length + beta * joint_entropy_term(game, x) + beta * float(np.sum(coeffs * x))


# -- concave subproblem -------------------------------------------------------

@dataclass
class SubproblemResult:
    x: np.ndarray
    policy: np.ndarray
    value: float            # surrogate objective at x
    dual_value: float       # soft Bellman value at the initial state
    residual: float         # max flow residual
    iterations: int
    status: str


def _pair_rewards(game, coeffs, delta, beta):
    """Per-step rewards of the entropy-regularised shortest path problem."""
    fs = flow_structure(game)
    n_a = game.n_actions
    r_nt = fs.target_prob - delta + beta * game.transition_entropy[fs.nt] \
        + beta * coeffs[fs.nt, :n_a]
    term = np.flatnonzero(game.terminal_mask)
    r_term = np.full(game.n_states, np.nan)
    r_term[term] = -delta + beta * coeffs[term, game.eps_action]
    return r_nt, r_term


def _soft_policy_iteration(game, r_nt, r_term, beta, pi0, tol, max_iter):
    fs = flow_structure(game)
    nt = fs.nt
    n_nt, n_a = nt.size, game.n_actions
    term = game.terminal_mask
    V = np.zeros(game.n_states)
    V[term] = r_term[term]
    P_nt = fs.P_nt
    P_term = P_nt[:, np.flatnonzero(term)]
    c_term = np.asarray(P_term @ V[term]).reshape(n_nt, n_a)
    P_ntnt = P_nt[:, nt].tocsr()
    rows = np.repeat(np.arange(n_nt), n_a)
    cols = np.arange(n_nt * n_a)
    pi = pi0
    residual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -np.sum(np.where(pi > 0, pi * np.log(pi), 0.0), axis=1)
        rhs = np.sum(pi * (r_nt + c_term), axis=1) + beta * ent
        agg = sp.csr_matrix((pi.ravel(), (rows, cols)), shape=(n_nt, n_nt * n_a))
        M = sp.identity(n_nt, format="csc") - (agg @ P_ntnt).tocsc()
        V_nt = spla.spsolve(M, rhs)
        if not np.all(np.isfinite(V_nt)) or np.max(np.abs(V_nt)) > 1e12:
            raise SolverError("policy evaluation failed (improper policy)")
        Q = r_nt + c_term + np.asarray(P_ntnt @ V_nt).reshape(n_nt, n_a)
        logits = Q / beta
        lse = logsumexp(logits, axis=1)
        residual = float(np.max(np.abs(beta * lse - V_nt)))
        pi = np.exp(logits - lse[:, None])
        V[nt] = V_nt
        if residual <= tol * max(1.0, float(np.max(np.abs(V_nt)))):
            break
    return pi, V, residual, it


def solve_ccp_subproblem(game: JointGame, linear_coeffs: np.ndarray, delta: float, beta: float,
                         cap: float | None = DEFAULT_CAP, warm_policy: np.ndarray | None = None,
                         backend: str = "soft-bellman", tol: float = 1e-12,
                         max_iter: int = 200) -> SubproblemResult:
    """Maximise ``v - delta*l + beta*H + beta*<linear_coeffs, x>`` over occupancies.

    Parameters
    ----------
    game :
        Augmented joint game.
    linear_coeffs :
        Output of :func:`linearize_convex_part`, shape of an occupancy.
    delta, beta :
        Length and dependency weights. ``beta == 0`` gives the
        length-penalised reachability LP.
    cap :
        Per-state occupancy cap. The conic backend enforces it as a
        constraint; soft policy iteration checks it a posteriori, since its
        optimum is a proper policy with finite occupancy whenever it exists.
    backend :
        ``"soft-bellman"`` (default) or ``"cvxpy"`` (exponential cone).
    """
    game = prepare(game)
    coeffs = np.asarray(linear_coeffs, dtype=float)
    if coeffs.shape != (game.n_states_total, game.n_actions_total):
        raise ValueError("coefficient array has the wrong shape")
    if not np.all(np.isfinite(coeffs)):
        raise ValueError("linear coefficients must be finite")
    if beta < 0 or delta < 0:
        raise ValueError("delta and beta must be nonnegative")
    if beta == 0:
        return _solve_subproblem_lp(game, delta, cap)
    if backend == "cvxpy":
        return _solve_subproblem_cvxpy(game, coeffs, delta, beta, cap)
    if backend != "soft-bellman":
        raise ValueError(f"unknown subproblem backend {backend!r}")
    fs = flow_structure(game)
    r_nt, r_term = _pair_rewards(game, coeffs, delta, beta)
    if fs.nt.size == 0:
        x = complete_terminal_mass(game, np.zeros((0, game.n_actions)))
        val = surrogate_value(game, x, coeffs, delta, beta)
        return SubproblemResult(x, policy_from_occupancy(game, x), val, val, 0.0, 0, "optimal")
    if warm_policy is None:
        pi0 = np.full((fs.nt.size, game.n_actions), 1.0 / game.n_actions)
    else:
        pi0 = np.maximum(np.asarray(warm_policy)[fs.nt, :game.n_actions], 1e-300)
        pi0 = pi0 / pi0.sum(axis=1, keepdims=True)
    pi_nt, V, residual, iters = _soft_policy_iteration(game, r_nt, r_term, beta, pi0, tol, max_iter)
    policy = np.zeros((game.n_states_total, game.n_actions_total))
    policy[fs.nt, :game.n_actions] = pi_nt
    policy[:game.n_states][game.terminal_mask, game.eps_action] = 1.0
    policy[game.end_state, game.eps_action] = 1.0
    x = occupancy_from_policy(game, policy)
    node_mass = x[:game.n_states].sum(axis=1)
    if cap is not None and node_mass.max() > cap:
        raise SolverError(f"occupancy cap {cap} exceeded ({node_mass.max():.3g})", x=x)
    value = surrogate_value(game, x, coeffs, delta, beta)
    dual = float(V[fs.init]) + (1.0 if game.target_mask[fs.init] else 0.0)
    res = float(np.max(np.abs(flow_residual(game, x))))
    status = "optimal" if residual <= 1e-8 * max(1.0, abs(dual)) else "inaccurate"
    if status != "optimal":
        log.warning("soft policy iteration stopped at residual %.3g", residual)
    return SubproblemResult(x, policy, value, dual, res, iters, status)


def _length_weights(game, delta):
    """Objective coefficients of ``v - delta*l`` on the non-terminal block.

    Terminal mass equals the inflow into terminal states, so its length
    contribution is folded into the pairs that feed it.
    """
    fs = flow_structure(game)
    into_term = np.asarray(fs.P_nt @ game.terminal_mask.astype(float)).reshape(fs.nt.size, -1)
    return fs.target_prob - delta * (1.0 + into_term)


def _solve_subproblem_lp(game, delta, cap):
    """beta == 0: a linear program over occupancies (HiGHS)."""
    from scipy.optimize import linprog
    from .occupancy import _lp_arrays
    fs = flow_structure(game)
    _, A_eq, b_eq, A_ub, b_ub = _lp_arrays(game, cap)
    c = _length_weights(game, delta).ravel()
    res = linprog(-c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise SolverError(f"subproblem LP failed: {res.message}", status=res.status)
    x = complete_terminal_mass(game, np.maximum(res.x, 0).reshape(fs.nt.size, game.n_actions))
    v, length = value_and_length_from_occupancy(game, x)
    value = v - delta * length
    return SubproblemResult(x, policy_from_occupancy(game, x), value, value,
                            float(np.max(np.abs(flow_residual(game, x)))), int(res.nit), "optimal")


def _solve_subproblem_cvxpy(game, coeffs, delta, beta, cap):
    """Relative-entropy cone formulation; only practical for small games."""
    import cvxpy as cp
    from .occupancy import _lp_arrays
    fs = flow_structure(game)
    n_nt, n_a = fs.nt.size, game.n_actions
    _, A_eq, b_eq, A_ub, b_ub = _lp_arrays(game, cap)
    term = np.flatnonzero(game.terminal_mask)
    P_term = fs.P_nt[:, term]
    xv = cp.Variable(n_nt * n_a, nonneg=True)
    X = cp.reshape(xv, (n_nt, n_a), order="C")
    tot = cp.sum(X, axis=1)
    term_in = P_term.T @ xv + (term == fs.init).astype(float)
    r_nt, _ = _pair_rewards(game, coeffs, delta, beta)
    lin = r_nt.ravel() @ xv + (-delta + beta * coeffs[term, game.eps_action]) @ term_in
    # x log(X/x) = -rel_entr(x, X)
    ent = -cp.sum(cp.rel_entr(X, cp.reshape(tot, (n_nt, 1), order="C") @ np.ones((1, n_a))))
    cons = [A_eq @ xv == b_eq]
    if A_ub is not None:
        cons.append(A_ub @ xv <= b_ub)
    prob = cp.Problem(cp.Maximize(lin + beta * ent), cons)
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise SolverError(f"conic subproblem failed: {prob.status}", status=prob.status)
    x = complete_terminal_mass(game, np.maximum(xv.value, 0).reshape(n_nt, n_a))
    value = surrogate_value(game, x, coeffs, delta, beta)
    dual = float(prob.value) + (1.0 if game.target_mask[fs.init] else 0.0)
    return SubproblemResult(x, policy_from_occupancy(game, x), value, dual,
                            float(np.max(np.abs(flow_residual(game, x)))), 0, prob.status)


# -- CCP driver ---------------------------------------------------------------

INITS = ("relaxed", "uniform", "baseline", "zero-gradient")


@dataclass
class SynthesisConfig:
    """Parameters of :func:`synthesize_min_dependency`.

    ``init`` picks the first linearisation point:

    ``relaxed``
        start from the uniform joint policy and run ``warmup_iters`` CCP steps
        on the bound with the local end actions left out, then continue on
        the exact objective;
    ``uniform``
        the occupancy of the uniform joint policy;
    ``baseline``
        the baseline LP optimum;
    ``zero-gradient``
        a first step with all linear coefficients zero (solved with the
        conic backend, since only the cap keeps it bounded).
    """

    delta: float = 0.01
    beta: float = 0.4
    max_iters: int = 100
    cap: float = DEFAULT_CAP
    linearization_clamp: float = DEFAULT_CLAMP
    convergence_tol: float | None = None
    init: str = "relaxed"
    warmup_iters: int = 50
    backend: str = "soft-bellman"

    def __post_init__(self):
        if self.delta <= 0 or self.beta <= 0:
            raise ValueError("delta and beta must be positive")
        if not 0 < self.linearization_clamp <= 1e-6:
            raise ValueError("linearization_clamp must lie in (0, 1e-6]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceRecord:
    iter: int
    objective: float
    v_full: float
    l_full: float
    H_joint: float
    H_agents: float
    C_bar: float
    seconds: float = 0.0


@dataclass
class SynthesisTrace:
    records: list = field(default_factory=list)
    warmup: list = field(default_factory=list)
    status: str = "ok"

    def append(self, rec: TraceRecord) -> None:
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "v_full", "l_full", "C_bar"])
            for r in self.records:
                w.writerow([r.iter, repr(r.objective), repr(r.v_full), repr(r.l_full), repr(r.C_bar)])

    @classmethod
    def from_csv(cls, path) -> "SynthesisTrace":
        tr = cls()
        with Path(path).open() as fh:
            for row in csv.DictReader(fh):
                tr.append(TraceRecord(int(row["iter"]), float(row["objective"]), float(row["v_full"]),
                                      float(row["l_full"]), float("nan"), float("nan"),
                                      float(row["C_bar"])))
        return tr


def _record(game, config, k, x, t0):
    terms = objective_terms(game, x, config.delta, config.beta)
    return TraceRecord(k, terms.objective, terms.v_full, terms.l_full, terms.H_joint,
                       terms.H_agents, terms.C_bar, time.perf_counter() - t0)


def uniform_occupancy(game: JointGame) -> np.ndarray:
    game = prepare(game)
    return occupancy_from_policy(game, policy_from_occupancy(game, np.zeros(
        (game.n_states_total, game.n_actions_total))))


def _initial_point(game, config, trace):
    """Returns ``(x, first_coeffs)``; exactly one of them is not None."""
    if config.init == "baseline":
        from .occupancy import solve_baseline_lp
        return solve_baseline_lp(game, cap=config.cap).x, None
    if config.init == "zero-gradient":
        return None, np.zeros((game.n_states_total, game.n_actions_total))
    x = uniform_occupancy(game)
    if config.init == "relaxed":
        warm = None
        for k in range(config.warmup_iters):
            t0 = time.perf_counter()
            coeffs = linearize_convex_part(game, x, config.linearization_clamp, include_end=False)
            sub = solve_ccp_subproblem(game, coeffs, config.delta, config.beta, config.cap,
                                       warm_policy=warm, backend=config.backend)
            x, warm = sub.x, sub.policy
            trace.warmup.append(_record(game, config, k, x, t0))
    return x, None


def synthesize_min_dependency(game: JointGame, config: SynthesisConfig | None = None,
                              callback=None):
    """Run the convex-concave procedure.

    Returns ``(policy, trace, x)``: the policy extracted from the final
    occupancy, the per-iteration trace, and the final occupancy. If a
    subproblem fails the best iterate so far is returned and
    ``trace.status`` records the failure.
    """
    config = config or SynthesisConfig()
    game = prepare(game)
    trace = SynthesisTrace()
    x, coeffs = _initial_point(game, config, trace)
    warm = None if x is None else policy_from_occupancy(game, x)
    best = None
    for k in range(config.max_iters):
        t0 = time.perf_counter()
        backend = config.backend
        if coeffs is None:
            coeffs = linearize_convex_part(game, x, config.linearization_clamp)
        else:
            backend = "cvxpy"     # zero-gradient first step: only the cap bounds it
        try:
            sub = solve_ccp_subproblem(game, coeffs, config.delta, config.beta, config.cap,
                                       warm_policy=warm, backend=backend)
        except (SolverError, np.linalg.LinAlgError) as exc:
            log.warning("subproblem failed at iteration %d: %s", k, exc)
            trace.status = f"subproblem-failed@{k}"
            break
        x, warm, coeffs = sub.x, sub.policy, None
        rec = _record(game, config, k, x, t0)
        trace.append(rec)
        if best is None or rec.objective >= best[0].objective:
            best = (rec, x)
        if callback is not None:
            callback(rec)
        log.info("ccp %3d  obj=%.6f  v=%.5f  l=%.3f  Cbar=%.4f", k, rec.objective,
                 rec.v_full, rec.l_full, rec.C_bar)
        if (config.convergence_tol is not None and len(trace.records) > 1
                and abs(rec.objective - trace.records[-2].objective) < config.convergence_tol):
            break
    if best is None:
        raise SolverError("no CCP iteration succeeded")
    x_final = x if trace.status == "ok" else best[1]
    return policy_from_occupancy(game, x_final), trace, x_final
