"""Occupancy measures over augmented joint games.

An occupancy vector is a dense array ``x`` of shape
``(game.n_states_total, game.n_actions_total)``: rows are joint states with
the end state last, columns are joint actions with the end action last.
Only admissible pairs may be nonzero: ordinary actions at non-terminal
states and the end action at terminal states. The end-state row is zero.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .markov_game import JointGame, GameError, prepare

log = logging.getLogger(__name__)

DEFAULT_CAP = 1e4
POLICY_THRESHOLD = 1e-12


class SolverError(RuntimeError):
    def __init__(self, message, status=None, x=None):
        super().__init__(message)
        self.status = status
        self.x = x


class NonAbsorbingPolicyError(GameError):
    def __init__(self, message, states=()):
        super().__init__(message)
        self.states = tuple(states)


def zeros(game: JointGame) -> np.ndarray:
    return np.zeros((game.n_states_total, game.n_actions_total))


def admissible_mask(game: JointGame) -> np.ndarray:
    game._require_augmented()
    mask = np.zeros((game.n_states_total, game.n_actions_total), dtype=bool)
    term = game.terminal_mask
    mask[:game.n_states][~term, :game.n_actions] = True
    mask[:game.n_states][term, game.eps_action] = True
    return mask


def nonterminal_states(game: JointGame) -> np.ndarray:
    return np.flatnonzero(~game.terminal_mask)


@dataclass
class FlowStructure:
    """Sparse pieces of the flow equations restricted to non-terminal states."""

    nt: np.ndarray               # non-terminal joint states
    P_nt: sp.csr_matrix           # (|nt|*A, S): rows for non-terminal pairs
    target_prob: np.ndarray       # (|nt|, A): probability of entering S_T
    init: int

    @property
    def n_pairs(self) -> int:
        return self.P_nt.shape[0]


def flow_structure(game: JointGame) -> FlowStructure:
    cached = game._cache.get("flow")
    if cached is not None:
        return cached
    game._require_augmented()
    nt = nonterminal_states(game)
    n_a = game.n_actions
    rows = (nt[:, None] * n_a + np.arange(n_a)[None, :]).ravel()
    P_nt = game.transition_matrix[rows]
    target_prob = np.asarray(P_nt @ game.target_mask.astype(float)).reshape(nt.size, n_a)
    fs = FlowStructure(nt=nt, P_nt=P_nt, target_prob=target_prob, init=game.joint_initial)
    game._cache["flow"] = fs
    return fs


def inflow(game: JointGame, x: np.ndarray) -> np.ndarray:
    """Expected arrivals into each joint state (excluding the end state), plus the initial mass."""
    fs = flow_structure(game)
    arrivals = fs.P_nt.T @ x[fs.nt, :game.n_actions].ravel()
    arrivals = np.asarray(arrivals, dtype=float)
    arrivals[fs.init] += 1.0
    return arrivals


def flow_residual(game: JointGame, x: np.ndarray) -> np.ndarray:
    """Outflow minus inflow minus initial mass, for every state but the end state."""
    x = np.asarray(x, dtype=float)
    out = x[:game.n_states].sum(axis=1)
    return out - inflow(game, x)


def complete_terminal_mass(game: JointGame, x_nt: np.ndarray) -> np.ndarray:
    """Full occupancy from the non-terminal block ``x_nt`` of shape (|nt|, A)."""
    fs = flow_structure(game)
    x = zeros(game)
    x[fs.nt, :game.n_actions] = x_nt
    arrivals = inflow(game, x)
    term = np.flatnonzero(game.terminal_mask)
    x[term, game.eps_action] = arrivals[term]
    return x


def value_and_length_from_occupancy(game: JointGame, x: np.ndarray) -> tuple[float, float]:
    """Reach-avoid probability and expected path length of an occupancy."""
    fs = flow_structure(game)
    v = float((x[fs.nt, :game.n_actions] * fs.target_prob).sum())
    if game.target_mask[fs.init]:
        v += 1.0
    length = float(x[:game.n_states].sum())
    return v, length


# -- baseline LP ------------------------------------------------------------

@dataclass
class LPResult:
    x: np.ndarray
    value: float
    status: str
    backend: str
    n_variables: int
    n_constraints: int


def constraint_census(game: JointGame, cap: float | None = DEFAULT_CAP) -> dict:
    """Sizes of the occupancy program as we build it."""
    game = prepare(game)
    n_nt = int((~game.terminal_mask).sum())
    n_term = int(game.terminal_mask.sum())
    return {
        "joint_states": game.n_states,
        "joint_actions": game.n_actions,
        "variables_full_grid": game.n_states * game.n_actions,
        "variables_nonterminal": n_nt * game.n_actions,
        "variables_terminal_eps": n_term,
        "flow_equalities": n_nt,
        "cap_inequalities": n_nt if cap is not None else 0,
        "nonnegativity": n_nt * game.n_actions,
    }


def _lp_arrays(game: JointGame, cap):
    fs = flow_structure(game)
    n_nt, n_a = fs.nt.size, game.n_actions
    n = n_nt * n_a
    pos = np.full(game.n_states, -1)
    pos[fs.nt] = np.arange(n_nt)
    out_mat = sp.kron(sp.identity(n_nt, format="csr"), np.ones((1, n_a)), format="csr")
    in_mat = fs.P_nt[:, fs.nt].T.tocsr()
    A_eq = (out_mat - in_mat).tocsr()
    b_eq = np.zeros(n_nt)
    if pos[fs.init] >= 0:
        b_eq[pos[fs.init]] = 1.0
    c = fs.target_prob.ravel()
    A_ub = out_mat if cap is not None else None
    b_ub = np.full(n_nt, float(cap)) if cap is not None else None
    return c, A_eq, b_eq, A_ub, b_ub


def solve_baseline_lp(game: JointGame, cap: float | None = DEFAULT_CAP,
                      backend: str = "clarabel", tol: float = 1e-10) -> LPResult:
    """Maximise the reach-avoid probability over occupancy measures.

    ``backend='highs'`` returns a simplex vertex (a deterministic policy);
    ``backend='clarabel'`` runs an interior-point method without crossover and
    lands near the relative interior of the optimal face, so ties between
    equally good joint actions are split rather than broken arbitrarily.
    """
    game = prepare(game)
    fs = flow_structure(game)
    c, A_eq, b_eq, A_ub, b_ub = _lp_arrays(game, cap)
    n = c.size
    if fs.nt.size == 0:
        x = complete_terminal_mass(game, np.zeros((0, game.n_actions)))
        v, _ = value_and_length_from_occupancy(game, x)
        return LPResult(x, v, "optimal", backend, 0, 0)
    if backend == "highs":
        from scipy.optimize import linprog
        res = linprog(-c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                      bounds=(0, None), method="highs",
                      options={"primal_feasibility_tolerance": 1e-10,
                               "dual_feasibility_tolerance": 1e-10})
        if res.status != 0:
            raise SolverError(f"HiGHS failed: {res.message}", status=res.status)
        xv = np.maximum(res.x, 0.0)
        status = "optimal"
    elif backend == "clarabel":
        import cvxpy as cp
        xvar = cp.Variable(n, nonneg=True)
        cons = [A_eq @ xvar == b_eq]
        if A_ub is not None:
            cons.append(A_ub @ xvar <= b_ub)
        prob = cp.Problem(cp.Maximize(c @ xvar), cons)
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=tol, tol_gap_rel=tol,
                   tol_feas=tol, max_iter=400)
        if prob.status not in ("optimal", "optimal_inaccurate"):
            raise SolverError(f"Clarabel failed: {prob.status}", status=prob.status)
        xv = np.maximum(np.asarray(xvar.value).ravel(), 0.0)
        status = prob.status
    else:
        raise ValueError(f"unknown LP backend {backend!r}")
    x = complete_terminal_mass(game, xv.reshape(fs.nt.size, game.n_actions))
    v, _ = value_and_length_from_occupancy(game, x)
    return LPResult(x, v, status, backend, n, A_eq.shape[0] + (0 if A_ub is None else A_ub.shape[0]))


# -- policies ---------------------------------------------------------------

def policy_from_occupancy(game: JointGame, x: np.ndarray,
                          threshold: float = POLICY_THRESHOLD) -> np.ndarray:
    """Normalise occupancy rows into a stationary joint policy.

    Returns an array of shape ``(n_states_total, n_actions_total)``. Terminal
    states and the end state put all mass on the end action. Non-terminal
    rows with total mass at or below ``threshold`` are uniform over the
    ordinary joint actions.
    """
    game = prepare(game)
    n_a = game.n_actions
    pi = np.zeros((game.n_states_total, game.n_actions_total))
    block = np.asarray(x, dtype=float)[:game.n_states, :n_a]
    if np.any(block < 0):
        raise ValueError("occupancy must be nonnegative")
    tot = block.sum(axis=1)
    nt = ~game.terminal_mask
    good = nt & (tot > threshold)
    pi[:game.n_states][good, :n_a] = block[good] / tot[good, None]
    pi[:game.n_states][nt & ~good, :n_a] = 1.0 / n_a
    pi[:game.n_states][game.terminal_mask, game.eps_action] = 1.0
    pi[game.end_state, game.eps_action] = 1.0
    return pi


def check_policy(game: JointGame, pi: np.ndarray, tol: float = 1e-9) -> None:
    if pi.shape != (game.n_states_total, game.n_actions_total):
        raise ValueError(f"policy shape {pi.shape} does not match game")
    if np.any(pi < -tol):
        raise ValueError("policy has negative entries")
    rows = pi.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > tol):
        raise ValueError("policy rows must sum to one")


def policy_transition(game: JointGame, pi: np.ndarray) -> sp.csr_matrix:
    """Markov chain on non-terminal states induced by ``pi``: (|nt|, S)."""
    fs = flow_structure(game)
    w = pi[fs.nt, :game.n_actions].ravel()
    n_nt, n_a = fs.nt.size, game.n_actions
    agg = sp.csr_matrix((w, (np.repeat(np.arange(n_nt), n_a), np.arange(n_nt * n_a))),
                        shape=(n_nt, n_nt * n_a))
    return (agg @ fs.P_nt).tocsr()


def occupancy_from_policy(game: JointGame, pi: np.ndarray) -> np.ndarray:
    """Expected visit counts under stationary ``pi`` (undiscounted, absorbing)."""
    game = prepare(game)
    check_policy(game, pi)
    fs = flow_structure(game)
    n_nt = fs.nt.size
    if n_nt == 0:
        return complete_terminal_mass(game, np.zeros((0, game.n_actions)))
    Q = policy_transition(game, pi)[:, fs.nt]
    M = (sp.identity(n_nt, format="csc") - Q.T).tocsc()
    b = np.zeros(n_nt)
    pos = np.searchsorted(fs.nt, fs.init)
    if pos < n_nt and fs.nt[pos] == fs.init:
        b[pos] = 1.0
    _check_absorbing(game, Q, fs)
    occ = spla.spsolve(M, b)
    occ = np.maximum(np.asarray(occ).ravel(), 0.0)
    x_nt = occ[:, None] * pi[fs.nt, :game.n_actions]
    return complete_terminal_mass(game, x_nt)


def _check_absorbing(game, Q, fs) -> None:
    """Every non-terminal state reachable from the initial state must leak to a terminal state."""
    n = fs.nt.size
    G = (Q > 0).astype(np.int32).tocsr()
    leaks = np.asarray(Q.sum(axis=1)).ravel() < 1.0 - 1e-12
    # states that can reach a leaking state (walk edges backwards)
    can_leak = leaks.copy()
    frontier = can_leak.copy()
    while frontier.any():
        nxt = (G @ frontier.astype(np.int32)) > 0
        nxt = np.asarray(nxt).ravel() & ~can_leak
        can_leak |= nxt
        frontier = nxt
    pos = np.searchsorted(fs.nt, fs.init)
    if not (pos < n and fs.nt[pos] == fs.init):
        return
    reach = np.zeros(n, dtype=bool)
    reach[pos] = True
    frontier = reach.copy()
    while frontier.any():
        nxt = np.asarray((G.T @ frontier.astype(np.int32)) > 0).ravel() & ~reach
        reach |= nxt
        frontier = nxt
    trapped = reach & ~can_leak
    if trapped.any():
        raise NonAbsorbingPolicyError(
            "policy has a recurrent class that never reaches S_T ∪ S_D",
            states=fs.nt[trapped].tolist())


def agent_marginals(game: JointGame, x: np.ndarray, i: int) -> np.ndarray:
    """Per-agent occupancy ``x_{s^i, a^i}`` with the end action as the last column.

    Shape ``(n_local_states + 1, n_local_actions + 1)``; the last row (local end
    state) is zero.
    """
    game._require_augmented()
    m = game.agents[i]
    out = np.zeros((m.n_states + 1, m.n_actions + 1))
    sd = game.state_digits[:, i]
    ad = game.action_digits[:, i]
    block = x[:game.n_states, :game.n_actions]
    by_state = np.zeros((m.n_states, game.n_actions))
    np.add.at(by_state, sd, block)
    np.add.at(out[:m.n_states, :m.n_actions].T, ad, by_state.T)
    np.add.at(out[:m.n_states, m.n_actions], sd, x[:game.n_states, game.eps_action])
    return out


def marginal_operator(game: JointGame, i: int) -> sp.csr_matrix:
    """Linear map from flattened joint x to flattened agent-i marginals."""
    cache = game._cache.setdefault("marg_ops", {})
    if i in cache:
        return cache[i]
    m = game.agents[i]
    n_s, n_a = game.n_states, game.n_actions
    S, A = game.n_states_total, game.n_actions_total
    sd = game.state_digits[:, i]
    ad = game.action_digits[:, i]
    rows_j = (np.arange(n_s)[:, None] * A + np.arange(n_a)[None, :]).ravel()
    cols_m = (sd[:, None] * (m.n_actions + 1) + ad[None, :]).ravel()
    eps_rows = np.arange(n_s) * A + n_a
    eps_cols = sd * (m.n_actions + 1) + m.n_actions
    r = np.concatenate([cols_m, eps_cols])
    c = np.concatenate([rows_j, eps_rows])
    op = sp.csr_matrix((np.ones(r.size), (r, c)), shape=((m.n_states + 1) * (m.n_actions + 1), S * A))
    cache[i] = op
    return op


def state_occupancy_grid(game: JointGame, x: np.ndarray, i: int) -> np.ndarray:
    """Local state occupancy ``x_{s^i}`` (ordinary actions plus end action)."""
    marg = agent_marginals(game, x, i)
    return marg[:-1].sum(axis=1)


# -- serialisation ----------------------------------------------------------

def write_occupancy_csv(path, game: JointGame, x: np.ndarray, tol: float = 0.0) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["joint_state", "joint_action", "x"])
        for s, a in zip(*np.nonzero(np.abs(x) > tol)):
            w.writerow([int(s), int(a), repr(float(x[s, a]))])


def read_occupancy_csv(path, game: JointGame) -> np.ndarray:
    x = zeros(game)
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            x[int(row["joint_state"]), int(row["joint_action"])] = float(row["x"])
    return x


def write_heatmap_csv(path, game: JointGame, x: np.ndarray) -> None:
    """Per-agent local state occupancy on grid coordinates."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["agent", "x", "y", "occupancy"])
        for i, m in enumerate(game.agents):
            occ = state_occupancy_grid(game, x, i)
            labels = m.state_labels or tuple((k, 0) for k in range(m.n_states))
            for (cx, cy), val in zip(labels, occ):
                w.writerow([i, cx, cy, repr(float(val))])


def read_heatmap_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{"agent": int(r["agent"]), "x": int(r["x"]), "y": int(r["y"]),
                 "occupancy": float(r["occupancy"])} for r in csv.DictReader(fh)]
