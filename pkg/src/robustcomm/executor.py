"""Monte Carlo execution of joint policies under imperfect communication.

Every step of a rollout reads a fixed block of uniforms::

    [comm, act_0 .. act_{N-1}, move_0 .. move_{N-1}, belief(i, j) for i, j != i]

so all backends consume randomness identically and agree sample for sample.
Each rollout owns a Philox stream keyed by the seed with the rollout index in
the high counter word.

Backends
--------
``numba``  scalar loop over rollouts compiled with ``@njit`` (default).
``numpy``  the same recursion vectorized over the active rollouts.
``python`` the scalar loop uncompiled; the only route for ``history_fn``
           channels, whose availability is an arbitrary Python callable.

Set ``ROBUSTCOMM_NO_NUMBA=1`` to make ``numpy`` the default and skip
compilation altogether.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from .infometrics import CommModel
from .markov_game import JointGame, prepare
from .occupancy import check_policy

try:  # pragma: no cover - exercised through the env flag
    import numba
except ImportError:  # pragma: no cover
    numba = None

NUMBA_DISABLED = os.environ.get("ROBUSTCOMM_NO_NUMBA", "").strip().lower() not in ("", "0", "false")
HAVE_NUMBA = numba is not None and not NUMBA_DISABLED
DEFAULT_BACKEND = "numba" if HAVE_NUMBA else "numpy"
BACKENDS = ("numba", "numpy", "python")

SUCCESS, FAILURE, TIMEOUT = 1, -1, 0
OUTCOME_NAMES = {SUCCESS: "success", FAILURE: "failure", TIMEOUT: "timeout"}
DEFAULT_MAX_STEPS = 200
_BLOCK_BYTES = 64 * 2**20


def n_slots(n_agents: int) -> int:
    """Uniforms consumed per step."""
    return 1 + 2 * n_agents + n_agents * (n_agents - 1)


# -- compiled tables ------------------------------------------------------------

def _csr_rows(rows):
    """Pack ``[(next_idx, probs), ...]`` rows into (ptr, next, cum) with exact 1.0 row ends."""
    ptr = np.zeros(len(rows) + 1, dtype=np.int64)
    for r, (idx, _) in enumerate(rows):
        ptr[r + 1] = ptr[r] + len(idx)
    nxt = np.zeros(ptr[-1], dtype=np.int64)
    cum = np.zeros(ptr[-1], dtype=np.float64)
    for r, (idx, pr) in enumerate(rows):
        if len(idx) == 0:
            continue
        lo, hi = ptr[r], ptr[r + 1]
        nxt[lo:hi] = idx
        c = np.cumsum(np.asarray(pr, dtype=np.float64))
        c[-1] = 1.0
        cum[lo:hi] = c
    return ptr, nxt, cum


def _pad(ptr, nxt, cum):
    """Row-padded copies for vectorized inverse-CDF sampling (padding cum = 2)."""
    n = ptr.size - 1
    lens = np.diff(ptr)
    width = max(int(lens.max()) if n else 1, 1)
    pn = np.zeros((n, width), dtype=np.int64)
    pc = np.full((n, width), 2.0)
    col = np.arange(ptr[-1]) - np.repeat(ptr[:-1], lens)
    row = np.repeat(np.arange(n), lens)
    pn[row, col] = nxt
    pc[row, col] = cum
    return pn, pc


@dataclass
class ExecTables:
    """Flat arrays describing a game and a policy for the rollout kernels."""
    n_agents: int
    sprod: np.ndarray
    aprod: np.ndarray
    mact: np.ndarray
    init: np.ndarray
    koff: np.ndarray
    kptr: np.ndarray
    knext: np.ndarray
    kcum: np.ndarray
    pptr: np.ndarray
    pact: np.ndarray
    pcum: np.ndarray
    term: np.ndarray
    target: np.ndarray
    dead: np.ndarray
    _padded: dict | None = None

    def padded(self):
        if self._padded is None:
            kn, kc = _pad(self.kptr, self.knext, self.kcum)
            pn, pc = _pad(self.pptr, self.pact, self.pcum)
            self._padded = {"kn": kn, "kc": kc, "pn": pn, "pc": pc}
        return self._padded


def build_tables(game: JointGame, policy: np.ndarray) -> ExecTables:
    game = prepare(game)
    policy = np.asarray(policy, dtype=float)
    check_policy(game, policy)
    n = game.n_agents
    srad = np.array(game.state_radix, dtype=np.int64)
    arad = np.array(game.action_radix, dtype=np.int64)
    sprod = np.concatenate([[1], np.cumprod(srad)[:-1]]).astype(np.int64)
    aprod = np.concatenate([[1], np.cumprod(arad)[:-1]]).astype(np.int64)
    rows, koff = [], np.zeros(n, dtype=np.int64)
    for j, m in enumerate(game.agents):
        koff[j] = len(rows)
        for s in range(m.n_states):
            for a in range(m.n_actions):
                rows.append(m.supports[s][a])
    kptr, knext, kcum = _csr_rows(rows)
    term = np.asarray(game.terminal_mask[:game.n_states], dtype=np.bool_)
    prows = []
    pi = policy[:game.n_states, :game.n_actions]
    for s in range(game.n_states):
        if term[s]:
            prows.append((np.zeros(0, np.int64), np.zeros(0)))
        else:
            nz = np.flatnonzero(pi[s] > 0)
            prows.append((nz, pi[s, nz] / pi[s, nz].sum()))
    pptr, pact, pcum = _csr_rows(prows)
    dead = np.zeros(game.n_states, dtype=np.bool_)
    dead[list(game.dead_set)] = True
    return ExecTables(n, sprod, aprod, arad, np.array([m.initial for m in game.agents], np.int64),
                      koff, kptr, knext, kcum, pptr, pact, pcum, term,
                      np.asarray(game.target_mask[:game.n_states], dtype=np.bool_), dead)


# -- communication encoding -------------------------------------------------------

def comm_arrays(comm: CommModel, max_steps: int):
    """(avail_det[t], rate, persistent): lambda_t = avail_det[t] and u >= rate, latched if persistent."""
    det = np.ones(max_steps, dtype=np.bool_)
    rate = 0.0
    v = comm.variant
    if v == "loss_at":
        t = np.arange(max_steps)
        det = t < comm.t_loss
    elif v == "bernoulli_persistent":
        rate = comm.p
    elif v == "bernoulli_intermittent":
        rate = comm.q
    elif v == "schedule":
        bits = list(comm.schedule_bits[:max_steps])
        bits += [comm.fill] * (max_steps - len(bits))
        det = np.array(bits, dtype=np.bool_)
    elif v == "history_fn":
        raise ValueError("history_fn channels run on the python backend only")
    return det, float(rate), bool(comm.persistent)


# -- scalar kernel (compiled with numba when enabled) --------------------------------

def _sample(ptr, nxt, cum, row, u):
    k = ptr[row]
    end = ptr[row + 1] - 1
    while k < end and cum[k] <= u:
        k += 1
    return nxt[k]


def _digit(index, prod, radix, i):
    return (index // prod[i]) % radix[i]


def _step_block(U, t, r, N, true, stopped, bel, bact, hasprev, act, lam,
                sprod, aprod, mact, init, koff, kptr, knext, kcum, pptr, pact, pcum, term,
                modified):
    """One step after the outcome checks. Returns 0 to continue or FAILURE."""
    s = 0
    for i in range(N):
        s += true[i] * sprod[i]
    if lam:
        a = _sample(pptr, pact, pcum, s, U[r, t, 1])
        for i in range(N):
            stopped[i] = False
            hasprev[i] = True
            bact[i] = a
            act[i] = _digit(a, aprod, mact, i)
            for j in range(N):
                bel[i, j] = true[j]
    else:
        anystop = False
        b = np.empty(N, dtype=np.int64)
        for i in range(N):
            if stopped[i]:
                continue
            slot = 1 + 2 * N + i * (N - 1)
            for j in range(N):
                if j == i:
                    b[j] = true[i]
                    continue
                if hasprev[i]:
                    row = koff[j] + bel[i, j] * mact[j] + _digit(bact[i], aprod, mact, j)
                    b[j] = _sample(kptr, knext, kcum, row, U[r, t, slot])
                else:
                    b[j] = init[j]
                slot += 1
            sb = 0
            for j in range(N):
                sb += b[j] * sprod[j]
            if term[sb]:
                stopped[i] = True
                hasprev[i] = False
                anystop = True
                continue
            a = _sample(pptr, pact, pcum, sb, U[r, t, 1 + i])
            act[i] = _digit(a, aprod, mact, i)
            bact[i] = a
            hasprev[i] = True
            for j in range(N):
                bel[i, j] = b[j]
        nstop = 0
        for i in range(N):
            if stopped[i]:
                nstop += 1
        if nstop == N or (modified and anystop):
            return FAILURE
    for i in range(N):
        if not stopped[i]:
            row = koff[i] + true[i] * mact[i] + act[i]
            true[i] = _sample(kptr, knext, kcum, row, U[r, t, 1 + N + i])
    return 0


def _check_state(true, sprod, target, dead):
    s = 0
    for i in range(true.size):
        s += true[i] * sprod[i]
    if target[s]:
        return s, SUCCESS
    if dead[s]:
        return s, FAILURE
    return s, 0


def _simulate_block(U, outcome, length, path, record,
                    sprod, aprod, mact, init, koff, kptr, knext, kcum, pptr, pact, pcum,
                    term, target, dead, avail_det, rate, persistent, modified):
    n, T = U.shape[0], U.shape[1]
    N = init.size
    true = np.empty(N, dtype=np.int64)
    stopped = np.zeros(N, dtype=np.bool_)
    hasprev = np.zeros(N, dtype=np.bool_)
    bel = np.zeros((N, N), dtype=np.int64)
    bact = np.zeros(N, dtype=np.int64)
    act = np.zeros(N, dtype=np.int64)
    for r in range(n):
        for i in range(N):
            true[i] = init[i]
            stopped[i] = False
            hasprev[i] = False
        lost = False
        outcome[r] = TIMEOUT
        length[r] = T + 1
        for t in range(T + 1):
            s, res = _check_state(true, sprod, target, dead)
            if record:
                path[r, t] = s
            if res != 0:
                outcome[r] = res
                length[r] = t + 1
                break
            if t == T:
                break
            lam = avail_det[t] and U[r, t, 0] >= rate and not (persistent and lost)
            if not lam:
                lost = True
            res = _step_block(U, t, r, N, true, stopped, bel, bact, hasprev, act, lam,
                              sprod, aprod, mact, init, koff, kptr, knext, kcum,
                              pptr, pact, pcum, term, modified)
            if res != 0:
                outcome[r] = res
                length[r] = t + 1
                break


_py_sample, _py_digit, _py_step_block, _py_check_state, _py_simulate_block = (
    _sample, _digit, _step_block, _check_state, _simulate_block)

if HAVE_NUMBA:
    _sample = numba.njit(cache=True)(_py_sample)
    _digit = numba.njit(cache=True)(_py_digit)
    _step_block = numba.njit(cache=True)(_py_step_block)
    _check_state = numba.njit(cache=True)(_py_check_state)
    _nb_simulate_block = numba.njit(cache=True)(_py_simulate_block)
else:
    _nb_simulate_block = None


def _table_args(tb: ExecTables):
    return (tb.sprod, tb.aprod, tb.mact, tb.init, tb.koff, tb.kptr, tb.knext, tb.kcum,
            tb.pptr, tb.pact, tb.pcum, tb.term, tb.target, tb.dead)


# -- vectorized numpy fallback -------------------------------------------------------

def _simulate_block_numpy(U, outcome, length, path, record, tb: ExecTables,
                          avail_det, rate, persistent, modified):
    n, T = U.shape[0], U.shape[1]
    N = tb.n_agents
    pd = tb.padded()
    kn, kc, pn, pc = pd["kn"], pd["kc"], pd["pn"], pd["pc"]

    def sample(nx, cm, rows, u):
        k = (cm[rows] <= u[:, None]).sum(axis=1)
        return nx[rows, k]

    def digit(a, i):
        return (a // tb.aprod[i]) % tb.mact[i]

    true = np.tile(tb.init, (n, 1))
    stopped = np.zeros((n, N), dtype=bool)
    hasprev = np.zeros((n, N), dtype=bool)
    bel = np.zeros((n, N, N), dtype=np.int64)
    bact = np.zeros((n, N), dtype=np.int64)
    act = np.zeros((n, N), dtype=np.int64)
    lost = np.zeros(n, dtype=bool)
    outcome[:] = TIMEOUT
    length[:] = T + 1
    live = np.arange(n)
    for t in range(T + 1):
        if live.size == 0:
            break
        s = true[live] @ tb.sprod
        if record:
            path[live, t] = s
        hit_t, hit_d = tb.target[s], tb.dead[s]
        outcome[live[hit_t]] = SUCCESS
        outcome[live[hit_d & ~hit_t]] = FAILURE
        length[live[hit_t | hit_d]] = t + 1
        keep = ~(hit_t | hit_d)
        live, s = live[keep], s[keep]
        if t == T or live.size == 0:
            break
        u = U[live, t]
        lam = avail_det[t] & (u[:, 0] >= rate) & ~(persistent & lost[live])
        lost[live[~lam]] = True

        # communicating rollouts: one shared draw at the true state
        c = live[lam]
        if c.size:
            a = sample(pn, pc, s[lam], u[lam, 1])
            stopped[c] = False
            hasprev[c] = True
            bact[c] = a[:, None]
            for i in range(N):
                act[c, i] = digit(a, i)
            bel[c] = true[c][:, None, :]

        # imaginary play
        q = ~lam
        anystop = np.zeros(live.size, dtype=bool)
        for i in range(N):
            m = q & ~stopped[live, i]
            if not m.any():
                continue
            r, um = live[m], u[m]
            b = np.empty((r.size, N), dtype=np.int64)
            slot = 1 + 2 * N + i * (N - 1)
            hp = hasprev[r, i]
            for j in range(N):
                if j == i:
                    b[:, j] = true[r, i]
                    continue
                b[:, j] = tb.init[j]
                if hp.any():
                    rows = tb.koff[j] + bel[r[hp], i, j] * tb.mact[j] + digit(bact[r[hp], i], j)
                    b[hp, j] = sample(kn, kc, rows, um[hp, slot])
                slot += 1
            sb = b @ tb.sprod
            st = tb.term[sb]
            stopped[r[st], i] = True
            hasprev[r[st], i] = False
            anystop[np.flatnonzero(m)[st]] = True
            go = ~st
            if go.any():
                rg = r[go]
                a = sample(pn, pc, sb[go], um[go, 1 + i])
                act[rg, i] = digit(a, i)
                bact[rg, i] = a
                hasprev[rg, i] = True
                bel[rg, i] = b[go]
        fail = q & (stopped[live].all(axis=1) | (bool(modified) & anystop))
        outcome[live[fail]] = FAILURE
        length[live[fail]] = t + 1
        live, u = live[~fail], u[~fail]

        # true moves of the agents still running
        for i in range(N):
            m = ~stopped[live, i]
            if not m.any():
                continue
            r = live[m]
            rows = tb.koff[i] + true[r, i] * tb.mact[i] + act[r, i]
            true[r, i] = sample(kn, kc, rows, u[m, 1 + N + i])


# -- python route for history-dependent channels ---------------------------------------

def _simulate_block_history(U, outcome, length, path, record, tb: ExecTables, comm: CommModel,
                            modified):
    n, T = U.shape[0], U.shape[1]
    N = tb.n_agents
    for r in range(n):
        true = tb.init.copy()
        stopped = np.zeros(N, dtype=np.bool_)
        hasprev = np.zeros(N, dtype=np.bool_)
        bel = np.zeros((N, N), dtype=np.int64)
        bact = np.zeros(N, dtype=np.int64)
        act = np.zeros(N, dtype=np.int64)
        lost = False
        hist = ()
        outcome[r] = TIMEOUT
        length[r] = T + 1
        for t in range(T + 1):
            s, res = _check_state(true, tb.sprod, tb.target, tb.dead)
            if record:
                path[r, t] = s
            if res != 0:
                outcome[r], length[r] = res, t + 1
                break
            if t == T:
                break
            if lost and comm.persistent:
                lam = False
            else:
                lam = bool((comm.branches(t, lost, hist))[0][0])
            lost = lost or not lam
            state_before = tuple(int(v) for v in true)
            res = _step_block(U, t, r, N, true, stopped, bel, bact, hasprev, act, lam,
                              tb.sprod, tb.aprod, tb.mact, tb.init, tb.koff, tb.kptr, tb.knext,
                              tb.kcum, tb.pptr, tb.pact, tb.pcum, tb.term, modified)
            if res != 0:
                outcome[r], length[r] = res, t + 1
                break
            # stopped agents are recorded with END, matching the exact enumerator
            acts = tuple(-1 if stopped[i] else int(act[i]) for i in range(N))
            hist = hist + ((state_before, acts),)


# -- randomness ------------------------------------------------------------------------

def rollout_uniforms(seed: int, start: int, stop: int, max_steps: int, n_agents: int) -> np.ndarray:
    """Uniform blocks for rollouts ``start .. stop-1``; shape (n, max_steps, slots).

    Rollout ``r`` reads its own Philox stream (key = seed, counter high word = r),
    so any subset of rollouts can be regenerated independently.
    """
    k = n_slots(n_agents)
    out = np.empty((stop - start, max_steps, k))
    for r in range(start, stop):
        bitgen = np.random.Philox(key=int(seed), counter=[0, 0, 0, r])
        out[r - start] = np.random.Generator(bitgen).random((max_steps, k))
    return out


def _run(tb: ExecTables, comm: CommModel, U: np.ndarray, backend: str, record: bool,
         modified: bool):
    n, T = U.shape[0], U.shape[1]
    outcome = np.zeros(n, dtype=np.int64)
    length = np.zeros(n, dtype=np.int64)
    path = np.full((n, T + 1) if record else (1, 1), -1, dtype=np.int64)
    if comm.variant == "history_fn":
        _simulate_block_history(U, outcome, length, path, record, tb, comm, modified)
        return outcome, length, path
    det, rate, persistent = comm_arrays(comm, T)
    if backend == "numba":
        if _nb_simulate_block is None:
            raise RuntimeError("numba backend requested but numba is unavailable or disabled")
        _nb_simulate_block(U, outcome, length, path, record, *_table_args(tb),
                           det, rate, persistent, modified)
    elif backend == "numpy":
        _simulate_block_numpy(U, outcome, length, path, record, tb, det, rate, persistent, modified)
    elif backend == "python":
        _py_simulate_block(U, outcome, length, path, record, *_table_args(tb),
                           det, rate, persistent, modified)
    else:
        raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    return outcome, length, path


def _validate(max_steps):
    if int(max_steps) < 1:
        raise ValueError("max_steps must be >= 1")


# -- public API --------------------------------------------------------------------------

def rollout(game: JointGame, policy: np.ndarray, comm: CommModel | None = None,
            rng: np.random.Generator | None = None, max_steps: int = DEFAULT_MAX_STEPS,
            backend: str | None = None, modified_metric: bool = False):
    """Run one episode and return ``(path, outcome)``.

    ``path`` lists the true joint states visited (up to and including the one
    that decided the outcome) and ``outcome`` is ``"success"``, ``"failure"``
    or ``"timeout"``.

    With ``modified_metric`` the episode also fails as soon as any agent
    stops on its beliefs before the team has reached the target.
    """
    _validate(max_steps)
    comm = comm or CommModel.full()
    rng = rng if rng is not None else np.random.default_rng()
    tb = build_tables(game, policy)
    U = rng.random((1, max_steps, n_slots(tb.n_agents)))
    outcome, length, path = _run(tb, comm, U, backend or DEFAULT_BACKEND, True, modified_metric)
    states = [int(v) for v in path[0, :length[0]]]
    return states, OUTCOME_NAMES[int(outcome[0])]


@dataclass
class RolloutReport:
    n_rollouts: int
    successes: int
    timeouts: int
    rate: float
    stderr: float
    mean_length: float
    comm: dict
    seed: int
    max_steps: int

    def to_dict(self) -> dict:
        return asdict(self)


def simulate(game: JointGame, policy: np.ndarray, comm: CommModel | None = None,
             n_rollouts: int = 10_000, seed: int = 0, max_steps: int = DEFAULT_MAX_STEPS,
             backend: str | None = None, modified_metric: bool = False, tables=None):
    """Raw per-rollout ``(outcome, length)`` arrays; see :func:`estimate_success`."""
    _validate(max_steps)
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    comm = comm or CommModel.full()
    tb = tables if tables is not None else build_tables(game, policy)
    backend = backend or DEFAULT_BACKEND
    per = max_steps * n_slots(tb.n_agents) * 8
    block = max(1, min(n_rollouts, _BLOCK_BYTES // per))
    outcome = np.empty(n_rollouts, dtype=np.int64)
    length = np.empty(n_rollouts, dtype=np.int64)
    for lo in range(0, n_rollouts, block):
        hi = min(n_rollouts, lo + block)
        U = rollout_uniforms(seed, lo, hi, max_steps, tb.n_agents)
        o, l, _ = _run(tb, comm, U, backend, False, modified_metric)
        outcome[lo:hi], length[lo:hi] = o, l
    return outcome, length


def estimate_success(game: JointGame, policy: np.ndarray, comm: CommModel | None = None,
                     n_rollouts: int = 10_000, seed: int = 0,
                     max_steps: int = DEFAULT_MAX_STEPS, backend: str | None = None,
                     modified_metric: bool = False, tables=None) -> RolloutReport:
    """Success rate of ``policy`` over ``n_rollouts`` seeded rollouts.

    Timeouts count as failures. ``mean_length`` averages the number of true
    joint states visited until the outcome was decided.

    Examples
    --------
    >>> from robustcomm.fixtures import two_line
    >>> import numpy as np
    >>> g = two_line()
    >>> pi = np.zeros((g.n_states + 1, g.n_actions + 1)); pi[:, 0] = 1
    >>> pi[3:] = (0, 1)
    >>> estimate_success(g, pi, n_rollouts=10, seed=1).rate
    1.0
    """
    comm = comm or CommModel.full()
    outcome, length = simulate(game, policy, comm, n_rollouts, seed, max_steps, backend,
                               modified_metric, tables)
    k = int(np.sum(outcome == SUCCESS))
    v = k / n_rollouts
    return RolloutReport(n_rollouts=int(n_rollouts), successes=k,
                         timeouts=int(np.sum(outcome == TIMEOUT)), rate=v,
                         stderr=math.sqrt(v * (1.0 - v) / n_rollouts),
                         mean_length=float(length.mean()), comm=comm.describe(),
                         seed=int(seed), max_steps=int(max_steps))


SWEEP_COLUMNS = ("q", "rate", "stderr", "mean_len")
DEFAULT_Q_GRID = tuple(round(0.1 * k, 1) for k in range(11))


def sweep_dropout(game: JointGame, policy: np.ndarray, q_grid=DEFAULT_Q_GRID,
                  n_rollouts: int = 10_000, seed: int = 0, max_steps: int = DEFAULT_MAX_STEPS,
                  backend: str | None = None, path=None) -> list[dict]:
    """Success rate under intermittent communication for each dropout rate ``q``.

    All ``q`` share the seed (common random numbers), so ``q = 0`` reproduces
    the full-communication estimate exactly. Writes a CSV when ``path`` is given.
    """
    tb = build_tables(game, policy)
    rows = []
    for q in q_grid:
        rep = estimate_success(game, policy, CommModel.bernoulli_intermittent(float(q)),
                               n_rollouts, seed, max_steps, backend, tables=tb)
        rows.append({"q": float(q), "rate": rep.rate, "stderr": rep.stderr,
                     "mean_len": rep.mean_length})
    if path is not None:
        write_sweep_csv(path, rows)
    return rows


def _fmt(v: float) -> str:
    return repr(float(v))


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
