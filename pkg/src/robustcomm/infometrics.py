"""Path-distribution oracles, total correlation, KL lemmas and performance bounds.

Paths are recorded agent by agent: a path is a tuple holding, for every
agent, its local sequence ``(s_0, a_0, s_1, a_1, ..., s_tau, END)`` where
``tau`` is the step at which that agent stops (its believed joint state
entered S_T ∪ S_D). Under full communication all agents stop together and
the tuple is just the joint path. When communication comes back while the
true joint state is not terminal, stopped agents rejoin the team; their
sequence then continues after ``(RESUME, t)``. With this encoding the no-communication
distribution is exactly the product of the full-communication marginals, so
``KL(full || img_0)`` equals the total correlation.

Everything here enumerates exactly and is meant for tiny games.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, asdict
from typing import Callable, Mapping

import numpy as np

from .markov_game import JointGame, GameError, prepare

END = -1          # local end action / stopped marker in recorded sequences
RESUME = -2       # followed by the step at which a stopped agent rejoined
ABSORB_TOL = 1e-9


class HorizonError(RuntimeError):
    """Enumeration did not absorb enough mass within the horizon."""


class SupportOverflow(RuntimeError):
    """Enumeration frontier exceeded the configured cap."""


# -- basic quantities ---------------------------------------------------------

def _probs(dist) -> np.ndarray:
    if isinstance(dist, Mapping):
        return np.fromiter(dist.values(), dtype=float)
    return np.asarray(dist, dtype=float).ravel()


def entropy(dist) -> float:
    """Shannon entropy in nats of a probability vector or ``{outcome: prob}`` map."""
    p = _probs(dist)
    if np.any(p < 0):
        raise ValueError("negative probability")
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def kl(p_dist, q_dist) -> float:
    """KL(p || q) in nats; ``inf`` when p puts mass where q has none.

    Both arguments are either arrays of equal shape or mappings from
    outcomes to probabilities.
    """
    if isinstance(p_dist, Mapping):
        total = 0.0
        for k, p in p_dist.items():
            if p <= 0:
                continue
            q = q_dist.get(k, 0.0)
            if q <= 0:
                return math.inf
            total += p * (math.log(p) - math.log(q))
        return float(total)
    p = np.asarray(p_dist, dtype=float)
    q = np.asarray(q_dist, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions have different shapes")
    pos = p > 0
    if np.any(q[pos] <= 0):
        return math.inf
    return float(np.sum(p[pos] * (np.log(p[pos]) - np.log(q[pos]))))


# -- communication models -------------------------------------------------------

VARIANTS = ("full", "loss_at", "bernoulli_persistent", "bernoulli_intermittent",
            "schedule", "history_fn")


@dataclass(frozen=True)
class CommModel:
    """When communication is available.

    ``loss_at``, ``bernoulli_persistent`` and ``history_fn`` (unless
    ``recover=True``) lose communication for good at the first unavailable
    step. ``bernoulli_intermittent`` and ``schedule`` may recover. Steps past
    the end of a schedule use ``fill``.

    ``history_fn`` receives the true joint history
    ``((s_0, a_0), ..., (s_{t-1}, a_{t-1}))`` with states and actions as
    tuples of local indices (``END`` for agents that have stopped) and
    returns 0 or 1.
    """

    variant: str = "full"
    t_loss: float = math.inf
    p: float = 0.0
    q: float = 0.0
    schedule_bits: tuple = ()
    fill: int = 0
    fn: Callable | None = field(default=None, compare=False)
    recover: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown communication variant {self.variant!r}")
        if not 0.0 <= self.p <= 1.0 or not 0.0 <= self.q <= 1.0:
            raise ValueError("p and q must lie in [0, 1]")
        if any(b not in (0, 1) for b in self.schedule_bits) or self.fill not in (0, 1):
            raise ValueError("schedule entries must be 0 or 1")
        if self.variant == "loss_at" and self.t_loss < 0:
            raise ValueError("t_loss must be >= 0")
        if self.variant == "history_fn" and self.fn is None:
            raise ValueError("history_fn needs a function")

    @classmethod
    def full(cls):
        return cls("full")

    @classmethod
    def loss_at(cls, t_loss):
        return cls("loss_at", t_loss=t_loss)

    @classmethod
    def none(cls):
        return cls("loss_at", t_loss=0)

    @classmethod
    def bernoulli_persistent(cls, p):
        return cls("bernoulli_persistent", p=p)

    @classmethod
    def bernoulli_intermittent(cls, q):
        return cls("bernoulli_intermittent", q=q)

    @classmethod
    def schedule(cls, bits, fill=0):
        return cls("schedule", schedule_bits=tuple(int(b) for b in bits), fill=int(fill))

    @classmethod
    def history_fn(cls, fn, recover=False):
        return cls("history_fn", fn=fn, recover=recover)

    @property
    def persistent(self) -> bool:
        return self.variant in ("loss_at", "bernoulli_persistent") or (
            self.variant == "history_fn" and not self.recover)

    def branches(self, t: int, lost: bool, history=()) -> list[tuple[int, float]]:
        """Availability outcomes ``(lambda_t, prob)`` at step ``t``."""
        if lost and self.persistent:
            return [(0, 1.0)]
        v = self.variant
        if v == "full":
            return [(1, 1.0)]
        if v == "loss_at":
            return [(1 if t < self.t_loss else 0, 1.0)]
        if v == "schedule":
            bits = self.schedule_bits
            return [(bits[t] if t < len(bits) else self.fill, 1.0)]
        if v == "history_fn":
            return [(int(bool(self.fn(history))), 1.0)]
        rate = self.p if v == "bernoulli_persistent" else self.q
        out = []
        if rate < 1.0:
            out.append((1, 1.0 - rate))
        if rate > 0.0:
            out.append((0, rate))
        return out

    def describe(self) -> dict:
        d = {"variant": self.variant}
        if self.variant == "loss_at":
            d["t_loss"] = None if math.isinf(self.t_loss) else self.t_loss
        elif self.variant == "bernoulli_persistent":
            d["p"] = self.p
        elif self.variant == "bernoulli_intermittent":
            d["q"] = self.q
        elif self.variant == "schedule":
            d["schedule"] = list(self.schedule_bits)
            d["fill"] = self.fill
        elif self.variant == "history_fn":
            d["fn"] = getattr(self.fn, "__name__", repr(self.fn))
            d["recover"] = self.recover
        return d


def random_history_fn(seed: int, p_available: float = 0.5):
    """A fixed pseudo-random labelling of joint histories with {0, 1}."""
    def f(history):
        h = hashlib.blake2b(repr((seed, history)).encode(), digest_size=8).digest()
        return int(int.from_bytes(h, "little") / 2.0**64 < p_available)
    f.__name__ = f"random_history_fn[{seed}]"
    return f


# -- exact path enumeration ---------------------------------------------------

@dataclass
class PathDistribution:
    support: dict            # path -> probability
    success: dict            # path -> bool (true joint path reached S_T before S_A)
    horizon: int
    leftover: float          # mass not absorbed within the horizon
    lengths: dict = field(default_factory=dict)   # path -> steps until the last agent stopped

    @property
    def total(self) -> float:
        return float(sum(self.support.values()))

    @property
    def success_probability(self) -> float:
        return float(sum(p for k, p in self.support.items() if self.success[k]))

    @property
    def expected_length(self) -> float:
        """Expected number of steps until the last agent stops, plus one."""
        return float(sum(p * self.lengths[k] for k, p in self.support.items()))

    def marginal(self, i: int) -> dict:
        out = defaultdict(float)
        for k, p in self.support.items():
            out[k[i]] += p
        return dict(out)

    def entropy(self) -> float:
        return entropy(self.support)


def _policy_rows(game, policy):
    """Nonzero joint actions per non-terminal joint state."""
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (game.n_states_total, game.n_actions_total):
        raise ValueError("policy shape does not match the game")
    rows = {}
    for s in np.flatnonzero(~game.terminal_mask):
        row = pi[s, :game.n_actions]
        if abs(row.sum() - 1.0) > 1e-9 or np.any(row < -1e-12):
            raise ValueError(f"policy row {s} is not a distribution over joint actions")
        nz = np.flatnonzero(row > 0)
        rows[int(s)] = [(tuple(int(d) for d in game.action_digits[a]), float(row[a])) for a in nz]
    return rows


def enumerate_path_distribution(game: JointGame, policy: np.ndarray,
                                comm: CommModel | None = None, horizon: int = 50,
                                max_support: int = 2_000_000,
                                absorb_tol: float = ABSORB_TOL) -> PathDistribution:
    """Exact distribution of recorded paths under imaginary play / intermittent communication.

    Each step: if communication is available all agents see the true joint
    state, stop together if it is terminal, and otherwise follow one shared
    draw from the policy; beliefs are reset to the truth. If it is not, every
    running agent draws its teammates' states from their local kernels
    (starting from the last believed state and joint action, or from the
    initial state at step 0), stops if that believed joint state is terminal,
    and otherwise draws its own joint action at the believed joint state and
    executes its own component. Stopped agents stay put until communication
    returns at a non-terminal true state. The game outcome is judged on the
    true joint states.
    """
    game = prepare(game)
    comm = comm or CommModel.full()
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n = game.n_agents
    radix = game.state_radix
    rows = _policy_rows(game, policy)
    term = game.terminal_mask
    target = game.target_mask
    dead = np.zeros(game.n_states, dtype=bool)
    dead[list(game.dead_set)] = True
    supports = [m.supports for m in game.agents]
    need_hist = comm.variant == "history_fn"

    def enc(local):
        idx, mult = 0, 1
        for d, r in zip(local, radix):
            idx += d * mult
            mult *= r
        return idx

    def outcome_of(status, s):
        if status != 0:
            return status
        if target[s]:
            return 1
        if dead[s]:
            return -1
        return 0

    init = tuple(m.initial for m in game.agents)
    # node: (true, stopped, prev_bel, prev_act, lost, paths, status, hist)
    start = (init, (False,) * n, (None,) * n, (None,) * n, False,
             tuple(() for _ in range(n)), 0, ())
    frontier = {start: 1.0}
    support = defaultdict(float)
    success = {}
    lengths = {}

    for t in range(horizon):
        nxt = defaultdict(float)
        for node, prob in frontier.items():
            true, stopped, prev_bel, prev_act, lost, paths, status, hist = node
            s_true = enc(true)
            status = outcome_of(status, s_true)
            for lam, p_lam in comm.branches(t, lost, hist):
                new_lost = lost or lam == 0
                # each branch: (prob, stopped, acts, bel, bact)
                if lam == 1:
                    if term[s_true]:
                        branches = [(1.0, (True,) * n, (END,) * n, prev_bel, prev_act)]
                    else:
                        # the whole team acts on the true state; stopped agents rejoin
                        branches = [(pa, (False,) * n, a, (true,) * n, (a,) * n)
                                    for a, pa in rows[s_true]]
                else:
                    branches = [(1.0, (), (), (), ())]
                    for i in range(n):
                        if stopped[i]:
                            branches = [(p, st + (True,), ac + (END,), be + (None,), ba + (None,))
                                        for p, st, ac, be, ba in branches]
                            continue
                        options = _belief_options(i, t, true, init, prev_bel[i], prev_act[i], supports)
                        grown = []
                        for p, st, ac, be, ba in branches:
                            for believed, pb in options:
                                sb = enc(believed)
                                if term[sb]:
                                    grown.append((p * pb, st + (True,), ac + (END,),
                                                  be + (None,), ba + (None,)))
                                    continue
                                for a, pa in rows[sb]:
                                    grown.append((p * pb * pa, st + (False,), ac + (a[i],),
                                                  be + (believed,), ba + (a,)))
                        branches = grown
                for pb, st, acts, bel, bact in branches:
                    # newly stopped agents close their sequences
                    new_paths = list(paths)
                    for i in range(n):
                        if stopped[i] and st[i]:
                            continue
                        resume = (RESUME, t) if stopped[i] else ()
                        new_paths[i] = paths[i] + resume + (true[i], END if st[i] else acts[i])
                    new_paths = tuple(new_paths)
                    base = prob * p_lam * pb
                    if all(st):
                        key = new_paths
                        final = outcome_of(status, s_true)
                        support[key] += base
                        success[key] = final == 1
                        lengths[key] = t + 1
                        continue
                    new_hist = hist + ((true, acts),) if need_hist else ()
                    succ = [((), 1.0)]
                    for i in range(n):
                        if st[i]:
                            succ = [(y + (true[i],), q) for y, q in succ]
                            continue
                        idx, pr = supports[i][true[i]][acts[i]]
                        succ = [(y + (int(z),), q * float(pz)) for y, q in succ for z, pz in zip(idx, pr)]
                    for y, q in succ:
                        key = (y, st, bel, bact, new_lost, new_paths, status, new_hist)
                        nxt[key] += base * q
        frontier = nxt
        if len(frontier) > max_support:
            raise SupportOverflow(f"frontier of {len(frontier)} nodes at step {t}")
        if not frontier:
            break
    leftover = float(sum(frontier.values()))
    if leftover > absorb_tol:
        raise HorizonError(f"{leftover:.3g} probability mass not absorbed within horizon {horizon}")
    return PathDistribution(dict(support), success, horizon, leftover, lengths)


def _belief_options(i, t, true, init, prev_bel, prev_act, supports):
    """Distribution of agent ``i``'s believed joint state at step ``t``."""
    n = len(true)
    if t == 0 or prev_bel is None:
        base = list(init)
        base[i] = true[i]
        return [(tuple(base), 1.0)]
    opts = [((), 1.0)]
    for j in range(n):
        if j == i:
            opts = [(b + (true[i],), p) for b, p in opts]
            continue
        idx, pr = supports[j][prev_bel[j]][prev_act[j]]
        opts = [(b + (int(z),), p * float(pz)) for b, p in opts for z, pz in zip(idx, pr)]
    return opts


# -- total correlation --------------------------------------------------------

def total_correlation_of(dist: PathDistribution) -> float:
    n = len(next(iter(dist.support)))
    return sum(entropy(dist.marginal(i)) for i in range(n)) - dist.entropy()


def exact_total_correlation(game: JointGame, policy: np.ndarray, horizon: int = 50,
                            check: bool = True, **kw) -> float:
    """Total correlation of the full-communication path process (nats).

    With ``check`` the value is compared with ``KL(full || img_0)`` computed
    from an independent enumeration of the no-communication process.
    """
    full = enumerate_path_distribution(game, policy, CommModel.full(), horizon, **kw)
    c = total_correlation_of(full)
    if check:
        img0 = enumerate_path_distribution(game, policy, CommModel.none(), horizon, **kw)
        c2 = kl(full.support, img0.support)
        if not abs(c - c2) <= 1e-9 * max(1.0, abs(c)):
            raise AssertionError(f"total correlation {c} disagrees with KL(full||img_0) {c2}")
    return max(c, 0.0) if c > -1e-12 else c


# -- lemma checks -------------------------------------------------------------

@dataclass
class LemmaCase:
    case: str
    lemma: str
    lhs: float
    rhs: float
    slack: float
    satisfied: bool


@dataclass
class LemmaReport:
    cases: list = field(default_factory=list)

    @property
    def all_satisfied(self) -> bool:
        return all(c.satisfied for c in self.cases)

    def violations(self) -> list:
        return [c for c in self.cases if not c.satisfied]

    def to_json(self) -> str:
        return json.dumps([_jsonable(asdict(c)) for c in self.cases], indent=2)


def _jsonable(d):
    return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}


def _add(report, case, lemma, lhs, rhs, tol):
    slack = lhs - rhs
    report.cases.append(LemmaCase(case, lemma, float(lhs), float(rhs), float(slack),
                                  bool(slack >= -tol)))


def check_lemma_inequalities(game: JointGame, policy: np.ndarray, horizon: int = 20,
                             t_loss_values=None, schedule_length: int = 4,
                             q_values=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
                             history_seeds=range(8), tol: float = 1e-9,
                             name: str | None = None) -> LemmaReport:
    """Evaluate every KL inequality relating partial communication to none.

    Parameters
    ----------
    t_loss_values :
        Loss times for the persistent-loss lemma; defaults to
        ``0..horizon`` plus never.
    schedule_length :
        All ``2**schedule_length`` availability schedules are tried
        (communication is unavailable after the schedule ends).
    q_values :
        Dropout rates for the Bernoulli form, checked as
        ``KL(full||img_0) >= KL(full||int_q) / q``.
    history_seeds :
        Seeds of random history labellings for the history-dependent lemma.
    """
    game = prepare(game)
    name = name or game.name
    full = enumerate_path_distribution(game, policy, CommModel.full(), horizon)
    img0 = enumerate_path_distribution(game, policy, CommModel.none(), horizon)
    base = kl(full.support, img0.support)
    report = LemmaReport()

    def d(comm):
        return kl(full.support, enumerate_path_distribution(game, policy, comm, horizon).support)

    if t_loss_values is None:
        t_loss_values = list(range(horizon + 1)) + [math.inf]
    for tl in t_loss_values:
        _add(report, f"{name}/t_loss={tl}", "persistent-loss", base, d(CommModel.loss_at(tl)), tol)
    for bits in np.ndindex(*(2,) * schedule_length):
        _add(report, f"{name}/schedule={''.join(map(str, bits))}", "schedule", base,
             d(CommModel.schedule(bits)), tol)
    for q in q_values:
        _add(report, f"{name}/q={q}", "bernoulli", base,
             d(CommModel.bernoulli_intermittent(q)) / q, tol)
    for seed in history_seeds:
        f = random_history_fn(seed)
        _add(report, f"{name}/f={seed}", "history", base, d(CommModel.history_fn(f)), tol)
    return report


# -- performance bounds ---------------------------------------------------------

ROUND_TOL = 1e-9  # solver round-off accepted on v, C and probabilities


def _check_bound_args(v, c, length=0.0, rate=0.0):
    """Validate bound inputs and clip round-off; returns ``(v, c, length, rate)``."""
    if not -ROUND_TOL <= v <= 1.0 + ROUND_TOL:
        raise ValueError(f"v_full must lie in [0, 1], got {v}")
    if c < -ROUND_TOL:
        raise ValueError(f"total correlation must be >= 0, got {c}")
    if length < 0:
        raise ValueError(f"expected length must be >= 0, got {length}")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {rate}")
    return min(max(v, 0.0), 1.0), max(c, 0.0), length, rate


def bound_theorem1(v_full: float, C: float) -> float:
    """History-dependent loss: ``v - sqrt(1 - exp(-C))``."""
    v_full, C, _, _ = _check_bound_args(v_full, C)
    return max(v_full - math.sqrt(-math.expm1(-C)), -1.0)


def _length_branch(v, length, rate):
    if v == 0.0:
        return 0.0
    return v * (1.0 - rate) ** (length / v)


def bound_theorem2(v_full: float, C: float, l_full: float, p: float) -> float:
    """Persistent loss with per-step failure probability ``p``."""
    v_full, C, l_full, p = _check_bound_args(v_full, C, l_full, p)
    if v_full == 0.0:
        return 0.0
    return max(bound_theorem1(v_full, C), _length_branch(v_full, l_full, p), -1.0)


def bound_theorem3(v_full: float, C: float, l_full: float, q: float) -> float:
    """Independent per-step dropout with probability ``q``."""
    v_full, C, l_full, q = _check_bound_args(v_full, C, l_full, q)
    if v_full == 0.0:
        return 0.0
    first = v_full - math.sqrt(-math.expm1(-q * C))
    return max(first, _length_branch(v_full, l_full, q), -1.0)


@dataclass
class BoundReport:
    theorem: str
    v_full: float
    C: float
    l_full: float
    rate: float | None
    bound: float
    empirical: float | None = None
    stderr: float | None = None
    satisfied: bool | None = None
    comm: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def bound_report(theorem: str, v_full: float, C: float, l_full: float = 0.0,
                 rate: float | None = None, empirical: float | None = None,
                 stderr: float | None = None, n_sigma: float = 4.0,
                 comm: CommModel | None = None) -> BoundReport:
    """Evaluate a bound and compare it with an estimate (exact if ``stderr`` is 0/None)."""
    if theorem == "thm1":
        b = bound_theorem1(v_full, C)
    elif theorem == "thm2":
        b = bound_theorem2(v_full, C, l_full, rate)
    elif theorem == "thm3":
        b = bound_theorem3(v_full, C, l_full, rate)
    else:
        raise ValueError(f"unknown theorem {theorem!r}")
    ok = None
    if empirical is not None:
        ok = bool(empirical >= b - n_sigma * (stderr or 0.0) - ROUND_TOL)
    return BoundReport(theorem, v_full, C, l_full, rate, b, empirical, stderr, ok,
                       comm.describe() if comm is not None else None)


def bounds_summary(v_full: float, C: float, l_full: float, p: float, q: float) -> dict:
    return {"thm1": bound_theorem1(v_full, C),
            "thm2": bound_theorem2(v_full, C, l_full, p),
            "thm3": bound_theorem3(v_full, C, l_full, q)}


def write_reports_json(path, reports) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() if hasattr(r, "to_dict") else r for r in reports], fh,
                  indent=2, sort_keys=True)
