"""Factored cooperative Markov games with reach-avoid objectives.

Joint states and joint actions are mixed-radix integers. Agent 0 is the
least significant digit, so for two agents ``s = s0 + n0 * s1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

ROW_TOL = 1e-12


class GameError(ValueError):
    """Raised for malformed games or invalid indices."""


def encode(digits: Sequence[int], radix: Sequence[int]) -> int:
    idx = 0
    mult = 1
    for d, r in zip(digits, radix):
        if not 0 <= d < r:
            raise GameError(f"digit {d} out of range for radix {r}")
        idx += int(d) * mult
        mult *= int(r)
    return idx


def decode(index: int, radix: Sequence[int]) -> tuple[int, ...]:
    total = int(np.prod(radix))
    if not 0 <= index < total:
        raise GameError(f"index {index} out of range [0, {total})")
    out = []
    for r in radix:
        out.append(index % r)
        index //= r
    return tuple(out)


def decode_array(indices: np.ndarray, radix: Sequence[int]) -> np.ndarray:
    """Vectorised ``decode``; returns an array of shape (len(indices), N)."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((indices.size, len(radix)), dtype=np.int64)
    rest = indices.copy()
    for i, r in enumerate(radix):
        out[:, i] = rest % r
        rest //= r
    return out


@dataclass(frozen=True, eq=False)
class AgentMdp:
    """Single-agent finite MDP.

    Parameters
    ----------
    kernel :
        Array of shape (n_states, n_actions, n_states); ``kernel[s, a, y]``
        is the probability of moving from ``s`` to ``y`` under ``a``.
    initial :
        Index of the initial state.
    state_labels, action_labels :
        Optional human-readable names (grid cells, move names).
    """

    kernel: np.ndarray
    initial: int
    state_labels: tuple | None = None
    action_labels: tuple | None = None

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=float)
        if k.ndim != 3 or k.shape[0] != k.shape[2]:
            raise GameError(f"kernel must have shape (S, A, S), got {k.shape}")
        if np.any(k < 0):
            raise GameError("negative transition probability")
        rows = k.sum(axis=2)
        if np.any(np.abs(rows - 1.0) > ROW_TOL):
            bad = np.argwhere(np.abs(rows - 1.0) > ROW_TOL)[0]
            raise GameError(f"row (s={bad[0]}, a={bad[1]}) sums to {rows[tuple(bad)]}")
        if not 0 <= self.initial < k.shape[0]:
            raise GameError(f"initial state {self.initial} not in state set")
        k.setflags(write=False)
        object.__setattr__(self, "kernel", k)

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[1]

    @cached_property
    def supports(self) -> list[list[tuple[np.ndarray, np.ndarray]]]:
        """Sparse rows: ``supports[s][a] = (successor indices, probabilities)``."""
        out = []
        for s in range(self.n_states):
            row = []
            for a in range(self.n_actions):
                nz = np.flatnonzero(self.kernel[s, a])
                row.append((nz, self.kernel[s, a, nz]))
            out.append(row)
        return out

    @cached_property
    def transition_entropy(self) -> np.ndarray:
        """h(s, a) = -sum_y T(s,a,y) log T(s,a,y), shape (S, A)."""
        k = self.kernel
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(k > 0, -k * np.log(k), 0.0)
        return terms.sum(axis=2)


@dataclass(frozen=True, eq=False)
class JointGame:
    """Product game of transition-independent agents.

    ``dead_set`` is ``None`` until :func:`compute_dead_set` has been applied
    (see :func:`with_dead_set`). After :func:`augment_with_end_state` the game
    gains one extra joint state ``end_state == n_states`` and one extra joint
    action ``eps_action == n_actions``; neither is part of the mixed-radix
    range.
    """

    agents: tuple[AgentMdp, ...]
    target_set: frozenset
    avoid_set: frozenset
    dead_set: frozenset | None = None
    augmented: bool = False
    name: str = "game"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_cache", {})
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "target_set", frozenset(int(s) for s in self.target_set))
        object.__setattr__(self, "avoid_set", frozenset(int(s) for s in self.avoid_set))
        if self.dead_set is not None:
            object.__setattr__(self, "dead_set", frozenset(int(s) for s in self.dead_set))
        if not self.agents:
            raise GameError("a game needs at least one agent")
        n = self.n_states
        for s in self.target_set | self.avoid_set:
            if not 0 <= s < n:
                raise GameError(f"joint state {s} out of range")
        if self.target_set & self.avoid_set:
            raise GameError("target and avoid sets intersect")
        if self.dead_set is not None and not self.avoid_set <= self.dead_set:
            raise GameError("dead set must contain the avoid set")
        if self.augmented and self.dead_set is None:
            raise GameError("augmented game without a dead set")

    # -- sizes and encodings -------------------------------------------------
    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @cached_property
    def state_radix(self) -> tuple[int, ...]:
        return tuple(m.n_states for m in self.agents)

    @cached_property
    def action_radix(self) -> tuple[int, ...]:
        return tuple(m.n_actions for m in self.agents)

    @cached_property
    def n_states(self) -> int:
        """Number of joint states, excluding the end state."""
        return int(np.prod(self.state_radix))

    @cached_property
    def n_actions(self) -> int:
        """Number of joint actions, excluding the end action."""
        return int(np.prod(self.action_radix))

    @property
    def end_state(self) -> int:
        self._require_augmented()
        return self.n_states

    @property
    def eps_action(self) -> int:
        self._require_augmented()
        return self.n_actions

    @property
    def n_states_total(self) -> int:
        return self.n_states + (1 if self.augmented else 0)

    @property
    def n_actions_total(self) -> int:
        return self.n_actions + (1 if self.augmented else 0)

    @cached_property
    def joint_initial(self) -> int:
        return encode([m.initial for m in self.agents], self.state_radix)

    def encode_state(self, local: Sequence[int]) -> int:
        return encode(local, self.state_radix)

    def decode_state(self, s: int) -> tuple[int, ...]:
        return decode(s, self.state_radix)

    def encode_action(self, local: Sequence[int]) -> int:
        return encode(local, self.action_radix)

    def decode_action(self, a: int) -> tuple[int, ...]:
        return decode(a, self.action_radix)

    @cached_property
    def state_digits(self) -> np.ndarray:
        """(n_states, N) table of local state indices."""
        return decode_array(np.arange(self.n_states), self.state_radix)

    @cached_property
    def action_digits(self) -> np.ndarray:
        """(n_actions, N) table of local action indices."""
        return decode_array(np.arange(self.n_actions), self.action_radix)

    # -- terminal bookkeeping ------------------------------------------------
    @cached_property
    def terminal_mask(self) -> np.ndarray:
        """Boolean mask over joint states (excluding end state) of S_T ∪ S_D."""
        self._require_dead_set()
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.target_set | self.dead_set)] = True
        return mask

    @cached_property
    def target_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.target_set)] = True
        return mask

    @cached_property
    def avoid_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.avoid_set)] = True
        return mask

    def is_terminal(self, s: int) -> bool:
        if self.augmented and s == self.end_state:
            return True
        return bool(self.terminal_mask[s])

    # -- dynamics ------------------------------------------------------------
    @cached_property
    def transition_matrix(self) -> sp.csr_matrix:
        """Un-augmented joint kernel as CSR of shape (S*A, S); row = s*A + a."""
        return _product_kernel(self.agents)

    @cached_property
    def transition_entropy(self) -> np.ndarray:
        """Joint h(s, a) of shape (S, A); additive over agents."""
        h = np.zeros((self.n_states, self.n_actions))
        sd, ad = self.state_digits, self.action_digits
        for i, m in enumerate(self.agents):
            h += m.transition_entropy[sd[:, i][:, None], ad[:, i][None, :]]
        return h

    def _check_state(self, s: int, allow_end: bool = True) -> None:
        hi = self.n_states_total if allow_end else self.n_states
        if not 0 <= s < hi:
            raise GameError(f"joint state {s} out of range")

    def _check_action(self, a: int) -> None:
        if not 0 <= a < self.n_actions_total:
            raise GameError(f"joint action {a} out of range")

    def _require_augmented(self) -> None:
        if not self.augmented:
            raise GameError("game has not been augmented with an end state")

    def _require_dead_set(self) -> None:
        if self.dead_set is None:
            raise GameError("dead set has not been computed")

    def available_actions(self, s: int) -> range:
        self._check_state(s)
        if self.augmented and self.is_terminal(s):
            return range(self.eps_action, self.eps_action + 1)
        return range(self.n_actions)


def _product_kernel(agents: Sequence[AgentMdp]) -> sp.csr_matrix:
    mats = []
    for m in agents:
        mats.append(sp.csr_matrix(m.kernel.reshape(m.n_states * m.n_actions, m.n_states)))
    # kron(M_{N-1}, ..., M_0): rows are mixed-radix over (s_i, a_i) pairs with
    # agent 0 least significant, columns are joint next states.
    big = mats[0]
    for m in mats[1:]:
        big = sp.kron(m, big, format="csr")
    state_radix = [m.n_states for m in agents]
    action_radix = [m.n_actions for m in agents]
    n_s, n_a = int(np.prod(state_radix)), int(np.prod(action_radix))
    # row of kron for joint (s, a) is sum_i (s_i * A_i + a_i) * prod_{j<i} S_j A_j
    sd = decode_array(np.arange(n_s), state_radix)
    ad = decode_array(np.arange(n_a), action_radix)
    kron_row = np.zeros((n_s, n_a), dtype=np.int64)
    mult = 1
    for i in range(len(agents)):
        kron_row += (sd[:, i][:, None] * action_radix[i] + ad[:, i][None, :]) * mult
        mult *= state_radix[i] * action_radix[i]
    out = big[kron_row.ravel()]
    out.sort_indices()
    return out.tocsr()


def joint_transition_prob(game: JointGame, s: int, a: int, y: int) -> float:
    """Probability of joint successor ``y`` from ``s`` under joint action ``a``."""
    game._check_state(s)
    game._check_action(a)
    game._check_state(y)
    if game.augmented:
        end, eps = game.end_state, game.eps_action
        if game.is_terminal(s):
            if a != eps:
                raise GameError(f"terminal state {s} only admits the end action")
            return 1.0 if y == end else 0.0
        if a == eps:
            raise GameError(f"end action not available at non-terminal state {s}")
        if y == end:
            return 0.0
    sl, al, yl = game.decode_state(s), game.decode_action(a), game.decode_state(y)
    p = 1.0
    for m, si, ai, yi in zip(game.agents, sl, al, yl):
        p *= m.kernel[si, ai, yi]
    return float(p)


def enumerate_successors(game: JointGame, s: int, a: int) -> list[tuple[int, float]]:
    """Positive-probability successors of ``(s, a)`` as ``(state, prob)`` pairs."""
    game._check_state(s)
    game._check_action(a)
    if game.augmented:
        if game.is_terminal(s):
            if a != game.eps_action:
                raise GameError(f"terminal state {s} only admits the end action")
            return [(game.end_state, 1.0)]
        if a == game.eps_action:
            raise GameError(f"end action not available at non-terminal state {s}")
    sl, al = game.decode_state(s), game.decode_action(a)
    succ = [(0, 1.0, 1)]  # (index, prob, multiplier)
    for m, si, ai in zip(game.agents, sl, al):
        idx, prob = m.supports[si][ai]
        succ = [(j + int(y) * mult, p * float(q), mult * m.n_states)
                for j, p, mult in succ for y, q in zip(idx, prob)]
    return [(j, p) for j, p, _ in succ]


def compute_dead_set(game: JointGame) -> frozenset:
    """Joint states from which the target set is unreachable.

    Avoid states are absorbing failures: a state is live iff some finite
    positive-probability path reaches ``target_set`` without touching
    ``avoid_set``. Everything not live is dead.
    """
    if game.augmented:
        raise GameError("dead set is defined on the un-augmented game")
    n_s, n_a = game.n_states, game.n_actions
    P = game.transition_matrix
    live = game.target_mask.copy()
    blocked = game.avoid_mask
    while True:
        hits = (P @ live.astype(float)).reshape(n_s, n_a) > 0
        new = hits.any(axis=1) & ~blocked & ~live
        if not new.any():
            break
        live |= new
    return frozenset(np.flatnonzero(~live).tolist())


def with_dead_set(game: JointGame) -> JointGame:
    return replace(game, dead_set=compute_dead_set(game))


def augment_with_end_state(game: JointGame) -> JointGame:
    """Add the absorbing end state and the end action.

    States in S_T ∪ S_D keep only the end action, which leads to the end state
    with probability one. The dead set is computed on the fly if missing.
    """
    if game.augmented:
        raise GameError("game is already augmented")
    if game.dead_set is None:
        game = with_dead_set(game)
    return replace(game, augmented=True)


def prepare(game: JointGame) -> JointGame:
    """Dead set + augmentation, idempotent."""
    if game.augmented:
        return game
    return augment_with_end_state(game)


def joint_states_where(game: JointGame, predicate) -> set[int]:
    """All joint states whose local-index tuple satisfies ``predicate``."""
    return {s for s, digits in enumerate(game.state_digits) if predicate(tuple(int(d) for d in digits))}


def product_of(agents: Iterable[AgentMdp], targets, avoid=(), name="game", **meta) -> JointGame:
    """Convenience constructor taking local-index tuples for the target/avoid sets."""
    agents = tuple(agents)
    radix = [m.n_states for m in agents]
    t = {encode(x, radix) if not isinstance(x, (int, np.integer)) else int(x) for x in targets}
    av = {encode(x, radix) if not isinstance(x, (int, np.integer)) else int(x) for x in avoid}
    return JointGame(agents, frozenset(t), frozenset(av), name=name, meta=dict(meta))
