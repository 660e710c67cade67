"""Tiny games with hand-checkable answers, used as oracles and in tests."""
from __future__ import annotations

import itertools

import numpy as np

from .markov_game import AgentMdp, JointGame, product_of, prepare


def two_line(n_agents: int = 2) -> JointGame:
    """Each agent has states {A, B} and one action ``go`` moving A -> B surely."""
    k = np.zeros((2, 1, 2))
    k[0, 0, 1] = 1.0
    k[1, 0, 1] = 1.0
    m = AgentMdp(k, 0, state_labels=("A", "B"), action_labels=("go",))
    return product_of([m] * n_agents, targets=[(1,) * n_agents], name="two_line")


def slip_line(success: float = 0.9, n_agents: int = 2) -> JointGame:
    """Like ``two_line`` but ``go`` succeeds with probability ``success``; ``wait`` stays."""
    k = np.zeros((2, 2, 2))
    k[0, 0] = (1.0 - success, success)
    k[0, 1, 0] = 1.0
    k[1, :, 1] = 1.0
    m = AgentMdp(k, 0, state_labels=("A", "B"), action_labels=("go", "wait"))
    return product_of([m] * n_agents, targets=[(1,) * n_agents], name="slip_line")


def coordinated_coin(rounds: int = 1) -> JointGame:
    """Two agents must pick matching letters ``rounds`` times in a row.

    Local states are the strings over {a, b} of length <= ``rounds``; action
    ``a`` or ``b`` appends that letter. Joint states whose strings differ are
    avoided; equal full-length strings form the target.
    """
    strings = [""] + ["".join(p) for r in range(1, rounds + 1)
                      for p in itertools.product("ab", repeat=r)]
    index = {w: k for k, w in enumerate(strings)}
    n = len(strings)
    k = np.zeros((n, 2, n))
    for w, s in index.items():
        for a, letter in enumerate("ab"):
            k[s, a, index[w + letter] if len(w) < rounds else s] = 1.0
    m = AgentMdp(k, 0, state_labels=tuple(strings), action_labels=("a", "b"))
    full = [w for w in strings if len(w) == rounds]
    targets = [(index[w], index[w]) for w in full]
    avoid = [(index[u], index[w]) for u in strings for w in strings
             if len(u) == len(w) and u != w]
    return product_of([m, m], targets=targets, avoid=avoid, name=f"coin{rounds}")


def free_coins(rounds: int = 1, n_agents: int = 2) -> JointGame:
    """Letter strings as in ``coordinated_coin`` but every full-length tuple is a target.

    All agents stop together after ``rounds`` steps whatever they play, so
    stop times carry no information and product policies have independent paths.
    """
    base = coordinated_coin(rounds)
    m = base.agents[0]
    full = [k for k, w in enumerate(m.state_labels) if len(w) == rounds]
    targets = list(itertools.product(full, repeat=n_agents))
    return product_of([m] * n_agents, targets=targets, name=f"free_coins{rounds}")


def coin_policy(game: JointGame) -> np.ndarray:
    """Matched letters with probability 1/2 each wherever the team is not done."""
    game = prepare(game)
    pi = np.zeros((game.n_states_total, game.n_actions_total))
    aa = game.encode_action((0,) * game.n_agents)
    bb = game.encode_action((1,) * game.n_agents)
    for s in range(game.n_states):
        if game.terminal_mask[s]:
            pi[s, game.eps_action] = 1.0
        else:
            pi[s, aa] = pi[s, bb] = 0.5
    pi[game.end_state, game.eps_action] = 1.0
    return pi


def product_policy(game: JointGame, local_policies) -> np.ndarray:
    """Joint policy ``pi(a|s) = prod_i pi_i(a_i|s_i)`` on non-terminal states."""
    game = prepare(game)
    pi = np.zeros((game.n_states_total, game.n_actions_total))
    sd, ad = game.state_digits, game.action_digits
    probs = np.ones((game.n_states, game.n_actions))
    for i, p in enumerate(local_policies):
        p = np.asarray(p, dtype=float)
        probs *= p[sd[:, i][:, None], ad[:, i][None, :]]
    nt = ~game.terminal_mask
    pi[:game.n_states][nt, :game.n_actions] = probs[nt]
    pi[:game.n_states][game.terminal_mask, game.eps_action] = 1.0
    pi[game.end_state, game.eps_action] = 1.0
    return pi


def random_game(rng: np.random.Generator, n_agents: int = 2, max_states: int = 3,
                max_actions: int = 2, sparsity: float = 0.5, acyclic: bool = False,
                min_actions: int = 1) -> JointGame:
    """Random factored game with a random target and avoid set.

    With ``acyclic`` every local move goes to a higher-numbered state (the
    last state absorbs), so every run ends within ``max_states`` steps; the
    joint state where every agent has absorbed is added to the avoid set
    unless it is already a target, and the initial state is never terminal
    by construction (it may still be dead).
    """
    agents = []
    for _ in range(n_agents):
        n = int(rng.integers(2 if acyclic else 1, max_states + 1))
        a = int(rng.integers(min_actions, max_actions + 1))
        k = rng.random((n, a, n)) * (rng.random((n, a, n)) < sparsity)
        if acyclic:
            k = np.triu(k.transpose(1, 0, 2), 1).transpose(1, 0, 2)
            k[n - 1, :, :] = 0.0
            k[n - 1, :, n - 1] = 1.0
        for s in range(n):
            for b in range(a):
                if k[s, b].sum() == 0:
                    k[s, b, rng.integers(s + 1, n) if acyclic and s < n - 1 else rng.integers(n)] = 1.0
        k /= k.sum(axis=2, keepdims=True)
        init = 0 if acyclic else int(rng.integers(n))
        agents.append(AgentMdp(k, init))
    g = JointGame(tuple(agents), frozenset(), frozenset())
    states = rng.permutation(g.n_states)
    if acyclic:
        states = states[states != g.joint_initial]
    n_t = int(rng.integers(1, max(2, g.n_states // 2) + 1))
    targets = states[:n_t]
    rest = states[n_t:]
    avoid = rest[rng.random(rest.size) < 0.3] if rest.size else rest
    if acyclic:
        avoid = avoid[avoid != g.joint_initial]
        # the all-absorbed joint state must be terminal or runs would never end
        last = g.n_states - 1
        if last not in targets:
            avoid = np.union1d(avoid, [last])
    return JointGame(tuple(agents), frozenset(targets.tolist()), frozenset(avoid.tolist()),
                     name="random")


def random_policy(game: JointGame, rng: np.random.Generator, deterministic_frac: float = 0.0) -> np.ndarray:
    """Random stationary joint policy with full support unless made deterministic."""
    game = prepare(game)
    pi = np.zeros((game.n_states_total, game.n_actions_total))
    for s in range(game.n_states):
        if game.terminal_mask[s]:
            pi[s, game.eps_action] = 1.0
        elif rng.random() < deterministic_frac:
            pi[s, rng.integers(game.n_actions)] = 1.0
        else:
            w = rng.random(game.n_actions) + 0.05
            pi[s, :game.n_actions] = w / w.sum()
    pi[game.end_state, game.eps_action] = 1.0
    return pi
