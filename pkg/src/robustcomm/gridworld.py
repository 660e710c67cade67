"""Grid navigation environments built as factored Markov games."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .markov_game import AgentMdp, GameError, JointGame

ACTIONS = ("left", "right", "up", "down", "stay")
MOVES = {"left": (-1, 0), "right": (1, 0), "up": (0, 1), "down": (0, -1), "stay": (0, 0)}
COMPASS = ((-1, 0), (1, 0), (0, 1), (0, -1))

SLIP_MODELS = ("uniform-other-destinations", "uniform-other-neighbors")


@dataclass(frozen=True)
class GridSpec:
    """Layout of a shared grid. Cells are ``(x, y)`` with ``y = 0`` at the bottom.

    ``keep_walls_as_states`` keeps wall cells in every agent's state space as
    unreachable absorbing padding, so each agent has ``width * height`` local
    states.
    """

    width: int
    height: int
    starts: tuple
    targets: tuple
    walls: frozenset = frozenset()
    hazards: frozenset = frozenset()
    slip: float = 0.05
    collision_radius: int = 1
    keep_walls_as_states: bool = True
    slip_model: str = "uniform-other-destinations"
    name: str = "grid"

    def __post_init__(self):
        object.__setattr__(self, "starts", tuple(tuple(c) for c in self.starts))
        object.__setattr__(self, "targets", tuple(tuple(c) for c in self.targets))
        object.__setattr__(self, "walls", frozenset(tuple(c) for c in self.walls))
        object.__setattr__(self, "hazards", frozenset(tuple(c) for c in self.hazards))
        if self.width < 1 or self.height < 1:
            raise GameError("grid must be at least 1x1")
        if not 0.0 <= self.slip <= 1.0:
            raise GameError(f"slip must lie in [0, 1], got {self.slip}")
        if self.slip_model not in SLIP_MODELS:
            raise GameError(f"unknown slip model {self.slip_model!r}")
        if self.collision_radius < 0:
            raise GameError("collision_radius must be >= 0")
        if len(self.starts) != len(self.targets):
            raise GameError("one start and one target per agent")
        for c in self.starts + self.targets:
            if not self.in_bounds(c):
                raise GameError(f"cell {c} outside the grid")
            if c in self.walls:
                raise GameError(f"start/target {c} is a wall")
            if c in self.hazards:
                raise GameError(f"start/target {c} is a hazard")

    @property
    def n_agents(self) -> int:
        return len(self.starts)

    def in_bounds(self, c) -> bool:
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    def passable(self, c) -> bool:
        return self.in_bounds(c) and c not in self.walls

    @property
    def cells(self) -> list[tuple[int, int]]:
        """Local state order: row-major from the bottom row."""
        out = [(x, y) for y in range(self.height) for x in range(self.width)]
        if not self.keep_walls_as_states:
            out = [c for c in out if c not in self.walls]
        return out

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "starts": [list(c) for c in self.starts],
            "targets": [list(c) for c in self.targets],
            "walls": sorted(list(c) for c in self.walls),
            "hazards": sorted(list(c) for c in self.hazards),
            "slip": self.slip, "collision_radius": self.collision_radius,
            "keep_walls_as_states": self.keep_walls_as_states,
            "slip_model": self.slip_model, "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        for key in ("walls", "hazards"):
            d[key] = frozenset(tuple(c) for c in d.get(key, ()))
        return cls(**d)


def build_agent_mdp(spec: GridSpec, agent_index: int) -> AgentMdp:
    """Five-action grid MDP for one agent.

    The intended move succeeds with probability ``1 - slip``; moves off the
    grid or into a wall leave the agent in place. The slip mass is spread
    uniformly over the *other* places the agent could have ended up:

    ``uniform-other-destinations``
        the distinct passable outcomes of the five actions (so the current
        cell counts, unless it is the intended destination);
    ``uniform-other-neighbors``
        the passable compass neighbours only.

    If there is no other candidate the slip mass stays on the intended
    destination.
    """
    cells = spec.cells
    index = {c: k for k, c in enumerate(cells)}
    n = len(cells)
    kernel = np.zeros((n, len(ACTIONS), n))
    for k, c in enumerate(cells):
        if c in spec.walls:
            kernel[k, :, k] = 1.0
            continue
        if spec.slip_model == "uniform-other-neighbors":
            candidates = [(c[0] + dx, c[1] + dy) for dx, dy in COMPASS]
        else:
            candidates = [(c[0] + dx, c[1] + dy) for dx, dy in (MOVES[a] for a in ACTIONS)]
        candidates = [nb for nb in candidates if spec.passable(nb)]
        for a, name in enumerate(ACTIONS):
            dx, dy = MOVES[name]
            dest = (c[0] + dx, c[1] + dy)
            if not spec.passable(dest):
                dest = c
            others = [nb for nb in candidates if nb != dest]
            kernel[k, a, index[dest]] += 1.0 - spec.slip
            if others:
                for nb in others:
                    kernel[k, a, index[nb]] += spec.slip / len(others)
            else:
                kernel[k, a, index[dest]] += spec.slip
    return AgentMdp(kernel, index[spec.starts[agent_index]],
                    state_labels=tuple(cells), action_labels=ACTIONS)


def build_game(spec: GridSpec) -> JointGame:
    """Joint game for ``spec``; collisions and hazards form the avoid set."""
    agents = tuple(build_agent_mdp(spec, i) for i in range(spec.n_agents))
    cells = spec.cells
    game = JointGame(agents, frozenset(), frozenset(), name=spec.name)
    digits = game.state_digits
    pos = np.array(cells)[digits]  # (S, N, 2)
    hazard = np.array([c in spec.hazards for c in cells])
    avoid = hazard[digits].any(axis=1)
    r = spec.collision_radius
    if r > 0:
        for i in range(spec.n_agents):
            for j in range(i + 1, spec.n_agents):
                cheb = np.abs(pos[:, i] - pos[:, j]).max(axis=1)
                avoid |= cheb < r
    target = game.encode_state([cells.index(t) for t in spec.targets])
    avoid_set = frozenset(np.flatnonzero(avoid).tolist())
    if target in avoid_set:
        raise GameError("joint target lies in the avoid set")
    return JointGame(agents, frozenset({target}), avoid_set, name=spec.name,
                     meta={"grid": spec.to_dict()})


def two_agent_spec(slip: float = 0.05, collision_radius: int = 1,
                   keep_walls_as_states: bool = True,
                   slip_model: str = "uniform-other-destinations") -> GridSpec:
    return GridSpec(
        width=5, height=5,
        starts=((4, 0), (0, 0)),
        targets=((1, 0), (3, 0)),
        walls=frozenset({(2, 0), (2, 2), (2, 4)}),
        hazards=frozenset({(0, 4), (1, 4), (3, 4)}),
        slip=slip, collision_radius=collision_radius,
        keep_walls_as_states=keep_walls_as_states, slip_model=slip_model,
        name="two_agent",
    )


def three_agent_spec(slip: float = 0.05, collision_radius: int = 1,
                     slip_model: str = "uniform-other-destinations") -> GridSpec:
    return GridSpec(
        width=3, height=3,
        starts=((2, 0), (0, 2), (2, 2)),
        targets=((0, 2), (2, 0), (0, 0)),
        slip=slip, collision_radius=collision_radius, slip_model=slip_model,
        name="three_agent",
    )


def build_two_agent_navigation(slip: float = 0.05, **kw) -> JointGame:
    return build_game(two_agent_spec(slip, **kw))


def build_three_agent_navigation(slip: float = 0.05, **kw) -> JointGame:
    return build_game(three_agent_spec(slip, **kw))


def mirror_spec(spec: GridSpec) -> GridSpec:
    """Reflect the layout across the vertical centre line."""
    def f(c):
        return (spec.width - 1 - c[0], c[1])
    return GridSpec(
        width=spec.width, height=spec.height,
        starts=tuple(f(c) for c in spec.starts),
        targets=tuple(f(c) for c in spec.targets),
        walls=frozenset(f(c) for c in spec.walls),
        hazards=frozenset(f(c) for c in spec.hazards),
        slip=spec.slip, collision_radius=spec.collision_radius,
        keep_walls_as_states=spec.keep_walls_as_states, slip_model=spec.slip_model,
        name=spec.name + "_mirror",
    )
