"""Hallway-family Dec-POMDP environments.

Each of ``n`` agents walks its own Markov chain of positions
``0 .. length-1`` with an absorbing goal cell at index ``length``.  Every
step an agent moves left, right, or stays; moving right from the last chain
position enters the goal.  All agents share one reward.

Agents are partitioned into groups.  A group "arrives" when all of its
members step into the goal on the same timestep; an agent entering the goal
without its full group ends the episode with reward 0.  The team succeeds
(shared reward 1, terminal) when every group has arrived and no two groups
arrived on the same step.  With a single group covering all agents this is
the classic Hallway game: the episode ends as soon as anyone reaches the
goal, with reward 1 only for a simultaneous full-team arrival.

Observations are one-hot own position (sized to the longest chain plus the
goal slot) concatenated with a one-hot agent id; under full communication
they double as the broadcast messages.  The mixer state concatenates every
agent's one-hot position over its own chain (including its goal slot).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEFT, RIGHT, STAY = 0, 1, 2
N_ACTIONS = 3

HALLWAY_CHAINS = (4, 6, 8, 10)
HALLWAY_GROUP_CHAINS = (3, 5, 7, 4, 6, 8, 10)
HALLWAY_GROUP_GROUPS = ((0, 1, 2), (3, 4, 5, 6))


class EnvError(Exception):
    pass


@dataclass
class EnvConfig:
    name: str = "hallway"
    chain_lengths: tuple = HALLWAY_CHAINS
    groups: tuple = None
    episode_limit: int = 20
    seed: int = 0

    def __post_init__(self):
        self.chain_lengths = tuple(int(c) for c in self.chain_lengths)
        if self.groups is None:
            self.groups = (tuple(range(len(self.chain_lengths))),)
        else:
            self.groups = tuple(tuple(int(a) for a in grp) for grp in self.groups)
        if any(c <= 0 for c in self.chain_lengths):
            raise EnvError("chain lengths must be positive")
        members = sorted(a for grp in self.groups for a in grp)
        if members != list(range(len(self.chain_lengths))):
            raise EnvError("groups must partition the agent set exactly")
        if self.episode_limit < max(self.chain_lengths):
            raise EnvError("episode_limit must cover the longest chain")


def hallway_config(episode_limit=20, seed=0):
    return EnvConfig(name="hallway", chain_lengths=HALLWAY_CHAINS,
                     groups=None, episode_limit=episode_limit, seed=seed)


def hallway_group_config(episode_limit=25, seed=0):
    return EnvConfig(name="hallway_group", chain_lengths=HALLWAY_GROUP_CHAINS,
                     groups=HALLWAY_GROUP_GROUPS, episode_limit=episode_limit,
                     seed=seed)


def make_env(cfg: EnvConfig):
    return HallwayEnv(cfg)


def env_config_from_dict(d):
    d = dict(d)
    name = d.pop("name", "hallway")
    if name not in ("hallway", "hallway_group"):
        raise EnvError(f"unknown env name '{name}'")
    base = hallway_config() if name == "hallway" else hallway_group_config()
    cfg = EnvConfig(
        name=name,
        chain_lengths=tuple(d.pop("chain_lengths", base.chain_lengths)),
        groups=tuple(tuple(g) for g in d.pop("groups")) if "groups" in d
        else (base.groups if name == "hallway_group" else None),
        episode_limit=int(d.pop("episode_limit", base.episode_limit)),
        seed=int(d.pop("seed", base.seed)),
    )
    if d:
        raise EnvError(f"unknown env config keys: {sorted(d)}")
    return cfg


@dataclass
class EnvStep:
    observations: np.ndarray   # [n_agents, obs_dim], float64
    state: np.ndarray          # [state_dim], float64
    reward: float
    terminated: bool


class HallwayEnv:
    """Simultaneous-arrival chain game; see module docstring for the rules."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.chains = cfg.chain_lengths
        self.groups = cfg.groups
        self.n_agents = len(self.chains)
        self.episode_limit = cfg.episode_limit
        self.max_chain = max(self.chains)
        # one-hot position padded to the longest chain (goal slot included),
        # plus one-hot agent id
        self.pos_slots = self.max_chain + 1
        self.obs_dim = self.pos_slots + self.n_agents
        self.state_dim = sum(c + 1 for c in self.chains)
        self.n_actions = N_ACTIONS
        self._state_offsets = np.cumsum([0] + [c + 1 for c in self.chains])[:-1]
        self._group_of = np.zeros(self.n_agents, dtype=np.intp)
        for gi, grp in enumerate(self.groups):
            for a in grp:
                self._group_of[a] = gi
        self._rng = np.random.default_rng(cfg.seed)
        self.positions = None
        self.arrived = None
        self.t = 0
        self._done = True

    # -- observation model -------------------------------------------------

    def _obs(self):
        obs = np.zeros((self.n_agents, self.obs_dim))
        for i in range(self.n_agents):
            obs[i, self.positions[i]] = 1.0
            obs[i, self.pos_slots + i] = 1.0
        return obs

    def _state(self):
        st = np.zeros(self.state_dim)
        for i in range(self.n_agents):
            st[self._state_offsets[i] + self.positions[i]] = 1.0
        return st

    def _step_obj(self, reward, terminated):
        return EnvStep(self._obs(), self._state(), float(reward), terminated)

    # -- dynamics -----------------------------------------------------------

    def reset(self, seed=None):
        """Place every agent uniformly at random on a non-goal cell."""
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.positions = np.array(
            [self._rng.integers(0, c) for c in self.chains], dtype=np.intp)
        self.arrived = [False] * len(self.groups)
        self.t = 0
        self._done = False
        return self._step_obj(0.0, False)

    def step(self, actions):
        if self._done:
            raise EnvError("step() after episode end; call reset()")
        actions = np.asarray(actions, dtype=np.intp)
        if actions.shape != (self.n_agents,):
            raise EnvError(f"expected {self.n_agents} actions, got {actions.shape}")
        if ((actions < 0) | (actions >= N_ACTIONS)).any():
            raise EnvError("action index out of range")

        for i in range(self.n_agents):
            p, c = self.positions[i], self.chains[i]
            if p == c:
                continue  # goal is absorbing
            a = actions[i]
            if a == LEFT:
                self.positions[i] = max(0, p - 1)
            elif a == RIGHT:
                self.positions[i] = p + 1  # p == c-1 enters the goal
        self.t += 1

        reward, terminated = self._resolve_arrivals()
        if not terminated and self.t >= self.episode_limit:
            terminated = True
        self._done = terminated
        return self._step_obj(reward, terminated)

    def _resolve_arrivals(self):
        newly = []
        for gi, grp in enumerate(self.groups):
            if self.arrived[gi]:
                continue
            at_goal = sum(1 for a in grp if self.positions[a] == self.chains[a])
            if at_goal == len(grp):
                newly.append(gi)
            elif at_goal > 0:
                return 0.0, True  # partial group at the goal: failure
        if len(newly) >= 2:
            return 0.0, True  # two groups arriving together: failure
        for gi in newly:
            self.arrived[gi] = True
        if all(self.arrived):
            return 1.0, True
        return 0.0, False
