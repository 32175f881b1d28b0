"""Exact planning oracle for the Hallway family.

Finite-horizon backward induction over the *joint* position space.  Movement
is deterministic and per-agent independent, so each Bellman backup
``V_d(s) = max_a W(next(s, a))`` is computed by sweeping one agent axis at a
time (three shifted gathers and an elementwise max per agent) instead of
enumerating the 3^n joint action space.

Group arrivals partition non-terminal states into phases (which groups are
already absorbed at the goal).  Each phase is its own subproblem over the
remaining agents; a transition that completes exactly one group routes into
the subproblem without that group, completing the last group scores 1, and
any partial-group arrival or simultaneous double arrival scores 0.

The returned plan carries one optimal joint policy: the greedy policy with
per-agent action preference (right, stay, left), which for these chain games
is memoryless in the joint position (rush to the last cell, hover, step in
together).
"""

from __future__ import annotations

from itertools import product

import numpy as np

from .envs import LEFT, RIGHT, STAY, EnvConfig, EnvError, HallwayEnv

MAX_JOINT_STATES = 10**6

_PREFERRED = (RIGHT, STAY, LEFT)


def _move_table(length):
    """next extended position, indexed [position, action]; goal absorbs."""
    size = length + 1
    nxt = np.zeros((size, 3), dtype=np.intp)
    for p in range(size):
        if p == length:
            nxt[p] = (length, length, length)
        else:
            nxt[p, LEFT] = max(0, p - 1)
            nxt[p, RIGHT] = p + 1
            nxt[p, STAY] = p
    return nxt


class _Subproblem:
    """Backward-induction tables for one set of not-yet-arrived groups."""

    def __init__(self, cfg: EnvConfig, group_ids, horizon, children):
        self.group_ids = tuple(sorted(group_ids))
        self.agents = tuple(sorted(a for gi in self.group_ids
                                   for a in cfg.groups[gi]))
        self.axis_of = {a: k for k, a in enumerate(self.agents)}
        self.sizes = tuple(cfg.chain_lengths[a] + 1 for a in self.agents)
        self.goals = tuple(cfg.chain_lengths[a] for a in self.agents)
        self.moves = [_move_table(cfg.chain_lengths[a]) for a in self.agents]
        self.strides = np.array(
            np.cumprod((self.sizes[1:] + (1,))[::-1])[::-1], dtype=np.intp)
        self.children = children  # group id -> _Subproblem without it

        counts = {}
        for gi in self.group_ids:
            c = np.zeros(self.sizes, dtype=np.int8)
            for a in cfg.groups[gi]:
                k = self.axis_of[a]
                ind = np.zeros(self.sizes[k], dtype=np.int8)
                ind[self.goals[k]] = 1
                c = c + ind.reshape((1,) * k + (-1,) + (1,) * (len(self.sizes) - k - 1))
            counts[gi] = c
        self._full = {gi: counts[gi] == len(cfg.groups[gi]) for gi in self.group_ids}
        partial = [(counts[gi] > 0) & ~self._full[gi] for gi in self.group_ids]
        self._any_partial = np.logical_or.reduce(partial)
        self._n_full = sum(self._full[gi].astype(np.int8) for gi in self.group_ids)

        self.values = [np.zeros(self.sizes, dtype=np.float32)]
        for _ in range(horizon):
            self.values.append(self._backup(self.values[-1]))

    def _child_broadcast(self, gi, v_child):
        child = self.children[gi]
        shape = [1] * len(self.sizes)
        for a in child.agents:
            shape[self.axis_of[a]] = self.sizes[self.axis_of[a]]
        return np.broadcast_to(v_child.reshape(shape), self.sizes)

    def _classify(self, v_prev):
        """Value of landing in each extended state, given this phase."""
        if len(self.group_ids) == 1:
            gi = self.group_ids[0]
            w = np.where(self._full[gi], np.float32(1.0), v_prev)
        else:
            w = v_prev
            for gi in self.group_ids:
                sole = self._full[gi] & (self._n_full == 1)
                w = np.where(sole, self._child_broadcast(gi, self.children[gi].values_prev),
                             w)
            w = np.where(self._n_full >= 2, np.float32(0.0), w)
        return np.where(self._any_partial, np.float32(0.0), w)

    def _backup(self, v_prev):
        for gi in self.group_ids:
            if len(self.group_ids) > 1:
                self.children[gi].values_prev = self.children[gi].values[len(self.values) - 1]
        w = self._classify(v_prev)
        for k in range(len(self.agents)):
            w = np.maximum.reduce([
                np.take(w, self.moves[k][:, a], axis=k) for a in (LEFT, RIGHT, STAY)])
        return w

    def flat_index(self, positions_sub):
        return positions_sub @ self.strides

    def landing_values(self, nxt, d_prev):
        """Values of candidate landing tuples [K, n_agents] at depth d_prev."""
        K = nxt.shape[0]
        at_goal = nxt == np.asarray(self.goals, dtype=np.intp)
        w = None
        n_full = np.zeros(K, dtype=np.intp)
        any_partial = np.zeros(K, dtype=bool)
        fulls = {}
        for gi in self.group_ids:
            cols = [self.axis_of[a] for a in np.flatnonzero_groups
                    ] if False else None
        for gi, sub_cols in self._group_columns.items():
            cnt = at_goal[:, sub_cols].sum(axis=1)
            fulls[gi] = cnt == len(sub_cols)
            any_partial |= (cnt > 0) & ~fulls[gi]
            n_full += fulls[gi]
        if len(self.group_ids) == 1:
            gi = self.group_ids[0]
            w = np.where(fulls[gi], 1.0,
                         self.values[d_prev][tuple(nxt.T)].astype(np.float64))
        else:
            w = self.values[d_prev][tuple(nxt.T)].astype(np.float64)
            for gi in self.group_ids:
                sole = fulls[gi] & (n_full == 1)
                if sole.any():
                    child = self.children[gi]
                    cols = [self.axis_of[a] for a in child.agents]
                    sub = nxt[:, cols]
                    w = np.where(sole, child.values[d_prev][tuple(sub.T)].astype(np.float64), w)
            w = np.where(n_full >= 2, 0.0, w)
        return np.where(any_partial, 0.0, w)

    @property
    def _group_columns(self):
        if not hasattr(self, "_gc"):
            self._gc = {}
        if not self._gc:
            for gi in self.group_ids:
                self._gc[gi] = [self.axis_of[a] for a in sorted(
                    set(self.agents) & set(self._cfg_groups[gi]))]
        return self._gc


class OraclePlan:
    """Optimal values and one optimal joint policy for a Hallway config."""

    def __init__(self, cfg: EnvConfig):
        total = 1
        for c in cfg.chain_lengths:
            total *= c + 1
        if total > MAX_JOINT_STATES:
            raise EnvError(
                f"joint state space {total} exceeds bound {MAX_JOINT_STATES}")
        self.cfg = cfg
        self.horizon = cfg.episode_limit
        self.n_groups = len(cfg.groups)

        self._subs = {}
        ids = tuple(range(self.n_groups))
        for size in range(1, self.n_groups + 1):
            for combo in _combinations(ids, size):
                children = {gi: self._subs[tuple(sorted(set(combo) - {gi}))]
                            for gi in combo} if size > 1 else {}
                sub = _Subproblem(cfg, combo, self.horizon, children)
                sub._cfg_groups = cfg.groups
                self._subs[combo] = sub
        self._main = self._subs[ids]

        start = tuple(slice(0, c) for c in cfg.chain_lengths)
        v_start = self._main.values[self.horizon][start]
        self.optimal_return = float(v_start.mean())
        self.min_return = float(v_start.min())

        self._action_tuples = {}

    # -- queries -------------------------------------------------------------

    def value(self, positions, steps_elapsed=0):
        """Best achievable success probability from a joint state."""
        sub, pos_sub = self._phase(positions)
        d = self.horizon - steps_elapsed
        if d <= 0:
            return 0.0
        return float(sub.values[d][tuple(pos_sub)])

    def act(self, positions, steps_elapsed=0):
        """One optimal joint action; arrived agents stay put."""
        positions = np.asarray(positions, dtype=np.intp)
        sub, pos_sub = self._phase(positions)
        d = self.horizon - steps_elapsed
        if d <= 0:
            raise EnvError("no steps remaining")
        combos = self._combos(len(sub.agents))
        nxt = np.empty((combos.shape[0], len(sub.agents)), dtype=np.intp)
        for k in range(len(sub.agents)):
            nxt[:, k] = sub.moves[k][pos_sub[k]][combos[:, k]]
        w = sub.landing_values(nxt, d - 1)
        best = combos[int(np.argmax(w))]
        actions = np.full(self.cfg.chain_lengths.__len__(), STAY, dtype=np.intp)
        for k, a in enumerate(sub.agents):
            actions[a] = best[k]
        return actions

    def _phase(self, positions):
        positions = np.asarray(positions, dtype=np.intp)
        remaining = []
        for gi, grp in enumerate(self.cfg.groups):
            at_goal = [positions[a] == self.cfg.chain_lengths[a] for a in grp]
            if all(at_goal):
                continue
            if any(at_goal):
                raise EnvError("state has a partially arrived group; terminal")
            remaining.append(gi)
        if not remaining:
            raise EnvError("all groups arrived; terminal state")
        sub = self._subs[tuple(remaining)]
        return sub, positions[list(sub.agents)]

    def _combos(self, n):
        if n not in self._action_tuples:
            combos = np.array(list(product(_PREFERRED, repeat=n)), dtype=np.intp)
            self._action_tuples[n] = combos
        return self._action_tuples[n]


def _combinations(ids, size):
    from itertools import combinations
    return [tuple(sorted(c)) for c in combinations(ids, size)]


def oracle_plan(cfg: EnvConfig) -> OraclePlan:
    """Solve the joint MDP exactly; see :class:`OraclePlan`."""
    return OraclePlan(cfg)


def run_oracle_episode(env: HallwayEnv, plan: OraclePlan, seed=None):
    """Roll the oracle policy in the simulator; returns the episode return."""
    env.reset(seed=seed)
    total = 0.0
    for t in range(env.episode_limit):
        actions = plan.act(env.positions, steps_elapsed=t)
        step = env.step(actions)
        total += step.reward
        if step.terminated:
            break
    return total
