"""UCT tree search over the 5-action space, used to generate expert data."""

from __future__ import annotations

import math
from multiprocessing import Pool

import numpy as np

from .dataset import RTG_GAMMA, Episode, write_dataset
from .occupancy import render_grid
from .world import (Action, InvalidStateError, N_ACTIONS, build_scenario,
                    step_decision)

ROLLOUT_POLICIES = ("uniform-random", "cruise-default")


class SearchConfig:
    __slots__ = ("simulations", "exploration", "rollout_depth", "rollout_policy",
                 "discount")

    def __init__(self, simulations=100, exploration=1.414, rollout_depth=10,
                 rollout_policy="cruise-default", discount=RTG_GAMMA):
        if simulations < 1:
            raise ValueError("simulations must be >= 1")
        if exploration < 0.0:
            raise ValueError("exploration constant must be >= 0")
        if rollout_depth < 1:
            raise ValueError("rollout depth must be >= 1")
        if rollout_policy not in ROLLOUT_POLICIES:
            raise ValueError(f"rollout policy must be one of {ROLLOUT_POLICIES}")
        self.simulations = simulations
        self.exploration = exploration
        self.rollout_depth = rollout_depth
        self.rollout_policy = rollout_policy
        self.discount = discount


class SearchNode:
    __slots__ = ("visits", "action_visits", "action_values", "children")

    def __init__(self):
        self.visits = 0
        self.action_visits = [0] * N_ACTIONS
        self.action_values = [0.0] * N_ACTIONS
        self.children = {}

    def check_invariant(self):
        assert self.visits == sum(self.action_visits), "N != sum(n_a)"


def _uct_action(node, c):
    log_n = math.log(node.visits)
    best_a = 0
    best_score = -math.inf
    for a in range(N_ACTIONS):
        n_a = node.action_visits[a]
        score = node.action_values[a] / n_a + c * math.sqrt(log_n / n_a)
        if score > best_score:
            best_score = score
            best_a = a
    return best_a


def _rollout(world, cfg, rng):
    """Depth-limited rollout; returns the discounted return from this state."""
    total = 0.0
    disc = 1.0
    for _ in range(cfg.rollout_depth):
        if world.is_terminal:
            break
        if cfg.rollout_policy == "cruise-default":
            a = Action.CRUISE
        else:
            a = int(rng.integers(0, N_ACTIONS))
        _, _, r = step_decision(world, a)
        total += disc * r
        disc *= cfg.discount
    return total


def _backup(path, tail, gamma):
    value = tail
    for node, action, reward in reversed(path):
        value = reward + gamma * value
        node.visits += 1
        node.action_visits[action] += 1
        node.action_values[action] += value
        if __debug__:
            node.check_invariant()


def plan(world, cfg, rng_seed):
    """Choose an action by UCT search. Deterministic in (world, cfg, rng_seed).

    The input world is never mutated; every simulation steps a clone. The
    tree is rebuilt from scratch on every call.
    """
    if world.is_terminal:
        raise InvalidStateError("cannot plan from a terminal world")
    if not isinstance(rng_seed, np.random.SeedSequence):
        rng_seed = np.random.SeedSequence(rng_seed)
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    root = SearchNode()
    for _ in range(cfg.simulations):
        w = world.clone()
        node = root
        path = []
        tail = 0.0
        while not w.is_terminal:
            untried = None
            for a in range(N_ACTIONS):
                if node.action_visits[a] == 0:
                    untried = a
                    break
            if untried is not None:
                _, _, r = step_decision(w, untried)
                path.append((node, untried, r))
                node.children[untried] = SearchNode()
                tail = _rollout(w, cfg, rng)
                break
            a = _uct_action(node, cfg.exploration)
            _, _, r = step_decision(w, a)
            path.append((node, a, r))
            node = node.children[a]
        _backup(path, tail, cfg.discount)
    best = 0
    for a in range(1, N_ACTIONS):
        if root.action_visits[a] > root.action_visits[best]:
            best = a
    return Action(best)


def run_expert_episode(seed, cfg, scenario_cfg=None, n_interact="sample"):
    """Run one MCTS-driven episode and return it as an Episode record."""
    world = build_scenario(seed, n_interact, scenario_cfg)
    grids, actions, rewards = [], [], []
    while not world.is_terminal:
        step_seed = np.random.SeedSequence((seed & 0xFFFFFFFFFFFFFFFF,
                                            world.decision_step))
        action = plan(world, cfg, step_seed)
        grids.append(render_grid(world))
        _, _, r = step_decision(world, action)
        actions.append(int(action))
        rewards.append(r)
    if world.collided:
        cause = "collision"
    elif world.ego_exited:
        cause = "exit"
    else:
        cause = "horizon"
    return Episode.from_float_grids(np.stack(grids), actions, rewards, cause)


def _episode_job(args):
    seed, cfg, scenario_cfg = args
    return run_expert_episode(seed, cfg, scenario_cfg)


def generate_episodes(n_episodes, cfg, base_seed, scenario_cfg=None, workers=1):
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    jobs = [(base_seed + i, cfg, scenario_cfg) for i in range(n_episodes)]
    if workers <= 1:
        return [_episode_job(j) for j in jobs]
    with Pool(workers) as pool:
        return pool.map(_episode_job, jobs, chunksize=4)


def generate_dataset(path, n_episodes, cfg, base_seed, scenario_cfg=None, workers=1):
    """Generate expert episodes and write them in the dataset format."""
    episodes = generate_episodes(n_episodes, cfg, base_seed, scenario_cfg, workers)
    try:
        write_dataset(path, episodes)
    except OSError as exc:
        raise OSError(f"failed writing dataset after episode {n_episodes - 1}: {exc}") from exc
    return episodes
