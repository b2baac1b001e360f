import logging

import numpy as np

from config import ACTIONS
from models import ConfigError, GridState, PusherState
from utils import gridworld, pusher2d

logger = logging.getLogger(__name__)

ENVIRONMENTS = {
    'gridworld': gridworld,
    'pusher2d': pusher2d,
}


def get_environment(name):
    """
    Look up an environment module by name

    Every environment module exposes step, render, object_centers_px,
    sample_trajectory, random_state and palette.
    """
    try:
        return ENVIRONMENTS[name]
    except KeyError:
        raise ConfigError(f"Unknown environment: {name}. Expected one of {sorted(ENVIRONMENTS)}")


def env_name_of(state):
    return 'gridworld' if isinstance(state, GridState) else 'pusher2d'


def state_from_dict(env_name, data):
    """Rebuild a state from a states.json record"""
    if env_name == 'gridworld':
        return GridState.from_dict(data)
    return PusherState.from_dict(data)


def count_pushes(before, after):
    """Number of non-agent objects that moved between two states"""
    moved = 0
    for p, q in zip(before.positions[1:], after.positions[1:]):
        if not np.allclose(p, q):
            moved += 1
    return moved


def make_task(env_name, task_seed, min_pushes=3, n_objects=None, max_steps=2000, max_starts=20):
    """
    Derive a (start, goal) pair by random walking until enough pushes happened

    A start whose walk runs out of steps (an object locked in a corner) is
    redrawn from the same generator.

    Args:
        env_name (str): Environment name
        task_seed (int): Seed for the start placement and the walk
        min_pushes (int): Steps in which the agent moved at least one object
        n_objects (int, optional): Objects including the agent
        max_steps (int): Walk budget per start
        max_starts (int): Start placements tried before giving up on the seed

    Returns:
        tuple: (start_state, goal_state)
    """
    env = get_environment(env_name)
    rng = np.random.default_rng(task_seed)
    for attempt in range(max_starts):
        start = env.random_state(rng) if n_objects is None else env.random_state(rng, n_objects)
        state = start
        pushes = 0
        steps = 0
        while pushes < min_pushes and steps < max_steps:
            action = int(rng.integers(0, len(ACTIONS)))
            next_state = env.step(state, action)
            if count_pushes(state, next_state) > 0:
                pushes += 1
            state = next_state
            steps += 1
        if pushes >= min_pushes:
            logger.debug(f"Task {task_seed}: {pushes} pushes in {steps} steps (start {attempt + 1})")
            return start, state
        logger.debug(f"Task {task_seed}: start {attempt + 1} reached only {pushes} pushes, redrawing")
    raise ConfigError(f"Task seed {task_seed} found no start reaching {min_pushes} pushes in {max_starts} draws")
