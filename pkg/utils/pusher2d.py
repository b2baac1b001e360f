import logging

import numpy as np

from config import (
    IMAGE_SIZE,
    PUSHER_COLORS,
    PUSHER_BACKOFF_STEPS,
    PUSHER_DISC_RADIUS_PX,
    PUSHER_OVERLAP_TOLERANCE,
    PUSHER_SETTLE_ITERATIONS,
    PUSHER_STEP_PX,
)
from models import DynamicsError, PusherState, Trajectory, validate_action

logger = logging.getLogger(__name__)

# (dx, dy) unit vectors per action id; y grows downwards
ACTION_DIRECTIONS = {
    0: (-1.0, 0.0),
    1: (1.0, 0.0),
    2: (0.0, -1.0),
    3: (0.0, 1.0),
}

# Minimum gap between discs at sampling time
_SPAWN_GAP_PX = 2.0


def make_state(positions, radius=PUSHER_DISC_RADIUS_PX, colors=None):
    colors = PUSHER_COLORS[:len(positions)] if colors is None else colors
    return PusherState(positions=positions, radii=[radius] * len(positions), colors=colors)


def _clamp(point, radius):
    return np.clip(point, radius, IMAGE_SIZE - radius)


def overlaps(positions, radii):
    """Pairwise overlap depths (i, j, depth) above tolerance"""
    found = []
    for i in range(len(positions)):
        for j in range(i + 1, len(positions)):
            dist = float(np.linalg.norm(positions[j] - positions[i]))
            depth = radii[i] + radii[j] - dist
            if depth > PUSHER_OVERLAP_TOLERANCE:
                found.append((i, j, depth))
    return found


def settle(positions, radii, max_iterations=PUSHER_SETTLE_ITERATIONS):
    """
    Resolve disc overlaps by projecting discs apart along contact normals

    The agent (index 0) is never the first to yield: in an agent-object contact
    the object moves the full depth. Whatever a clamp at the table edge keeps a
    disc from absorbing is handed back to its partner, so a disc pinned against
    a wall stops the pusher instead.

    Args:
        positions (np.ndarray): (k, 2) disc centers, modified copy is returned
        radii (sequence): disc radii
        max_iterations (int): Projection sweeps before giving up

    Returns:
        np.ndarray: Settled (k, 2) positions

    Raises:
        DynamicsError: If overlaps remain after max_iterations sweeps
    """
    positions = np.array(positions, dtype=np.float64)
    for index in range(len(positions)):
        positions[index] = _clamp(positions[index], radii[index])

    for _ in range(max_iterations):
        contacts = overlaps(positions, radii)
        if not contacts:
            return positions
        for i, j, _depth in contacts:
            delta = positions[j] - positions[i]
            dist = float(np.linalg.norm(delta))
            depth = radii[i] + radii[j] - dist
            if depth <= PUSHER_OVERLAP_TOLERANCE:
                continue
            normal = delta / dist if dist > 0 else np.array([1.0, 0.0])
            share = 1.0 if i == 0 else 0.5

            target_j = _clamp(positions[j] + normal * depth * share, radii[j])
            absorbed = float(np.dot(target_j - positions[j], normal))
            positions[j] = target_j

            remaining = depth - absorbed
            if remaining > PUSHER_OVERLAP_TOLERANCE:
                target_i = _clamp(positions[i] - normal * remaining, radii[i])
                positions[i] = target_i

    if overlaps(positions, radii):
        raise DynamicsError(f"Disc settling did not converge after {max_iterations} iterations")
    return positions


def _settle_move(start, radii, direction, fraction):
    positions = np.array(start, dtype=np.float64)
    positions[0] += direction * PUSHER_STEP_PX * fraction
    return settle(positions, radii)


def step(state, action):
    """
    Translate the agent disc by a fixed step and settle the table

    A push into a chain of discs jammed against a wall may not settle. The
    agent then backs off along the push direction: the largest fraction of
    the step that settles (found by bisection) is taken, down to no move.

    Args:
        state (PusherState): Current state
        action (int): Action id in {0: left, 1: right, 2: up, 3: down}

    Returns:
        PusherState: Settled next state
    """
    action = validate_action(action)
    start = np.array(state.positions, dtype=np.float64)
    direction = np.array(ACTION_DIRECTIONS[action])
    try:
        settled = _settle_move(start, state.radii, direction, 1.0)
    except DynamicsError:
        low, high = 0.0, 1.0
        settled = settle(start, state.radii)
        for _ in range(PUSHER_BACKOFF_STEPS):
            middle = (low + high) / 2.0
            try:
                settled = _settle_move(start, state.radii, direction, middle)
                low = middle
            except DynamicsError:
                high = middle
        logger.debug(f"Blocked push backed off to {low:.4f} of a step")
    return PusherState(positions=[tuple(p) for p in settled], radii=state.radii, colors=state.colors)


def object_centers_px(state):
    return [tuple(p) for p in state.positions]


def palette(state):
    return list(state.colors)


def render(state):
    """
    Render filled discs without anti-aliasing

    Args:
        state (PusherState): Table state

    Returns:
        np.ndarray: (128, 128, 3) uint8 frame
    """
    frame = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    coords = np.arange(IMAGE_SIZE) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing='ij')
    for (x, y), radius, color in zip(state.positions, state.radii, state.colors):
        mask = (xx - x) ** 2 + (yy - y) ** 2 <= radius ** 2
        frame[mask] = color
    return frame


def random_state(rng, n_objects=len(PUSHER_COLORS), radius=PUSHER_DISC_RADIUS_PX, max_attempts=10000):
    """Rejection-sample non-overlapping disc placements"""
    positions = []
    attempts = 0
    while len(positions) < n_objects:
        attempts += 1
        if attempts > max_attempts:
            raise DynamicsError(f"Could not place {n_objects} discs on the table")
        candidate = rng.uniform(radius, IMAGE_SIZE - radius, size=2)
        if all(np.linalg.norm(candidate - np.array(p)) >= 2 * radius + _SPAWN_GAP_PX for p in positions):
            positions.append(tuple(float(v) for v in candidate))
    return make_state(positions, radius=radius)


def sample_trajectory(rng_seed, length, n_objects=len(PUSHER_COLORS)):
    """Sample a uniformly random-action trajectory from a random placement"""
    if length < 3:
        raise ValueError(f"Trajectory length must be at least 3, got {length}")
    rng = np.random.default_rng(rng_seed)
    state = random_state(rng, n_objects)
    actions = [int(a) for a in rng.integers(0, len(ACTION_DIRECTIONS), size=length - 1)]

    states = [state]
    for action in actions:
        state = step(state, action)
        states.append(state)
    frames = np.stack([render(s) for s in states])
    return Trajectory(frames=frames, states=states, actions=actions)
