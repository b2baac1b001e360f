import logging

import numpy as np

from config import CELL_PX, GRID_MARGIN_PX, GRID_OBJECTS, GRID_SIZE, IMAGE_SIZE
from models import GridState, Trajectory, validate_action

logger = logging.getLogger(__name__)

# (d_row, d_col) per action id
ACTION_DELTAS = {
    0: (0, -1),
    1: (0, 1),
    2: (-1, 0),
    3: (1, 0),
}

# Shape extents as fractions of a cell
_SHAPE_HALF = 0.375 * CELL_PX
_CROSS_ARM = 0.125 * CELL_PX


def default_specs(n_objects=len(GRID_OBJECTS)):
    return tuple(GRID_OBJECTS[:n_objects])


def make_state(positions, n_objects=None, grid_size=GRID_SIZE):
    """Build a validated GridState with the default shapes and colors"""
    n_objects = len(positions) if n_objects is None else n_objects
    return GridState(positions=positions, object_specs=default_specs(n_objects), grid_size=grid_size).validate()


def _in_bounds(cell, grid_size):
    return 0 <= cell[0] < grid_size and 0 <= cell[1] < grid_size


def step(state, action):
    """
    Move the agent one cell, pushing the contiguous chain of objects in front of it

    A chain whose far end would leave the board blocks the whole move, in which
    case the state is returned unchanged.

    Args:
        state (GridState): Current state
        action (int): Action id in {0: left, 1: right, 2: up, 3: down}

    Returns:
        GridState: Next state
    """
    action = validate_action(action)
    d_row, d_col = ACTION_DELTAS[action]
    occupied = {pos: index for index, pos in enumerate(state.positions)}

    agent = state.positions[0]
    chain = [0]
    cell = (agent[0] + d_row, agent[1] + d_col)
    while True:
        if not _in_bounds(cell, state.grid_size):
            return state
        if cell not in occupied:
            break
        chain.append(occupied[cell])
        cell = (cell[0] + d_row, cell[1] + d_col)

    positions = list(state.positions)
    for index in chain:
        row, col = positions[index]
        positions[index] = (row + d_row, col + d_col)
    return GridState(positions=positions, object_specs=state.object_specs, grid_size=state.grid_size)


def cell_center_px(row, col):
    offset = GRID_MARGIN_PX + CELL_PX / 2.0
    return (offset + col * CELL_PX, offset + row * CELL_PX)


def object_centers_px(state):
    """
    Pixel centers of every object, consistent with render geometry

    Args:
        state (GridState): Board state

    Returns:
        list: (x, y) float pairs, index 0 the agent
    """
    return [cell_center_px(row, col) for row, col in state.positions]


def _shape_mask(shape, dx, dy):
    h = _SHAPE_HALF
    if shape == 'square':
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if shape == 'circle':
        return dx ** 2 + dy ** 2 <= h ** 2
    if shape == 'diamond':
        return np.abs(dx) + np.abs(dy) <= h
    if shape == 'cross':
        w = _CROSS_ARM
        return ((np.abs(dx) <= w) & (np.abs(dy) <= h)) | ((np.abs(dy) <= w) & (np.abs(dx) <= h))
    if shape == 'triangle':
        # Apex up, area centroid on the cell center
        height = 2 * h
        top = -2.0 * height / 3.0
        bottom = height / 3.0
        half_base = h
        t = (dy - top) / (bottom - top)
        return (dy >= top) & (dy <= bottom) & (np.abs(dx) <= t * half_base)
    raise ValueError(f"Unknown shape: {shape}")


def render(state):
    """
    Render a board state to a 128x128 RGB frame

    Args:
        state (GridState): Board state

    Returns:
        np.ndarray: (128, 128, 3) uint8 frame, black background
    """
    frame = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    # Pixel centers sit at index + 0.5
    coords = np.arange(CELL_PX) + 0.5 - CELL_PX / 2.0
    dy, dx = np.meshgrid(coords, coords, indexing='ij')
    for (row, col), (shape, color) in zip(state.positions, state.object_specs):
        mask = _shape_mask(shape, dx, dy)
        top = GRID_MARGIN_PX + row * CELL_PX
        left = GRID_MARGIN_PX + col * CELL_PX
        block = frame[top:top + CELL_PX, left:left + CELL_PX]
        block[mask] = color
    return frame


def random_state(rng, n_objects=len(GRID_OBJECTS), grid_size=GRID_SIZE):
    """Place n_objects on distinct random cells"""
    cells = rng.choice(grid_size * grid_size, size=n_objects, replace=False)
    positions = [(int(c) // grid_size, int(c) % grid_size) for c in cells]
    return make_state(positions, grid_size=grid_size)


def palette(state):
    return state.colors


def sample_trajectory(rng_seed, length, n_objects=len(GRID_OBJECTS)):
    """
    Sample a random-action trajectory from a random initial placement

    Args:
        rng_seed (int): Seed for placement and actions
        length (int): Number of frames, at least 3
        n_objects (int): Objects on the board including the agent

    Returns:
        Trajectory: frames, states and the (held-out) action labels
    """
    if length < 3:
        raise ValueError(f"Trajectory length must be at least 3, got {length}")
    rng = np.random.default_rng(rng_seed)
    state = random_state(rng, n_objects)
    actions = [int(a) for a in rng.integers(0, len(ACTION_DELTAS), size=length - 1)]

    states = [state]
    for action in actions:
        state = step(state, action)
        states.append(state)
    frames = np.stack([render(s) for s in states])
    return Trajectory(frames=frames, states=states, actions=actions)
