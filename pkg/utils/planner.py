import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from config import EARLY_STOP_DISTANCE, IMAGE_SIZE, LOCATOR_CONFIG, MISSING_OBJECT_PENALTY_PX
from models import DynamicsError, InvalidGoalError, PlanResult, PlanStep
from utils.actionmap import lookup_batch
from utils.frames import film_strip, side_by_side, to_model_scale, to_pixels, write_png

logger = logging.getLogger(__name__)


def locate_objects_batch(frames, palette, threshold=LOCATOR_CONFIG['color_threshold'],
                         min_pixels=LOCATOR_CONFIG['min_pixels']):
    """
    Color-blob centroids for a batch of frames

    Pixels within `threshold` (Euclidean RGB distance, 0-255 scale) of a palette
    color vote for it with weight 1 - distance / threshold; the weighted mean of
    their pixel centres is the object location.

    Args:
        frames (np.ndarray): (N, H, W, 3) uint8 frames
        palette (list): RGB triples, pairwise distinct
        threshold (float): Color distance cut-off
        min_pixels (int): Fewer matching pixels means the object is absent

    Returns:
        np.ndarray: (N, len(palette), 2) (x, y) locations, NaN where absent
    """
    frames = np.asarray(frames, dtype=np.float32)
    n, h, w, _ = frames.shape
    colors = np.asarray(palette, dtype=np.float32)
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    locations = np.full((n, len(colors), 2), np.nan)
    for index, color in enumerate(colors):
        distance = np.sqrt(((frames - color) ** 2).sum(axis=-1))
        inside = distance <= threshold
        weights = np.where(inside, 1.0 - distance / threshold, 0.0).astype(np.float64)
        # Exact-color pixels weigh 1; keep pixels at the threshold from vanishing entirely
        weights = np.where(inside, np.maximum(weights, 1e-6), 0.0)
        counts = inside.sum(axis=(1, 2))
        total = weights.sum(axis=(1, 2))
        found = counts >= min_pixels
        if not found.any():
            continue
        cx = (weights.sum(axis=1) * xs).sum(axis=1) / np.where(found, total, 1.0)
        cy = (weights.sum(axis=2) * ys).sum(axis=1) / np.where(found, total, 1.0)
        locations[found, index, 0] = cx[found]
        locations[found, index, 1] = cy[found]
    return locations


def locate_objects(x, palette, **kwargs):
    """
    Locate each palette color in one frame

    Returns:
        list: (x, y) per color, None where the object is absent
    """
    locations = locate_objects_batch(np.asarray(x)[None], palette, **kwargs)[0]
    return [None if np.isnan(loc).any() else (float(loc[0]), float(loc[1])) for loc in locations]


def goal_locations(goal, palette):
    locations = locate_objects_batch(np.asarray(goal)[None], palette)[0]
    if np.isnan(locations).any(axis=1).all():
        raise InvalidGoalError("No object can be located in the goal frame")
    return locations


def cost_from_locations(predicted, goal_locs, penalty=MISSING_OBJECT_PENALTY_PX, return_step=False):
    """
    Planning cost from located objects

    Args:
        predicted (np.ndarray): (..., H, P, 2) locations along the horizon
        goal_locs (np.ndarray): (P, 2) goal locations, NaN rows ignored
        return_step (bool): Also return the first horizon step reaching the minimum

    Returns:
        np.ndarray: (...,) minimum over the horizon of summed squared distances,
        or a (cost, step) pair when return_step is set
    """
    in_goal = ~np.isnan(goal_locs).any(axis=-1)
    diff = predicted[..., in_goal, :] - goal_locs[in_goal]
    squared = (diff ** 2).sum(axis=-1)
    squared = np.where(np.isnan(squared), penalty ** 2, squared)
    per_step = squared.sum(axis=-1)
    if return_step:
        return per_step.min(axis=-1), per_step.argmin(axis=-1)
    return per_step.min(axis=-1)


def cost(predicted_frames, goal, palette):
    """
    Minimum over horizon steps of the summed squared object-to-goal distances

    All objects located in the goal count, the agent included. An object
    missing from a predicted frame costs MISSING_OBJECT_PENALTY_PX squared.

    Args:
        predicted_frames (list): (H, W, 3) uint8 frames, at least one
        goal (np.ndarray): Goal frame
        palette (list): Object colors

    Returns:
        float: Cost

    Raises:
        InvalidGoalError: If nothing can be located in the goal frame
    """
    if len(predicted_frames) == 0:
        raise ValueError("cost needs at least one predicted frame")
    goal_locs = goal_locations(goal, palette)
    predicted = locate_objects_batch(np.stack(predicted_frames), palette)
    return float(cost_from_locations(predicted, goal_locs))


@dataclass
class PlanContext:
    x_prev: np.ndarray  # (H, W, 3) uint8
    x_curr: np.ndarray
    state: Optional[Any] = None


class LearnedForwardModel:
    """Recursive rollouts of the learned model with agent motions from the action table"""

    def __init__(self, model, table, device='cpu'):
        self.model = model.eval()
        self.table = table
        self.device = device

    @torch.no_grad()
    def predict(self, context, action_seqs):
        """
        Args:
            context (PlanContext): Last two real frames
            action_seqs (np.ndarray): (S, H) action ids

        Returns:
            np.ndarray: (S, H, 128, 128, 3) uint8 predicted frames
        """
        action_seqs = np.asarray(action_seqs)
        s, h = action_seqs.shape
        x_prev = torch.from_numpy(to_model_scale(context.x_prev)).to(self.device).expand(s, -1, -1, -1)
        x_curr = torch.from_numpy(to_model_scale(context.x_curr)).to(self.device).expand(s, -1, -1, -1)
        frames = []
        for k in range(h):
            phi = lookup_batch(self.table, action_seqs[:, k]).to(self.device)
            x_next = self.model(x_prev, x_curr, phi)
            frames.append(to_pixels(x_next))
            x_prev, x_curr = x_curr, x_next
        return np.stack(frames, axis=1)


class OracleForwardModel:
    """
    Ground-truth environment used in place of a learned model

    A sequence whose step raises DynamicsError keeps black frames from that
    step on, so every object there scores the missing-object penalty.
    """

    def __init__(self, env):
        self.env = env

    def predict(self, context, action_seqs):
        action_seqs = np.asarray(action_seqs)
        out = np.zeros(action_seqs.shape + (IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
        for i, seq in enumerate(action_seqs):
            state = context.state
            for k, action in enumerate(seq):
                try:
                    state = self.env.step(state, int(action))
                except DynamicsError as e:
                    logger.debug(f"Oracle rollout {i} failed at horizon step {k}: {str(e)}")
                    break
                out[i, k] = self.env.render(state)
        return out


def _ranking(costs, steps, first_actions, decimals=6):
    """Sample order by cost, then earliest horizon step at that cost, then lowest first action"""
    return np.lexsort((np.arange(len(costs)), first_actions, steps, np.round(costs, decimals)))


def cem_plan_step(context, goal, forward_model, palette, cfg, seed=None):
    """
    One CEM optimisation over discrete action sequences

    Each horizon position keeps its own categorical distribution over action
    ids, refit to the elite set with add-one smoothing after every iteration.

    Args:
        context (PlanContext): Last two frames (and the true state for the oracle)
        goal (np.ndarray): Goal frame
        forward_model: Object with predict(context, action_seqs) -> (S, H, 128, 128, 3)
        palette (list): Object colors used for localization
        cfg (CEMConfig): CEM parameters
        seed (int, optional): Sampling seed, defaults to cfg.seed

    Returns:
        PlanStep: First action of the best sequence seen over all iterations
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    goal_locs = goal_locations(goal, palette)
    probs = np.full((cfg.horizon, cfg.n_actions), 1.0 / cfg.n_actions)

    best_key = None
    best_cost = np.inf
    best_seq = None
    best_frame = None
    iteration_costs = []
    for iteration in range(cfg.iterations):
        seqs = np.stack([rng.choice(cfg.n_actions, size=cfg.samples, p=probs[k]) for k in range(cfg.horizon)],
                        axis=1)
        frames = forward_model.predict(context, seqs)
        s, h = seqs.shape
        located = locate_objects_batch(frames.reshape(s * h, *frames.shape[2:]), palette)
        costs, steps = cost_from_locations(located.reshape(s, h, *located.shape[1:]), goal_locs, return_step=True)

        order = _ranking(costs, steps, seqs[:, 0])
        index = order[0]
        iteration_costs.append(float(costs[index]))
        key = (round(float(costs[index]), 6), int(steps[index]), int(seqs[index, 0]))
        if best_key is None or key < best_key:
            best_key = key
            best_cost = float(costs[index])
            best_seq = seqs[index].copy()
            best_frame = frames[index, 0]

        elite = seqs[order[:cfg.n_elite]]
        for k in range(cfg.horizon):
            counts = np.bincount(elite[:, k], minlength=cfg.n_actions)
            probs[k] = (counts + 1.0) / (len(elite) + cfg.n_actions)
        logger.debug(f"CEM iteration {iteration}: best={costs[index]:.2f} mean={costs.mean():.2f}")

    return PlanStep(action=int(best_seq[0]), cost=best_cost, iteration_costs=iteration_costs,
                    predicted_frame=best_frame)


def normalized_distance(env, state, goal_state, initial_state):
    """
    Summed object-to-goal distance over non-agent objects, divided by its initial value
    """
    def total(s):
        here = np.asarray(env.object_centers_px(s))[1:]
        there = np.asarray(env.object_centers_px(goal_state))[1:]
        return float(np.linalg.norm(here - there, axis=-1).sum())

    initial = total(initial_state)
    if initial == 0.0:
        return 0.0
    return total(state) / initial


def run_episode(env, state0, goal_state, forward_model, cfg, policy=None):
    """
    Model-predictive control loop in the real environment

    Replans with CEM at every step (seed cfg.seed + step), executes the first
    action and stops early once the normalized distance drops below
    EARLY_STOP_DISTANCE.

    Args:
        env: Environment module
        state0: Start state
        goal_state: Goal state, rendered once as the goal frame
        forward_model: LearnedForwardModel or OracleForwardModel
        cfg (CEMConfig): CEM parameters, episode_length bounds the steps
        policy (callable, optional): (context, step) -> action, replacing CEM

    Returns:
        PlanResult
    """
    goal = env.render(goal_state)
    palette = env.palette(state0)
    result = PlanResult()
    state = state0
    frame = env.render(state)
    x_prev = frame
    result.actual_frames.append(frame)
    result.distances.append(normalized_distance(env, state, goal_state, state0))
    if result.distances[-1] < EARLY_STOP_DISTANCE:
        result.termination_reason = 'already_at_goal'
        return result

    result.termination_reason = 'episode_length'
    for step in range(cfg.episode_length):
        context = PlanContext(x_prev=x_prev, x_curr=frame, state=state)
        if policy is None:
            plan = cem_plan_step(context, goal, forward_model, palette, cfg, seed=cfg.seed + step)
        else:
            plan = PlanStep(action=int(policy(context, step)), cost=float('nan'), iteration_costs=[])
        try:
            state = env.step(state, plan.action)
        except DynamicsError as e:
            logger.error(f"Episode stopped at step {step}: {str(e)}")
            result.termination_reason = 'dynamics_error'
            break
        x_prev, frame = frame, env.render(state)
        result.actions.append(plan.action)
        result.predicted_frames.append(plan.predicted_frame if plan.predicted_frame is not None else frame)
        result.actual_frames.append(frame)
        result.distances.append(normalized_distance(env, state, goal_state, state0))
        if result.distances[-1] < EARLY_STOP_DISTANCE:
            result.termination_reason = 'goal_reached'
            break

    logger.info(f"Episode finished after {len(result.actions)} steps ({result.termination_reason}), "
                f"distance {result.final_distance:.3f}")
    return result


def run_random_episode(env, state0, goal_state, cfg, seed=0):
    """Uniform random-action baseline under the same metric"""
    rng = np.random.default_rng(seed)
    return run_episode(env, state0, goal_state, None, cfg,
                       policy=lambda context, step: rng.integers(0, cfg.n_actions))


def save_plan_result(result, out_dir, goal=None):
    """
    Write plan.json plus one predicted|actual PNG pair per executed step

    Returns:
        Path: Path of plan.json
    """
    out_dir = Path(out_dir)
    steps_dir = out_dir / 'steps'
    steps_dir.mkdir(parents=True, exist_ok=True)
    for k, (predicted, actual) in enumerate(zip(result.predicted_frames, result.actual_frames[1:])):
        write_png(side_by_side(predicted, actual), steps_dir / f"step_{k:03d}.png")
    if result.actual_frames:
        write_png(film_strip(result.actual_frames), out_dir / 'actual_strip.png')
    if goal is not None:
        write_png(goal, out_dir / 'goal.png')
    path = out_dir / 'plan.json'
    with open(path, 'w') as f:
        json.dump(result.to_dict(), f, indent=2)
    return path
