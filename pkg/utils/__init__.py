# Import utility functions for easier access
from .environments import get_environment, make_task
from .dataset import generate, load_manifest, load_triplets, sample_demonstrations
from .worldmodel import WorldModel, spatial_transform, save_checkpoint, load_checkpoint
from .training import compute_loss, train
from .actionmap import build_table, lookup, save_table, load_table
from .planner import (
    locate_objects,
    cost,
    cem_plan_step,
    run_episode,
    run_random_episode,
    LearnedForwardModel,
    OracleForwardModel,
)
from .evaluation import (
    mse_255,
    pos_err,
    evaluate_model,
    rollout,
    viz_agent_map,
    summarize_episodes,
    compare_reports,
)
