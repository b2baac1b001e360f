import json
import logging
from pathlib import Path

import numpy as np
import torch

from config import ACTIONS
from models import ActionTable, CoverageError, DataIntegrityError, UnknownActionError

logger = logging.getLogger(__name__)


@torch.no_grad()
def build_table(demos, model, checkpoint_id='', action_ids=tuple(ACTIONS)):
    """
    Build the action-transformation table from labelled demonstrations

    Each entry is the element-wise mean, over the demonstrations of that
    action, of the motion the trained motion encoder assigns to map 0.

    Args:
        demos (list): (x_t, x_next, action_id) with model-scale frames
        model (WorldModel): Trained model
        checkpoint_id (str): Id of the checkpoint the table belongs to
        action_ids (iterable): Action space that must be covered

    Returns:
        ActionTable: One entry per action id

    Raises:
        CoverageError: If an action id has no demonstration
    """
    by_action = {int(a): [] for a in action_ids}
    for x_t, x_next, action in demos:
        if int(action) not in by_action:
            raise CoverageError(f"Demonstration labelled with unknown action {action}")
        by_action[int(action)].append((x_t, x_next))
    missing = [a for a, pairs in by_action.items() if not pairs]
    if missing:
        raise CoverageError(f"No demonstrations for actions {missing}")

    model.eval()
    device = next(model.parameters()).device
    entries = {}
    counts = {}
    for action, pairs in sorted(by_action.items()):
        x_t = torch.stack([torch.as_tensor(p[0]) for p in pairs]).to(device)
        x_next = torch.stack([torch.as_tensor(p[1]) for p in pairs]).to(device)
        motion = model.encode_motion(x_t, x_next)[:, 0]
        entries[action] = motion.flatten(1).double().mean(dim=0).cpu().tolist()
        counts[action] = len(pairs)

    per_action = min(counts.values())
    table = ActionTable(entries=entries, counts=counts, checkpoint_id=checkpoint_id,
                        per_action=per_action, use_stn=model.config.use_stn)
    logger.info(f"Built action table with {len(table)} entries from {sum(counts.values())} demonstrations")
    return table


def lookup(table, action_id):
    """
    Stored transform of an action

    Returns:
        torch.Tensor: (2, 3) affine matrix, or (k, k) kernel for the cross-convolution ablation

    Raises:
        UnknownActionError: If the action is not in the table
    """
    try:
        values = table.entries[int(action_id)]
    except (KeyError, TypeError, ValueError):
        raise UnknownActionError(f"Action {action_id!r} is not in the table")
    tensor = torch.tensor(values, dtype=torch.float32)
    if table.use_stn:
        return tensor.view(2, 3)
    k = int(round(len(values) ** 0.5))
    return tensor.view(k, k)


def lookup_batch(table, action_ids):
    """Stack lookups for a sequence of action ids"""
    return torch.stack([lookup(table, a) for a in action_ids])


def nearest_action(table, motion):
    """Action whose entry is closest in L2 over the flattened transform values"""
    motion = np.asarray(torch.as_tensor(motion).detach().cpu().flatten(), dtype=np.float64)
    best, best_distance = None, np.inf
    for action in sorted(table.entries):
        distance = float(np.linalg.norm(np.asarray(table.entries[action]) - motion))
        if distance < best_distance:
            best, best_distance = action, distance
    return best


def save_table(table, path):
    """Persist as {action_id: [values], checkpoint_id, per_action}"""
    data = {str(action): list(values) for action, values in sorted(table.entries.items())}
    data['checkpoint_id'] = table.checkpoint_id
    data['per_action'] = table.per_action
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(data, f, indent=2)
    return path


def load_table(path):
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise DataIntegrityError(path, "action table is missing")
    entries = {int(key): [float(v) for v in value] for key, value in data.items() if key.isdigit()}
    if not entries:
        raise DataIntegrityError(path, "action table has no entries")
    sizes = {len(v) for v in entries.values()}
    if len(sizes) != 1:
        raise DataIntegrityError(path, "action table entries differ in size")
    per_action = int(data.get('per_action', 1))
    return ActionTable(
        entries=entries,
        counts={action: per_action for action in entries},
        checkpoint_id=data.get('checkpoint_id', ''),
        per_action=per_action,
        use_stn=sizes.pop() == 6,
    )
