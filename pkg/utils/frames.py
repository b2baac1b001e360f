import logging
import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torchvision.utils import make_grid

from config import IMAGE_SIZE
from models import DataIntegrityError, ShapeError

logger = logging.getLogger(__name__)

ASCII_RAMP = " .:-=+*#%@"


def to_model_scale(frame):
    """
    Convert a (128, 128, 3) uint8 frame to a (3, 128, 128) float32 array in [-1, 1]
    """
    frame = np.asarray(frame)
    if frame.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ShapeError(f"Expected a ({IMAGE_SIZE}, {IMAGE_SIZE}, 3) frame, got {frame.shape}")
    return (frame.astype(np.float32).transpose(2, 0, 1) / 127.5) - 1.0


def to_pixels(x):
    """
    Convert model-scale frames back to uint8 HWC

    Args:
        x (torch.Tensor | np.ndarray): (3, H, W) or (B, 3, H, W) in [-1, 1]

    Returns:
        np.ndarray: (H, W, 3) or (B, H, W, 3) uint8
    """
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().float().numpy()
    x = np.clip((np.asarray(x) + 1.0) * 127.5, 0.0, 255.0)
    x = np.rint(x).astype(np.uint8)
    return np.moveaxis(x, -3, -1)


def read_png(path):
    """Read one RGB frame, raising DataIntegrityError naming the file on any failure"""
    path = Path(path)
    try:
        with Image.open(path) as image:
            frame = np.array(image.convert('RGB'), dtype=np.uint8)
    except FileNotFoundError:
        raise DataIntegrityError(path, "frame is missing")
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DataIntegrityError(path, f"frame is corrupt ({str(e)})")
    if frame.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise DataIntegrityError(path, f"unexpected frame shape {frame.shape}")
    return frame


def write_png(frame, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(frame, dtype=np.uint8)).save(path, format='PNG')
    return path


def atomic_write_bytes(path, data):
    """Write through a temp file and rename into place"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'wb') as f:
        f.write(data)
    os.replace(tmp, path)
    return path


def film_strip(frames, padding=2):
    """
    Lay frames side by side in one row

    Args:
        frames (list): (H, W, 3) uint8 frames
        padding (int): Pixels between frames

    Returns:
        np.ndarray: (H + 2p, n * (W + p) + p, 3) uint8 image
    """
    if not frames:
        return np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    tensor = torch.from_numpy(np.stack(frames)).permute(0, 3, 1, 2).float() / 255.0
    grid = make_grid(tensor, nrow=len(frames), padding=padding, pad_value=0.5)
    return (grid.permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)


def side_by_side(left, right):
    return np.concatenate([np.asarray(left), np.asarray(right)], axis=1)


def ascii_preview(frame, width=32, height=16):
    """Luminance preview of a frame for terminals"""
    frame = np.asarray(frame, dtype=np.float32)
    h, w = frame.shape[:2]
    luminance = frame @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    rows = []
    for r in range(height):
        band = luminance[r * h // height:(r + 1) * h // height]
        line = []
        for c in range(width):
            cell = band[:, c * w // width:(c + 1) * w // width]
            level = int(cell.mean() / 256.0 * len(ASCII_RAMP))
            line.append(ASCII_RAMP[min(level, len(ASCII_RAMP) - 1)])
        rows.append(''.join(line))
    return '\n'.join(rows)
