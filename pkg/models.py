from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from config import (
    ACTIONS,
    CEM_CONFIG,
    FORMAT_VERSION,
    GRID_SIZE,
    MODEL_CONFIG,
)


# Errors

class WorldModelError(Exception):
    """Base class for every error raised by this package"""


class InvalidActionError(WorldModelError, ValueError):
    pass


class InvalidStateError(WorldModelError, ValueError):
    pass


class DynamicsError(WorldModelError):
    """Raised when the pusher settle loop does not converge"""


class DataIntegrityError(WorldModelError):
    def __init__(self, path, reason):
        self.path = Path(path)
        super().__init__(f"{self.path}: {reason}")


class CoverageError(WorldModelError):
    pass


class ShapeError(WorldModelError, ValueError):
    pass


class NumericalError(WorldModelError):
    pass


class TrainingAbortedError(WorldModelError):
    def __init__(self, message, last_checkpoint=None):
        self.last_checkpoint = last_checkpoint
        super().__init__(message)


class InvalidGoalError(WorldModelError, ValueError):
    pass


class UnknownActionError(WorldModelError, KeyError):
    pass


class ConfigError(WorldModelError, ValueError):
    pass


def validate_action(action):
    """Return the action id as int, raising InvalidActionError when it is not in the action space"""
    if isinstance(action, bool) or not isinstance(action, (int, np.integer)):
        raise InvalidActionError(f"Invalid action: {action!r}")
    if int(action) not in ACTIONS:
        raise InvalidActionError(f"Invalid action id: {action!r}")
    return int(action)


# Environment states

@dataclass(frozen=True)
class GridState:
    positions: tuple  # ((row, col), ...) with index 0 the agent
    object_specs: tuple  # ((shape, (r, g, b)), ...)
    grid_size: int = GRID_SIZE

    def __post_init__(self):
        object.__setattr__(self, 'positions', tuple(tuple(int(v) for v in p) for p in self.positions))
        object.__setattr__(self, 'object_specs', tuple((s, tuple(c)) for s, c in self.object_specs))

    def validate(self):
        if len(self.positions) != len(self.object_specs):
            raise InvalidStateError("positions and object_specs differ in length")
        for row, col in self.positions:
            if not (0 <= row < self.grid_size and 0 <= col < self.grid_size):
                raise InvalidStateError(f"Object at ({row}, {col}) lies outside the board")
        if len(set(self.positions)) != len(self.positions):
            raise InvalidStateError("Two objects occupy the same cell")
        return self

    @property
    def colors(self):
        return [color for _, color in self.object_specs]

    def to_dict(self):
        return {
            'positions': [list(p) for p in self.positions],
            'object_specs': [[shape, list(color)] for shape, color in self.object_specs],
            'grid_size': self.grid_size,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(positions=data['positions'], object_specs=data['object_specs'], grid_size=data['grid_size'])

    def __repr__(self):
        return f'<GridState {list(self.positions)}>'


@dataclass(frozen=True)
class PusherState:
    positions: tuple  # ((x, y), ...) pixel coordinates, index 0 the agent disc
    radii: tuple
    colors: tuple

    def __post_init__(self):
        object.__setattr__(self, 'positions', tuple((float(x), float(y)) for x, y in self.positions))
        object.__setattr__(self, 'radii', tuple(float(r) for r in self.radii))
        object.__setattr__(self, 'colors', tuple(tuple(c) for c in self.colors))

    def to_dict(self):
        return {
            'positions': [list(p) for p in self.positions],
            'radii': list(self.radii),
            'colors': [list(c) for c in self.colors],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(positions=data['positions'], radii=data['radii'], colors=data['colors'])

    def __repr__(self):
        return f'<PusherState {[(round(x, 2), round(y, 2)) for x, y in self.positions]}>'


@dataclass
class Trajectory:
    frames: np.ndarray  # (T, 128, 128, 3) uint8
    states: list
    actions: list

    @property
    def triplet_count(self):
        return max(0, len(self.frames) - 2)


# Datasets

@dataclass
class Triplet:
    x_prev: np.ndarray  # (3, 128, 128) float32 in [-1, 1]
    x_curr: np.ndarray
    x_next: np.ndarray
    action_id: Optional[int] = None


MANIFEST_KEYS = ('env_name', 'trajectory_count', 'frames_per_trajectory', 'split', 'seed', 'format_version')


@dataclass
class DatasetManifest:
    env_name: str
    trajectory_count: int
    frames_per_trajectory: int
    split: str
    seed: int
    format_version: int = FORMAT_VERSION
    root: Optional[Path] = field(default=None, compare=False)

    @property
    def triplet_count(self):
        return self.trajectory_count * (self.frames_per_trajectory - 2)

    @property
    def dataset_id(self):
        return f"{self.env_name}-s{self.seed}-{self.split}"

    def to_dict(self):
        return {key: getattr(self, key) for key in MANIFEST_KEYS}

    @classmethod
    def from_dict(cls, data, root=None):
        missing = [key for key in MANIFEST_KEYS if key not in data]
        if missing:
            raise DataIntegrityError(root or 'manifest.json', f"missing manifest keys {missing}")
        return cls(root=Path(root) if root else None, **{key: data[key] for key in MANIFEST_KEYS})

    def __repr__(self):
        return f'<DatasetManifest {self.dataset_id} trajectories={self.trajectory_count}>'


# World model

@dataclass
class ModelConfig:
    n_maps: int = MODEL_CONFIG['n_maps']
    image_size: int = MODEL_CONFIG['image_size']
    map_size: int = MODEL_CONFIG['map_size']
    translation_only: bool = MODEL_CONFIG['translation_only']
    use_stn: bool = MODEL_CONFIG['use_stn']
    leaky_slope: float = MODEL_CONFIG['leaky_slope']
    encoder_channels: list = field(default_factory=lambda: list(MODEL_CONFIG['encoder_channels']))
    encoder_strides: list = field(default_factory=lambda: list(MODEL_CONFIG['encoder_strides']))
    encoder_upsample_before: list = field(default_factory=lambda: list(MODEL_CONFIG['encoder_upsample_before']))
    motion_channels: list = field(default_factory=lambda: list(MODEL_CONFIG['motion_channels']))
    motion_strides: list = field(default_factory=lambda: list(MODEL_CONFIG['motion_strides']))
    motion_hidden: int = MODEL_CONFIG['motion_hidden']
    decoder_channels: list = field(default_factory=lambda: list(MODEL_CONFIG['decoder_channels']))
    decoder_upsample_before: list = field(default_factory=lambda: list(MODEL_CONFIG['decoder_upsample_before']))
    interaction_channels: list = field(default_factory=lambda: list(MODEL_CONFIG['interaction_channels']))
    cross_conv_kernel: int = MODEL_CONFIG['cross_conv_kernel']

    def __post_init__(self):
        self.validate()

    def validate(self):
        counts = [self.n_maps, self.image_size, self.map_size, self.motion_hidden, self.cross_conv_kernel]
        if any(int(c) <= 0 for c in counts):
            raise ConfigError("ModelConfig counts must be positive")
        if len(self.encoder_channels) != 7 or len(self.encoder_strides) != 7:
            raise ConfigError("Image encoder must have 7 convolutional layers")
        if len(self.motion_channels) != 7 or len(self.motion_strides) != 7:
            raise ConfigError("Motion encoder must have 7 convolutional layers")
        if len(self.decoder_channels) != 5:
            raise ConfigError("Image decoder must have 5 convolutional layers")
        if len(self.interaction_channels) != 5:
            raise ConfigError("Interaction learner must have 5 convolutional layers")
        if self.encoder_channels[-1] != self.n_maps:
            raise ConfigError("Last image encoder layer must emit n_maps channels")
        if self.decoder_channels[-1] != 3:
            raise ConfigError("Image decoder must emit 3 channels")
        if self.cross_conv_kernel % 2 == 0:
            raise ConfigError("cross_conv_kernel must be odd")
        return self

    @property
    def motion_params(self):
        """Number of values the motion encoder emits per map"""
        if not self.use_stn:
            return self.cross_conv_kernel ** 2
        return 2 if self.translation_only else 6

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ActionTable:
    entries: dict  # action id -> flat list of transform values
    counts: dict
    checkpoint_id: str
    per_action: int
    use_stn: bool = True

    def __len__(self):
        return len(self.entries)

    def __repr__(self):
        return f'<ActionTable {sorted(self.entries)} from {self.checkpoint_id}>'


# Planning

@dataclass
class CEMConfig:
    episode_length: int = CEM_CONFIG['episode_length']
    samples: int = CEM_CONFIG['samples']
    horizon: int = CEM_CONFIG['horizon']
    iterations: int = CEM_CONFIG['iterations']
    elite_fraction: float = CEM_CONFIG['elite_fraction']
    seed: int = CEM_CONFIG['seed']
    n_actions: int = len(ACTIONS)

    def __post_init__(self):
        if self.samples < 2:
            raise ConfigError("CEM needs at least 2 samples")
        if not 1 <= self.horizon <= self.episode_length:
            raise ConfigError("CEM horizon must lie in [1, episode_length]")
        if self.iterations < 1:
            raise ConfigError("CEM needs at least 1 iteration")
        if not 0.0 < self.elite_fraction <= 1.0:
            raise ConfigError("elite_fraction must lie in (0, 1]")

    @property
    def n_elite(self):
        return max(1, int(round(self.elite_fraction * self.samples)))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown CEM config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class PlanStep:
    action: int
    cost: float
    iteration_costs: list
    predicted_frame: Optional[np.ndarray] = None


@dataclass
class PlanResult:
    actions: list = field(default_factory=list)
    distances: list = field(default_factory=list)  # normalized distance per visited state
    predicted_frames: list = field(default_factory=list)  # one per executed action
    actual_frames: list = field(default_factory=list)  # initial frame plus one per action
    termination_reason: str = ''

    @property
    def final_distance(self):
        return self.distances[-1] if self.distances else float('nan')

    def to_dict(self):
        return {
            'actions': [int(a) for a in self.actions],
            'distances': [float(d) for d in self.distances],
            'final_distance': float(self.final_distance),
            'steps': len(self.actions),
            'termination_reason': self.termination_reason,
        }
