import os

# Runtime settings
WORKDIR = os.environ.get("STN_WORKDIR", ".")
DEVICE = os.environ.get("STN_DEVICE", "auto")  # auto, cpu, cuda, cuda:N
LOG_LEVEL = os.environ.get("STN_LOG_LEVEL", "INFO")
DETERMINISTIC = os.environ.get("STN_DETERMINISTIC", "1") == "1"
NUM_WORKERS = int(os.environ.get("STN_NUM_WORKERS", 0))

VERSION = "0.1.0"
FORMAT_VERSION = 1
IMAGE_SIZE = 128

# Discrete action space shared by both environments
ACTIONS = {0: 'left', 1: 'right', 2: 'up', 3: 'down'}
ACTION_KEYS = {
    'a': 0, 'h': 0,
    'd': 1, 'l': 1,
    'w': 2, 'k': 2,
    's': 3, 'j': 3,
}

# Grid world geometry: 24 px cells inside a 120 px playfield with 4 px margins
GRID_SIZE = 5
CELL_PX = 24
GRID_MARGIN_PX = 4
TRAJECTORY_LENGTH = 32

# (shape, RGB) per object; index 0 is the agent
GRID_OBJECTS = [
    ('square', (0, 200, 0)),
    ('circle', (220, 30, 30)),
    ('triangle', (40, 60, 230)),
    ('diamond', (230, 200, 20)),
    ('cross', (200, 40, 220)),
]

# Continuous pusher table
PUSHER_STEP_PX = 8.0
PUSHER_DISC_RADIUS_PX = 10.0
PUSHER_SETTLE_ITERATIONS = 50
# Bisection halvings when a push cannot settle and the agent backs off
PUSHER_BACKOFF_STEPS = 12
PUSHER_OVERLAP_TOLERANCE = 1e-6
PUSHER_COLORS = [
    (0, 200, 0),
    (220, 30, 30),
    (40, 60, 230),
    (230, 200, 20),
    (200, 40, 220),
]

DATASET_CONFIG = {
    'test_every': 10,  # one trajectory in ten goes to the test split
    'shuffle_seed': 0,
}

MODEL_CONFIG = {
    'n_maps': 8,
    'image_size': IMAGE_SIZE,
    'map_size': 64,
    'translation_only': True,
    'use_stn': True,
    'leaky_slope': 0.2,
    'encoder_channels': [32, 32, 64, 64, 128, 128, 8],
    'encoder_strides': [2, 1, 2, 1, 1, 1, 1],
    'encoder_upsample_before': [7],
    'motion_channels': [32, 32, 64, 64, 128, 128, 128],
    'motion_strides': [2, 1, 2, 1, 2, 1, 2],
    'motion_hidden': 512,
    'decoder_channels': [64, 64, 32, 32, 3],
    'decoder_upsample_before': [3],
    'interaction_channels': [32, 64, 128, 128, 256],
    'cross_conv_kernel': 9,
}

TRAINING_CONFIG = {
    'learning_rate': 1e-3,
    'betas': [0.9, 0.999],
    'epochs': 10,
    'batch_size': 32,
    'max_triplets': 2000,
    'grad_clip_norm': 10.0,
    'seed': 0,
}

PAPER_SCALE_TRAINING = {
    'epochs': 50,
    'max_triplets': None,
}

CEM_CONFIG = {
    'episode_length': 100,
    'samples': 50,
    'horizon': 5,
    'iterations': 4,
    'elite_fraction': 0.2,
    'seed': 0,
}

# Color-blob localization used by the planner cost and pos_err
LOCATOR_CONFIG = {
    'color_threshold': 60.0,
    'min_pixels': 10,
}
MISSING_OBJECT_PENALTY_PX = 128.0
EARLY_STOP_DISTANCE = 0.05
