import math


TAU = 2 * math.pi

ANGLE_TOLERANCE = 1e-12
"""Angles this close to -pi are folded onto +pi."""

TIME_TOLERANCE = 1e-9
"""Slack in seconds when comparing stream arrival and completion times."""

POINT_FEATURES = 9
"""Augmented per-point feature size: x, y, z, intensity, offsets to the
pillar point mean (3) and offsets to the pillar cell centre (2).
"""

KITTI_POINT_BYTES = 16
"""Size of one velodyne record (4 little-endian float32 values)."""

CHECKPOINT_EXTENSION = 'vtc'
"""Extension to use for model checkpoints."""

CHECKPOINT_VERSION = 1

MANIFEST_VERSION = 1

LOSS_CURVE_NAME = 'loss.tsv'

RESULTS_NAME = 'results.jsonl'

RUN_METADATA_NAME = 'run.yaml'

DEFAULT_CLASS = 'Car'
