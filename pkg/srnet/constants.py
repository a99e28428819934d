"""
This module contains some constants that can be reused

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

__version__ = "0.3.0"
__license__ = "MIT"
__name__ = "srnet"
__copyright__ = "srnet-lite authors, 2024-present"
__author__ = "srnet-lite authors"

# Numerical contract
DTYPE = "float64"
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LOG_CLAMP = 1e-12
DELTA_CLAMP = (0.05, 0.95)

# Training recipe defaults
DEFAULT_LR = 0.01
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 0.0005
DEFAULT_INPUT_SIZE = 320
DESK_INPUT_SIZE = 64
DESK_WIDTH_DIVISOR = 16
DEFAULT_EPOCHS = 10
DEFAULT_BATCH_SIZE = 4
DEFAULT_VAL_FRACTION = 0.2

# Evaluation defaults
DEFAULT_N_THRESHOLDS = 256
DEFAULT_BETA_SQUARED = 0.3

# Architecture defaults
FUSED_CHANNELS = 128
DEFAULT_STAGE_CHANNELS = (64, 48, 32)
DEFAULT_STAGE_DILATIONS = (2, 2, 1)
RESNET_UNITS = (1, 1, 2)
VGG_UNITS = (3, 7, 3)
DEFAULT_GROUP_COUNT = 4
DEFAULT_SHUFFLE_GROUPS = 4

# Gradient check tolerance
GRADCHECK_TOLERANCE = 1e-4

# Checkpoint codec
CHECKPOINT_MAGIC = b"SRNC"
CHECKPOINT_VERSION = 1

# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
