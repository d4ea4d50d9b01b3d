"""Shared defaults for the HEAR pipeline."""

# Signal processing
DEFAULT_SAMPLE_RATE = 200.0
DEFAULT_LOW_FREQ = 1.0
DEFAULT_HIGH_FREQ = 75.0
DEFAULT_AMPLITUDE_SCALE = 0.01  # microvolts -> units of 100 uV
NYQUIST_MARGIN = 0.999
DEFAULT_WINDOW_LEN = 200

# Model
DEFAULT_HIDDEN_DIM = 64
DEFAULT_CODEBOOK_SIZE = 2048
DEFAULT_MAX_TIME_PATCHES = 16
VARIANT_PRESETS = {
    'tiny': {'num_layers': 6, 'num_heads': 4},
    'base': {'num_layers': 12, 'num_heads': 8},
}
COORDINATE_SCALE = 10.0
BIAS_HIDDEN_DIM = 32
INIT_STD = 0.02

# Pretraining
DEFAULT_MASK_RATIO = 0.5
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_WEIGHT_DECAY = 0.05
SPECTRUM_RELATIVE_EPS = 1e-5
SPECTRUM_ABSOLUTE_EPS = 1e-12

# Scheduling
DEFAULT_BATCH_SIZE = 16
DEFAULT_PREFETCH_DEPTH = 2

# Evaluation
DEFAULT_SEEDS = (0, 1, 2)
SPLIT_RATIOS = (3, 1, 1)

# Gradient checks
GRADCHECK_STEP = 1e-5
GRADCHECK_FLOOR = 1e-3
GRADCHECK_TOLERANCE = 1e-4
