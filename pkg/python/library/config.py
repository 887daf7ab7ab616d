# /*****************************************************************************
# * | File        :   config.py
# * | Function    :   Toolkit-wide constants and defaults
# * | Info        :   Everything tunable lives here as a module-level constant;
# * |                 run-specific values come from JSON manifests instead.
# ******************************************************************************

import os
import logging

import numpy as np


TOOLKIT_NAME    = "epochvote"
TOOLKIT_VERSION = "1.0.0"

# Logging
LOG_LEVEL = os.environ.get("EPOCHVOTE_LOG_LEVEL", "WARNING").upper()
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# LogFile binary format
LOG_MAGIC          = b"EPLG"
LOG_FORMAT_VERSION = 1
LOG_FLAG_HAS_SOFT  = 0x0001

# Versioned output schemas
CSV_SCHEMA_VERSION  = 1
JSON_SCHEMA_VERSION = 1

# Exit codes
EXIT_OK         = 0
EXIT_USAGE      = 1
EXIT_INPUT      = 2
EXIT_CAPABILITY = 3
EXIT_DIVERGENCE = 4

# Numerical tolerances
SOFT_SUM_TOLERANCE          = 1e-5
AGREEMENT_ROW_TOLERANCE     = 1e-9
DISAGREEMENT_FORM_TOLERANCE = 1e-10

# Toy trainer defaults (toy-scale mirror of the usual DenseNet protocol)
DEFAULT_BATCH_SIZE    = 32
DEFAULT_LEARNING_RATE = 0.01
DEFAULT_MOMENTUM      = 0.9
DEFAULT_WEIGHT_DECAY  = 5e-4

# Theory simulator defaults
DEFAULT_ENSEMBLE_SIZE = 64
INIT_SCALE_FACTOR     = 0.1    # init std is INIT_SCALE_FACTOR / sqrt(d)
MU_FIT_RANGE          = (1e-4, 1e-2)
MU_FIT_POINTS         = 9
QUADRATIC_SLOPE_BAND  = (1.9, 2.1)
REGIME_C_PRIME_RATIO  = 0.05   # |C'| <= ratio * |C''| counts as C' ~ 0
LEMMA2_ENVELOPE_FACTOR = 3.0
OVERFIT_SEARCH_TRIES  = 64
OVERFIT_RISE_STEPS    = 10     # strictly rising steps required right after the test-error minimum
OVERFIT_MIN_RISE      = 0.01
TEST_DESIGN_SCALES    = (0.5, 2.0)   # per-axis spread of engineered test inputs

# Plotting
CHART_WIDTH  = 640
CHART_HEIGHT = 400
CHART_MARGIN = 48
CHART_COLORS = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd",
                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
HISTOGRAM_BINS = 20


def configure_logging(verbose=False):
    """Configure root logging once, to stderr."""
    level = logging.DEBUG if verbose else getattr(logging, LOG_LEVEL, logging.WARNING)
    logging.basicConfig(level=level, format=LOG_FORMAT)


def make_generator(seed, stream=None):
    """Portable PCG64 generator; `stream` selects an independent child stream."""
    if stream is None:
        sequence = np.random.SeedSequence(int(seed))
    else:
        sequence = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(sequence))
