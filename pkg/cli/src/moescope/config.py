"""
Stores most of the configurable variables for moescope for ease of access.

Typed run configuration (model shape, router, training schedule, data
mixture) lives in dataclasses next to the code that uses them; this module
only holds the defaults those dataclasses fall back to, plus a few things
the command line needs (exit codes, environment variable names).
"""

# Every tensor in the library is 64-bit. Finite-difference checks rely on it.
FLOAT_DTYPE = "float64"

# Label value for positions that do not contribute to the loss (inputs of
# UL2 examples, padding).
IGNORE_INDEX = -100

# Byte-level tokenizer layout: pad, eos, then the mask sentinels, then the
# 256 byte values.
PAD_ID = 0
EOS_ID = 1
NUM_SENTINELS = 32
FIRST_SENTINEL_ID = 2
NUM_SPECIAL_TOKENS = FIRST_SENTINEL_ID + NUM_SENTINELS
BYTE_VOCAB_SIZE = NUM_SPECIAL_TOKENS + 256

# Router defaults. K=2 as in ST-MoE.
DEFAULT_TOP_K = 2
DEFAULT_CAPACITY_FACTOR = 1.25
ROPE_BASE = 10000.0
LAYER_NORM_EPS = 1e-5
INIT_STD = 0.02

# Training hyper-parameters (peak lr and loss weights as used for the
# full-size models; warmup is scaled down for desk-sized runs).
DEFAULT_PEAK_LR = 0.01
DEFAULT_WARMUP_STEPS = 100
DEFAULT_W_BALANCE = 0.01
DEFAULT_W_Z_LOGITS = 0.001
DEFAULT_W_Z_ROUTER = 0.0001
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-9
GRAD_CLIP_NORM = 1.0

# UL2 mixture-of-denoisers: (kind, mean span, mask ratio, weight)
UL2_DENOISERS = [
    ("prefix_lm", None, 0.5, 0.5),
    ("span_corrupt", 3.0, 0.15, 0.1),
    ("span_corrupt", 8.0, 0.15, 0.1),
    ("span_corrupt", 3.0, 0.5, 0.1),
    ("span_corrupt", 8.0, 0.5, 0.1),
    ("span_corrupt", 64.0, 0.5, 0.1),
]
CAUSAL_LM_DENOISERS = [("causal_lm", None, None, 1.0)]

# Analysis defaults
DEFAULT_STD_MIN_SUPPORT = 128
DEFAULT_OVERLAP_MIN_SUPPORT = 8
DEFAULT_TOP_TOKENS = 10
DEFAULT_DROP_BUCKET_SIZE = 8
# Visualizations default to the third MoE layer.
DEFAULT_TRACE_MOE_ORDINAL = 3

# Checkpoint binary layout
CHECKPOINT_MAGIC = b"OMOE"
CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_SUFFIX = ".omoe"

METRICS_FILE_NAME = "metrics.csv"
EVAL_FILE_NAME = "eval.csv"
EFFECTIVE_CONFIG_FILE_NAME = "effective-config.json"

# Corpus file header, e.g. "#domain:code"
CORPUS_HEADER_PREFIX = "#domain:"

# Exit codes for the command line interface
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3
EXIT_NUMERIC_ERROR = 4

# Environment variable overrides (the only ones honoured)
ENV_OUT_DIR = "MOESCOPE_OUT_DIR"
ENV_THREADS = "MOESCOPE_THREADS"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
