"""
Module with a number of fixed values used throughout program
"""

from collections import namedtuple


MAJOR_VERSION = 1
MINOR_VERSION = 0
PATCH_VERSION = 0

# vehicle pair classes, named follower-lead ("HDV following AV" is HDV-AV)
HDV_HDV = "HDV-HDV"
HDV_AV = "HDV-AV"
AV_HDV = "AV-HDV"
AV_AV = "AV-AV"
PAIR_CLASSES = (AV_HDV, HDV_AV, HDV_HDV)

# feature channels of a window, in storage order
CHANNEL_SPACING = 0
CHANNEL_LEAD_SPEED = 1
CHANNEL_SPEED_DIFF = 2
CHANNEL_NAMES = ("spacing", "lead_speed", "speed_diff")
N_CHANNELS = 3

# sampling
DEFAULT_DT = 0.1
DEFAULT_HISTORY = 1.0
TIME_TOLERANCE = 1e-6
DEFAULT_MAX_SPACING = 50.0

# dataset split tags
SPLIT_TRAIN = 0
SPLIT_VALIDATION = 1
SPLIT_TEST = 2
SPLIT_NAMES = ("train", "validation", "test")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)

# binary formats
WINDOW_MAGIC = b"DCFW1"
WEIGHTS_MAGIC = b"DCFN1"

# activations
ACT_RELU = "relu"
ACT_SIGMOID = "sigmoid"
ACT_IDENTITY = "identity"
ACTIVATIONS = (ACT_RELU, ACT_SIGMOID, ACT_IDENTITY)

# optimizers
OPT_SGD = "sgd"
OPT_ADAM = "adam"

# model names used in reports
MODEL_TEACHER = "LSTM"
MODEL_STUDENT = "MLP"
MODEL_KDNN = "KDNN"
MODEL_GIPPS = "GIPPS"
MODEL_NAMES = (MODEL_GIPPS, MODEL_STUDENT, MODEL_TEACHER, MODEL_KDNN)

# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

# default CSV schema: logical name -> column header
DEFAULT_SCHEMA = {"pair_id": "pair_id",
                  "pair_type": "pair_type",
                  "t": "t",
                  "lead_pos": "lead_pos",
                  "foll_pos": "foll_pos",
                  "lead_speed": "lead_speed",
                  "foll_speed": "foll_speed",
                  "lead_accel": "lead_accel",
                  "foll_accel": "foll_accel"}
REQUIRED_COLUMNS = ("pair_id", "pair_type", "t", "lead_pos", "foll_pos", "lead_speed", "foll_speed")
OPTIONAL_COLUMNS = ("lead_accel", "foll_accel")

# pair counts of the processed open-road reference data set, shown beside ingested counts
REFERENCE_PAIR_COUNTS = {HDV_HDV: 1032, HDV_AV: 274, AV_HDV: 196}

trajectory_point = namedtuple("trajectory_point", ["t", "lead_pos", "foll_pos", "lead_speed", "foll_speed",
                                                   "lead_accel", "foll_accel", "lead_jerk", "foll_jerk", "spacing",
                                                   "speed_diff"])

window_tuple = namedtuple("window_tuple", ["features", "target", "pair_id", "pair_class", "t", "split"])

group_summary = namedtuple("group_summary", ["pair_class", "bin", "n", "mean", "std", "skewness", "kurtosis"])

anova_result = namedtuple("anova_result", ["f", "p", "df_between", "df_within"])

epoch_log = namedtuple("epoch_log", ["epoch", "train_loss", "student_loss", "distill_loss", "val_loss", "val_rmse"])

rollout_result = namedtuple("rollout_result", ["t", "foll_pos", "foll_speed", "spacing", "speed_diff", "ttc",
                                               "running_min_ttc", "min_ttc", "collision"])

metering_result = namedtuple("metering_result", ["model", "batch", "repetitions", "median_seconds", "iqr_seconds",
                                                 "seconds_per_10k", "multiply_adds", "peak_rss_kb"])


def version_str() -> str:
    return "KDFollow {}.{}.{}".format(MAJOR_VERSION, MINOR_VERSION, PATCH_VERSION)
