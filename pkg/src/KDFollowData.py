"""
Module describing the trajectory containers and the steps which turn raw lead/follower trajectories into
supervised training windows: ingestion, kinematic derivation, spacing filter, windowing, normalization,
splitting and persistence
"""

import logging
import os
import struct
from typing import Optional

import numpy
import pandas

import KDFollowConstants
from KDFollowConstants import trajectory_point, window_tuple
from KDFollowLanguage import get_text
from KDFollowMessages import ConfigError, DataError
from KDFollowUtils import create_output_table, format_number

LOG = logging.getLogger(__name__)

WINDOW_HEADER = struct.Struct("<ddIIQ")  # dt, history, channels, steps, window count


class TrajectoryPair:
    """
    a lead/follower pair stored column-wise; each attribute is a numpy array over time
    """
    def __init__(self, pair_id: str, pair_class: str, t, lead_pos, foll_pos, lead_speed, foll_speed,
                 lead_accel=None, foll_accel=None, dt: float = KDFollowConstants.DEFAULT_DT, segment: int = 0):
        self.pair_id = str(pair_id)
        self.pair_class = pair_class
        self.dt = dt
        self.segment = segment
        self.t = numpy.asarray(t, dtype=float)
        self.lead_pos = numpy.asarray(lead_pos, dtype=float)
        self.foll_pos = numpy.asarray(foll_pos, dtype=float)
        self.lead_speed = numpy.asarray(lead_speed, dtype=float)
        self.foll_speed = numpy.asarray(foll_speed, dtype=float)
        self.lead_accel = None if lead_accel is None else numpy.asarray(lead_accel, dtype=float)
        self.foll_accel = None if foll_accel is None else numpy.asarray(foll_accel, dtype=float)
        self.lead_jerk = None
        self.foll_jerk = None
        self.spacing = self.lead_pos - self.foll_pos
        self.speed_diff = self.foll_speed - self.lead_speed

    def __len__(self) -> int:
        return len(self.t)

    def n_points(self) -> int:
        return len(self.t)

    def label(self) -> str:
        if self.segment == 0:
            return self.pair_id
        return "{}#{}".format(self.pair_id, self.segment)

    def has_kinematics(self) -> bool:
        return (self.lead_accel is not None) and (self.foll_accel is not None) and (self.lead_jerk is not None)

    def point(self, i: int) -> trajectory_point:
        def value(x):
            return None if x is None else float(x[i])
        return trajectory_point(float(self.t[i]), float(self.lead_pos[i]), float(self.foll_pos[i]),
                                float(self.lead_speed[i]), float(self.foll_speed[i]), value(self.lead_accel),
                                value(self.foll_accel), value(self.lead_jerk), value(self.foll_jerk),
                                float(self.spacing[i]), float(self.speed_diff[i]))

    def points(self) -> list:
        return [self.point(i) for i in range(len(self))]

    def subset(self, start: int, stop: int, segment: int) -> "TrajectoryPair":
        """
        return the contiguous slice [start, stop) of the pair as a new segment
        """
        def cut(x):
            return None if x is None else x[start:stop].copy()
        new_pair = TrajectoryPair(self.pair_id, self.pair_class, cut(self.t), cut(self.lead_pos), cut(self.foll_pos),
                                  cut(self.lead_speed), cut(self.foll_speed), cut(self.lead_accel),
                                  cut(self.foll_accel), dt=self.dt, segment=segment)
        new_pair.lead_jerk = cut(self.lead_jerk)
        new_pair.foll_jerk = cut(self.foll_jerk)
        return new_pair


class WindowSet:
    """
    a columnar collection of training windows

    features has shape (N, steps, 3), channels ordered spacing, lead speed, speed difference; targets are the
    follower speed one step after the last feature step, whose timestamp is kept in times
    """
    def __init__(self, features, targets, times, pair_ids, pair_classes, splits=None,
                 dt: float = KDFollowConstants.DEFAULT_DT, history: float = KDFollowConstants.DEFAULT_HISTORY):
        self.features = numpy.asarray(features, dtype=float)
        self.targets = numpy.asarray(targets, dtype=float)
        self.times = numpy.asarray(times, dtype=float)
        self.pair_ids = numpy.asarray(pair_ids, dtype=object)
        self.pair_classes = numpy.asarray(pair_classes, dtype=object)
        if splits is None:
            splits = numpy.full(len(self.targets), -1, dtype=int)
        self.splits = numpy.asarray(splits, dtype=int)
        self.dt = dt
        self.history = history

    def __len__(self) -> int:
        return len(self.targets)

    def __getitem__(self, i: int) -> window_tuple:
        split = None if self.splits[i] < 0 else int(self.splits[i])
        return window_tuple(self.features[i], float(self.targets[i]), self.pair_ids[i], self.pair_classes[i],
                            float(self.times[i]), split)

    def steps(self) -> int:
        return history_steps(self.history, self.dt)

    def flat_features(self) -> numpy.ndarray:
        return self.features.reshape(len(self), -1)

    def select(self, index) -> "WindowSet":
        """
        return a new set containing the windows chosen by a boolean mask or index array
        """
        return WindowSet(self.features[index], self.targets[index], self.times[index], self.pair_ids[index],
                         self.pair_classes[index], self.splits[index], self.dt, self.history)

    def split_subset(self, split: int) -> "WindowSet":
        return self.select(self.splits == split)

    def class_subset(self, pair_class: str) -> "WindowSet":
        return self.select(self.pair_classes == pair_class)

    def pair_subset(self, pair_id: str) -> "WindowSet":
        return self.select(self.pair_ids == pair_id)

    def pair_id_list(self) -> list:
        return sorted(set(self.pair_ids))

    def class_of_pair(self) -> dict:
        return {p: c for p, c in zip(self.pair_ids, self.pair_classes)}


class Normalizer:
    """
    min-max scaling of each feature channel and of the target to [0, 1]
    """
    def __init__(self, feature_min, feature_max, target_min: float, target_max: float):
        self.feature_min = numpy.asarray(feature_min, dtype=float)
        self.feature_max = numpy.asarray(feature_max, dtype=float)
        self.target_min = float(target_min)
        self.target_max = float(target_max)

    def apply_features(self, features: numpy.ndarray) -> numpy.ndarray:
        return (features - self.feature_min) / (self.feature_max - self.feature_min)

    def invert_features(self, scaled: numpy.ndarray) -> numpy.ndarray:
        return scaled * (self.feature_max - self.feature_min) + self.feature_min

    def apply_target(self, target):
        return (target - self.target_min) / (self.target_max - self.target_min)

    def invert_target(self, scaled):
        return scaled * (self.target_max - self.target_min) + self.target_min

    def export_to_list(self) -> list:
        outlist = []
        for c, name in enumerate(KDFollowConstants.CHANNEL_NAMES):
            outlist.append("norm.{} = {!r},{!r}".format(name, float(self.feature_min[c]),
                                                        float(self.feature_max[c])))
        outlist.append("norm.target = {!r},{!r}".format(self.target_min, self.target_max))
        return outlist

    @staticmethod
    def import_from_dict(values: dict) -> "Normalizer":
        feature_min = []
        feature_max = []
        for name in KDFollowConstants.CHANNEL_NAMES:
            low, high = values["norm." + name].split(",")
            feature_min.append(float(low))
            feature_max.append(float(high))
        low, high = values["norm.target"].split(",")
        return Normalizer(feature_min, feature_max, float(low), float(high))


class DatasetSplit:
    def __init__(self, windows: WindowSet, assignment: dict, seed: int):
        self.windows = windows
        self.assignment = assignment  # pair_id -> split tag
        self.seed = seed
        self.train = windows.split_subset(KDFollowConstants.SPLIT_TRAIN)
        self.validation = windows.split_subset(KDFollowConstants.SPLIT_VALIDATION)
        self.test = windows.split_subset(KDFollowConstants.SPLIT_TEST)

    def pairs_in(self, split: int) -> list:
        return sorted(p for p, s in self.assignment.items() if s == split)


# ---------- ingestion ----------
def check_pair_class(value: str, line: int) -> str:
    value = value.strip()
    if value == KDFollowConstants.AV_AV:
        raise DataError("line {}: pair class {} is not supported".format(line, value))
    if value not in KDFollowConstants.PAIR_CLASSES:
        raise DataError("line {}: malformed row, unknown pair class '{}'".format(line, value))
    return value


def load_pairs(path: str, schema: Optional[dict] = None, dt: float = KDFollowConstants.DEFAULT_DT,
               output_blocks: Optional[list] = None) -> list:
    """
    read lead/follower trajectories from a CSV file

    schema maps logical column names (pair_id, pair_type, t, lead_pos, foll_pos, lead_speed, foll_speed, and the
    optional lead_accel and foll_accel) to the headers used in the file
    """
    if schema is None:
        schema = dict(KDFollowConstants.DEFAULT_SCHEMA)
    if not os.path.isfile(path):
        raise DataError(get_text("artifact_missing").format(path))
    try:
        frame = pandas.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except (pandas.errors.ParserError, pandas.errors.EmptyDataError) as error:
        raise DataError("{}: {}".format(path, error))
    frame = frame.fillna("")
    frame.columns = [c.strip() for c in frame.columns]
    for name in KDFollowConstants.REQUIRED_COLUMNS:
        if schema[name] not in frame.columns:
            raise DataError("{}: header is missing column '{}'".format(path, schema[name]))
    optional = [name for name in KDFollowConstants.OPTIONAL_COLUMNS if schema.get(name, "") in frame.columns]

    lines = frame.index.to_numpy() + 2  # header is line 1
    numeric = {}
    for name in KDFollowConstants.REQUIRED_COLUMNS[2:] + tuple(optional):
        values = pandas.to_numeric(frame[schema[name]].str.strip(), errors="coerce").to_numpy(dtype=float)
        bad = ~numpy.isfinite(values)
        if bad.any():
            raise DataError("line {}: malformed row, column '{}' is not a number".format(lines[bad][0],
                                                                                        schema[name]))
        numeric[name] = values
    pair_ids = frame[schema["pair_id"]].str.strip().to_numpy()
    empty = pair_ids == ""
    if empty.any():
        raise DataError("line {}: malformed row, pair id missing".format(lines[empty][0]))
    pair_classes = numpy.array([check_pair_class(v, lines[i]) for i, v in enumerate(frame[schema["pair_type"]])],
                               dtype=object)

    pairs = []
    for pair_id in sorted(set(pair_ids)):
        rows = numpy.flatnonzero(pair_ids == pair_id)
        classes = set(pair_classes[rows])
        if len(classes) > 1:
            raise DataError("pair {} is labeled with more than one class".format(pair_id))
        order = rows[numpy.argsort(numeric["t"][rows], kind="stable")]
        t = numeric["t"][order]
        steps = numpy.diff(t)
        if numpy.any(numpy.abs(steps - dt) > KDFollowConstants.TIME_TOLERANCE):
            raise DataError("pair {}: timestamps are not uniformly spaced at {} s".format(pair_id, dt))
        new_pair = TrajectoryPair(pair_id, classes.pop(), t, numeric["lead_pos"][order], numeric["foll_pos"][order],
                                  numeric["lead_speed"][order], numeric["foll_speed"][order],
                                  numeric["lead_accel"][order] if "lead_accel" in numeric else None,
                                  numeric["foll_accel"][order] if "foll_accel" in numeric else None, dt=dt)
        if numpy.any(new_pair.spacing < 0):
            raise DataError("pair {}: lead position behind follower position".format(pair_id))
        if numpy.any(new_pair.lead_speed < 0) or numpy.any(new_pair.foll_speed < 0):
            raise DataError("pair {}: negative speed".format(pair_id))
        pairs.append(new_pair)

    LOG.info(get_text("Loaded {} pairs from {}").format(len(pairs), path))
    counts = class_counts(pairs)
    for pair_class in KDFollowConstants.PAIR_CLASSES:
        LOG.info("%s: %d pairs", pair_class, counts[pair_class])
    if output_blocks is not None:
        output_blocks.append(class_count_block(counts, get_text("Ingested Trajectories")))
    return pairs


def class_counts(pairs: list) -> dict:
    """
    number of distinct pair ids of each class
    """
    counts = {c: set() for c in KDFollowConstants.PAIR_CLASSES}
    for pair in pairs:
        counts[pair.pair_class].add(pair.pair_id)
    return {c: len(v) for c, v in counts.items()}


def class_count_block(counts: dict, title: str) -> list:
    output = ["→ {}".format(title)]
    table = [[c, counts[c], KDFollowConstants.REFERENCE_PAIR_COUNTS[c]] for c in KDFollowConstants.PAIR_CLASSES]
    create_output_table(output, table, [get_text("Class"), get_text("Pairs"), get_text("Reference")],
                        ["", "d", "d"])
    return output


def write_pairs_csv(pairs: list, path: str, schema: Optional[dict] = None) -> None:
    """
    write pairs in the ingestion schema; numbers carry nine decimal places so output is byte-stable
    """
    if schema is None:
        schema = dict(KDFollowConstants.DEFAULT_SCHEMA)
    frames = []
    for pair in pairs:
        columns = {schema["pair_id"]: pair.pair_id,
                   schema["pair_type"]: pair.pair_class,
                   schema["t"]: pair.t,
                   schema["lead_pos"]: pair.lead_pos,
                   schema["foll_pos"]: pair.foll_pos,
                   schema["lead_speed"]: pair.lead_speed,
                   schema["foll_speed"]: pair.foll_speed}
        if pair.lead_accel is not None and pair.foll_accel is not None:
            columns[schema["lead_accel"]] = pair.lead_accel
            columns[schema["foll_accel"]] = pair.foll_accel
        frames.append(pandas.DataFrame(columns))
    if len(frames) == 0:
        frame = pandas.DataFrame(columns=[schema[c] for c in KDFollowConstants.REQUIRED_COLUMNS])
    else:
        frame = pandas.concat(frames, ignore_index=True)
    frame.to_csv(path, index=False, float_format="%.9f", lineterminator="\n")


# ---------- derived quantities ----------
def derive_kinematics(pair: TrajectoryPair) -> TrajectoryPair:
    """
    fill spacing, speed difference, acceleration and jerk

    Missing accelerations are estimated by central differences of speed (one-sided at the ends); jerk is always
    the difference of acceleration
    """
    if len(pair) < 3:
        raise DataError("pair {}: at least 3 points are needed to derive kinematics".format(pair.label()))
    new_pair = pair.subset(0, len(pair), pair.segment)
    if new_pair.lead_accel is None:
        new_pair.lead_accel = numpy.gradient(new_pair.lead_speed, pair.dt)
    if new_pair.foll_accel is None:
        new_pair.foll_accel = numpy.gradient(new_pair.foll_speed, pair.dt)
    new_pair.lead_jerk = numpy.gradient(new_pair.lead_accel, pair.dt)
    new_pair.foll_jerk = numpy.gradient(new_pair.foll_accel, pair.dt)
    return new_pair


def contiguous_runs(mask: numpy.ndarray) -> list:
    """
    (start, stop) index pairs of every run of True values
    """
    padded = numpy.concatenate(([False], numpy.asarray(mask, dtype=bool), [False]))
    changes = numpy.flatnonzero(padded[1:] != padded[:-1])
    return [(int(a), int(b)) for a, b in zip(changes[0::2], changes[1::2])]


def filter_spacing(pairs: list, max_spacing: float = KDFollowConstants.DEFAULT_MAX_SPACING,
                   min_points: int = 11, output_blocks: Optional[list] = None) -> list:
    """
    remove points whose spacing is at or beyond max_spacing; what remains of each pair is split into contiguous
    segments and segments too short to window are dropped
    """
    segments = []
    removed = 0
    dropped = 0
    for pair in pairs:
        keep = pair.spacing < max_spacing
        removed += int(numpy.sum(~keep))
        runs = contiguous_runs(keep)
        if len(runs) == 1 and runs[0] == (0, len(pair)) and len(pair) >= min_points:
            segments.append(pair)
            continue
        segment = pair.segment
        for start, stop in runs:
            if stop - start < min_points:
                dropped += 1
                continue
            segments.append(pair.subset(start, stop, segment))
            segment += 1
    retained = len(set(p.pair_id for p in segments))
    LOG.info(get_text("points removed").format(removed, max_spacing))
    LOG.info(get_text("segments dropped").format(dropped, min_points))
    LOG.info(get_text("pairs retained").format(retained))
    if output_blocks is not None:
        output_blocks.append(["→ {}".format(get_text("Spacing Filter")),
                              get_text("points removed").format(removed, format_number(max_spacing, decimals=1)),
                              get_text("segments dropped").format(dropped, min_points),
                              get_text("pairs retained").format(retained)])
    return segments


# ---------- windowing ----------
def history_steps(history: float, dt: float) -> int:
    steps = history / dt
    if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
        raise ConfigError("history {} s is not an integer multiple of dt {} s".format(history, dt))
    return int(round(steps))


def pair_features(pair: TrajectoryPair) -> numpy.ndarray:
    return numpy.stack([pair.spacing, pair.lead_speed, pair.speed_diff], axis=1)


def make_windows(pairs: list, history: float = KDFollowConstants.DEFAULT_HISTORY,
                 dt: float = KDFollowConstants.DEFAULT_DT, output_blocks: Optional[list] = None) -> WindowSet:
    """
    slide a window of history/dt steps with stride 1 over every contiguous segment

    a segment of n points gives n - history/dt windows; the target of each is the follower speed one step after
    the window ends
    """
    steps = history_steps(history, dt)
    features = []
    targets = []
    times = []
    pair_ids = []
    classes = []
    n_segments = 0
    for pair in sorted(pairs, key=lambda p: (p.pair_id, p.segment)):
        n = len(pair)
        if n < steps + 1:
            LOG.debug("segment %s too short for a window", pair.label())
            continue
        n_segments += 1
        view = numpy.lib.stride_tricks.sliding_window_view(pair_features(pair), steps, axis=0)
        features.append(numpy.transpose(view[:n - steps], (0, 2, 1)))
        targets.append(pair.foll_speed[steps:])
        times.append(pair.t[steps - 1:n - 1])
        pair_ids.extend([pair.pair_id] * (n - steps))
        classes.extend([pair.pair_class] * (n - steps))
    if n_segments == 0:
        windows = WindowSet(numpy.zeros((0, steps, KDFollowConstants.N_CHANNELS)), [], [], [], [], dt=dt,
                            history=history)
    else:
        windows = WindowSet(numpy.concatenate(features), numpy.concatenate(targets), numpy.concatenate(times),
                            pair_ids, classes, dt=dt, history=history)
    LOG.info(get_text("{} windows built from {} segments").format(len(windows), n_segments))
    if output_blocks is not None:
        output_blocks.append(["→ {}".format(get_text("Windows")),
                              get_text("{} windows built from {} segments").format(len(windows), n_segments)])
    return windows


# ---------- normalization ----------
def fit_normalizer(train_windows: WindowSet) -> Normalizer:
    """
    fit min-max scaling to the training windows only
    """
    if len(train_windows) == 0:
        raise DataError("cannot fit normalization to an empty training set")
    feature_min = train_windows.features.min(axis=(0, 1))
    feature_max = train_windows.features.max(axis=(0, 1))
    for c, name in enumerate(KDFollowConstants.CHANNEL_NAMES):
        if not feature_max[c] > feature_min[c]:
            raise DataError("channel {} is constant in the training windows".format(name))
    target_min = float(train_windows.targets.min())
    target_max = float(train_windows.targets.max())
    if not target_max > target_min:
        raise DataError("channel target is constant in the training windows")
    return Normalizer(feature_min, feature_max, target_min, target_max)


# ---------- splitting ----------
def fallback_split_counts(n: int) -> list:
    n_test = max(1, int(round(KDFollowConstants.SPLIT_FRACTIONS[2] * n)))
    n_val = max(1, int(round(KDFollowConstants.SPLIT_FRACTIONS[1] * n)))
    n_train = n - n_val - n_test
    return ([KDFollowConstants.SPLIT_TRAIN] * n_train + [KDFollowConstants.SPLIT_VALIDATION] * n_val +
            [KDFollowConstants.SPLIT_TEST] * n_test)


def split_dataset(windows: WindowSet, seed: int) -> DatasetSplit:
    """
    assign whole pairs to train, validation and test, stratified by class

    Pairs of each class are shuffled and laid end to end by window count; a pair goes to the split holding the
    midpoint of its windows within the 60/20/20 partition of the class's total. If this leaves a split empty, the
    class is partitioned by pair count instead
    """
    rng = numpy.random.default_rng(seed)
    class_of_pair = windows.class_of_pair()
    pair_ids, mass = numpy.unique(windows.pair_ids.astype(str), return_counts=True)
    mass = dict(zip(pair_ids, mass))
    train_edge = KDFollowConstants.SPLIT_FRACTIONS[0]
    val_edge = train_edge + KDFollowConstants.SPLIT_FRACTIONS[1]
    assignment = {}
    for pair_class in KDFollowConstants.PAIR_CLASSES:
        members = sorted(p for p, c in class_of_pair.items() if c == pair_class)
        if len(members) == 0:
            continue
        if len(members) < 3:
            raise DataError("class {} has {} pairs; at least 3 are needed to split".format(pair_class,
                                                                                            len(members)))
        shuffled = [members[i] for i in rng.permutation(len(members))]
        weights = numpy.array([mass[p] for p in shuffled], dtype=float)
        midpoints = (numpy.cumsum(weights) - weights / 2) / weights.sum()
        tags = numpy.where(midpoints < train_edge, KDFollowConstants.SPLIT_TRAIN,
                           numpy.where(midpoints < val_edge, KDFollowConstants.SPLIT_VALIDATION,
                                       KDFollowConstants.SPLIT_TEST)).tolist()
        if len(set(tags)) < 3:
            tags = fallback_split_counts(len(shuffled))
        for p, tag in zip(shuffled, tags):
            assignment[p] = tag
    splits = numpy.array([assignment[p] for p in windows.pair_ids], dtype=int)
    tagged = WindowSet(windows.features, windows.targets, windows.times, windows.pair_ids, windows.pair_classes,
                       splits, windows.dt, windows.history)
    for tag, name in enumerate(KDFollowConstants.SPLIT_NAMES):
        LOG.info("%s split: %d pairs, %d windows", name, sum(1 for s in assignment.values() if s == tag),
                 int(numpy.sum(splits == tag)))
    return DatasetSplit(tagged, assignment, seed)


# ---------- persistence ----------
def sidecar_name(path: str) -> str:
    return path + ".meta"


def save_windows(windows: WindowSet, path: str, normalizer: Optional[Normalizer] = None) -> None:
    """
    write windows in the DCFW1 binary layout: magic, header, then little-endian float64 blocks of features,
    targets, timestamps and split tags; pair ids, classes and normalization go to a text sidecar
    """
    steps = windows.steps()
    with open(path, "wb") as outfile:
        outfile.write(KDFollowConstants.WINDOW_MAGIC)
        outfile.write(WINDOW_HEADER.pack(windows.dt, windows.history, KDFollowConstants.N_CHANNELS, steps,
                                         len(windows)))
        for block in (windows.features, windows.targets, windows.times, windows.splits.astype(float)):
            outfile.write(numpy.ascontiguousarray(block, dtype="<f8").tobytes())
    outlist = ["format = {}".format(KDFollowConstants.WINDOW_MAGIC.decode("ascii")),
               "dt = {!r}".format(windows.dt),
               "history = {!r}".format(windows.history),
               "windows = {}".format(len(windows))]
    if normalizer is not None:
        outlist.extend(normalizer.export_to_list())
    # run-length encoding of pair membership; windows are stored grouped by pair
    start = 0
    while start < len(windows):
        stop = start
        while stop < len(windows) and windows.pair_ids[stop] == windows.pair_ids[start]:
            stop += 1
        outlist.append("pair = {},{},{}".format(windows.pair_ids[start], windows.pair_classes[start], stop - start))
        start = stop
    with open(sidecar_name(path), "w") as outfile:
        outfile.write("\n".join(outlist) + "\n")


def load_windows(path: str) -> tuple:
    """
    read a DCFW1 window file and its sidecar, returning the windows and the stored normalization (or None)
    """
    for name in (path, sidecar_name(path)):
        if not os.path.isfile(name):
            raise DataError(get_text("artifact_missing").format(name))
    with open(path, "rb") as infile:
        data = infile.read()
    magic = KDFollowConstants.WINDOW_MAGIC
    if data[:len(magic)] != magic:
        raise DataError("{} is not a window file".format(path))
    dt, history, channels, steps, count = WINDOW_HEADER.unpack_from(data, len(magic))
    offset = len(magic) + WINDOW_HEADER.size
    sizes = (count * steps * channels, count, count, count)
    blocks = []
    for size in sizes:
        blocks.append(numpy.frombuffer(data, dtype="<f8", count=size, offset=offset).astype(float))
        offset += 8 * size
    if offset != len(data):
        raise DataError("{} is truncated or has trailing bytes".format(path))

    values = {}
    pair_ids = []
    classes = []
    with open(sidecar_name(path), "r") as infile:
        for line in infile:
            if "=" not in line:
                continue
            key, value = (x.strip() for x in line.split("=", 1))
            if key == "pair":
                pair_id, pair_class, n = value.rsplit(",", 2)
                pair_ids.extend([pair_id] * int(n))
                classes.extend([pair_class] * int(n))
            else:
                values[key] = value
    if len(pair_ids) != count:
        raise DataError("{} does not match its sidecar".format(path))
    normalizer = Normalizer.import_from_dict(values) if "norm.target" in values else None
    windows = WindowSet(blocks[0].reshape(count, steps, channels), blocks[1], blocks[2], pair_ids, classes,
                        blocks[3].astype(int), dt, history)
    return windows, normalizer


def build_dataset(pairs: list, seed: int, max_spacing: float = KDFollowConstants.DEFAULT_MAX_SPACING,
                  history: float = KDFollowConstants.DEFAULT_HISTORY, dt: float = KDFollowConstants.DEFAULT_DT,
                  output_blocks: Optional[list] = None) -> tuple:
    """
    derive kinematics, filter by spacing, window, split by pair and fit normalization on the training split

    returns the split, the normalizer and the filtered segments
    """
    derived = [derive_kinematics(pair) for pair in pairs]
    segments = filter_spacing(derived, max_spacing, history_steps(history, dt) + 1, output_blocks)
    windows = make_windows(segments, history, dt, output_blocks)
    split = split_dataset(windows, seed)
    normalizer = fit_normalizer(split.train)
    return split, normalizer, segments
