"""
testing KDFollow

some of these functions are formal tests where values are compared to expectations, whether calculated by hand,
by an independent library routine, or by brute force

other tests are strictly functional (e.g., training, rollouts and the command-line pipeline), checking that
interfaces haven't broken and that the guarantees of each stage hold on small synthetic data sets
"""

import json
import math
import os

import numpy
import pandas
import pytest
import scipy.stats
from sklearn.model_selection import ParameterSampler

# note these may be marked by the IDE as unknown modules, but pytest.ini will resolve the errors when tests
# are actually executed
import KDFollowConfig
import KDFollowConstants
import KDFollowData
import KDFollowDistill
import KDFollowEval
import KDFollowGipps
import KDFollowNetwork
import KDFollowStats
import KDFollowUtils
from KDFollow import main
from KDFollowConstants import AV_HDV, HDV_AV, HDV_HDV
from KDFollowMessages import ConfigError, DataError, DivergenceError, ShapeError, StaleCacheError


TEST_DIR = os.path.dirname(os.path.abspath(__file__))
FIXTURE_PAIRS = os.path.join(TEST_DIR, "fixture_pairs.csv")


def print_test_output(output: list) -> None:
    for block in output:
        print()
        for line in block:
            print(line)


def default_presets() -> dict:
    return KDFollowGipps.presets_from_config(KDFollowConfig.default_config())


def synthetic_pairs(n_pairs: int = 5, seed: int = 11, duration: float = 15.0, noisy: bool = True) -> list:
    return KDFollowGipps.generate_synthetic_dataset(default_presets(), n_pairs, seed, duration, noisy=noisy)


def synthetic_dataset(n_pairs: int = 5, seed: int = 11, duration: float = 15.0) -> tuple:
    return KDFollowData.build_dataset(synthetic_pairs(n_pairs, seed, duration), seed=3)


def rewrite_fixture(tmp_path, line_number: int, column: int, value: str) -> str:
    """
    copy the fixture with one cell replaced; line numbers count the header as line 1
    """
    with open(FIXTURE_PAIRS, "r") as infile:
        lines = infile.read().splitlines()
    cells = lines[line_number - 1].split(",")
    cells[column] = value
    lines[line_number - 1] = ",".join(cells)
    filename = os.path.join(str(tmp_path), "edited_pairs.csv")
    with open(filename, "w") as outfile:
        outfile.write("\n".join(lines) + "\n")
    return filename


def numeric_gradient(loss_of_vector, vector: numpy.ndarray, eps: float = 1e-6) -> numpy.ndarray:
    grad = numpy.zeros_like(vector)
    for i in range(len(vector)):
        saved = vector[i]
        vector[i] = saved + eps
        upper = loss_of_vector()
        vector[i] = saved - eps
        lower = loss_of_vector()
        vector[i] = saved
        grad[i] = (upper - lower) / (2 * eps)
    return grad


class ZeroModel:
    name = "ZERO"

    def predict(self, features, times=None, pair_ids=None):
        return numpy.zeros(len(features))


class ConstantModel:
    def __init__(self, speed: float):
        self.speed = speed
        self.name = "CONST"

    def predict(self, features, times=None, pair_ids=None):
        return numpy.full(len(features), self.speed)


class LeadSpeedModel:
    name = "LEAD"

    def predict(self, features, times=None, pair_ids=None):
        return numpy.asarray(features)[:, -1, KDFollowConstants.CHANNEL_LEAD_SPEED]


class ReplayModel:
    """
    returns the observed follower speed one step after each window
    """
    name = "REPLAY"

    def __init__(self, pair, dt: float = KDFollowConstants.DEFAULT_DT):
        self.pair = pair
        self.dt = dt

    def predict(self, features, times=None, pair_ids=None):
        index = numpy.rint(numpy.asarray(times, dtype=float) / self.dt).astype(int) + 1
        return self.pair.foll_speed[index]


# ---------- configuration and utilities ----------
def test_config_round_trip(tmp_path) -> None:
    config = KDFollowConfig.import_config(environ={})
    config["teacher.layers"] = [8, 4]
    config["distill.cache_teacher"] = True
    config["run.seed"] = 17
    filename = os.path.join(str(tmp_path), "round_trip.config")
    KDFollowConfig.export_config(config, filename)
    reimported = KDFollowConfig.import_config(filename, environ={})
    assert reimported == config


def test_config_errors(tmp_path) -> None:
    with pytest.raises(ConfigError):
        KDFollowConfig.validate_config("no.such_key", "1")
    with pytest.raises(ConfigError):
        KDFollowConfig.validate_config("teacher.dropout", "1.0")
    with pytest.raises(ConfigError):
        KDFollowConfig.validate_config("distill.alpha", "1.5")
    with pytest.raises(ConfigError):
        KDFollowConfig.validate_config("stats.bins", "5,15,10")
    with pytest.raises(ConfigError):
        KDFollowConfig.import_config(os.path.join(str(tmp_path), "missing.config"), environ={})
    filename = os.path.join(str(tmp_path), "bad.config")
    with open(filename, "w") as outfile:
        outfile.write("run.seed = 3\nthis line has no equals sign\n")
    with pytest.raises(ConfigError):
        KDFollowConfig.import_config(filename, environ={})
    with open(filename, "w") as outfile:
        outfile.write("data.history = 1.05\n")
    with pytest.raises(ConfigError):
        KDFollowConfig.import_config(filename, environ={})


def test_config_environment_override() -> None:
    config = KDFollowConfig.import_config(environ={"DCF_RUN_SEED": "42", "DCF_TEACHER_LAYERS": "16,8"})
    assert config["run.seed"] == 42
    assert config["teacher.layers"] == [16, 8]
    with pytest.raises(ConfigError):
        KDFollowConfig.import_config(environ={"DCF_DISTILL_ALPHA": "2"})


def test_parse_lists_and_seeds() -> None:
    assert KDFollowUtils.parse_float_list("0.1:0.9:0.1") == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    assert KDFollowUtils.parse_float_list("0.25, 0.5") == [0.25, 0.5]
    assert KDFollowUtils.parse_int_list("475,61") == [475, 61]
    assert KDFollowUtils.stage_seed(7, "teacher") == KDFollowUtils.stage_seed(7, "teacher")
    assert KDFollowUtils.stage_seed(7, "teacher") != KDFollowUtils.stage_seed(7, "student")
    assert KDFollowUtils.stage_seed(7, "teacher") != KDFollowUtils.stage_seed(8, "teacher")


def test_json_value() -> None:
    value = KDFollowUtils.json_value({"a": math.inf, "b": float("nan"), "c": numpy.float64(1.5),
                                      "d": numpy.arange(2), "e": (numpy.int64(3), None), 4: -math.inf})
    assert value == {"a": "inf", "b": None, "c": 1.5, "d": [0, 1], "e": [3, None], "4": "-inf"}


# ---------- data ----------
def test_load_fixture() -> None:
    output_blocks = []
    pairs = KDFollowData.load_pairs(FIXTURE_PAIRS, output_blocks=output_blocks)
    print_test_output(output_blocks)
    assert [p.pair_id for p in pairs] == ["P001", "P002", "P003"]
    assert [p.pair_class for p in pairs] == [AV_HDV, HDV_AV, HDV_HDV]
    for pair in pairs:
        assert len(pair) == 50
        assert numpy.all(pair.spacing > 0)
    assert math.isclose(pairs[0].spacing[0], 20.0, abs_tol=1e-9)
    assert math.isclose(pairs[0].speed_diff[0], 8.520574 - 9.0, abs_tol=1e-9)
    assert KDFollowData.class_counts(pairs) == {AV_HDV: 1, HDV_AV: 1, HDV_HDV: 1}


def test_load_rejects_bad_rows(tmp_path) -> None:
    with pytest.raises(DataError, match="line 6"):
        KDFollowData.load_pairs(rewrite_fixture(tmp_path, 6, 1, KDFollowConstants.AV_AV))
    with pytest.raises(DataError, match="line 10: malformed row, column 'lead_speed'"):
        KDFollowData.load_pairs(rewrite_fixture(tmp_path, 10, 5, "abc"))
    with pytest.raises(DataError, match="line 12: malformed row, pair id missing"):
        KDFollowData.load_pairs(rewrite_fixture(tmp_path, 12, 0, ""))
    with pytest.raises(DataError, match="not uniformly spaced"):
        KDFollowData.load_pairs(rewrite_fixture(tmp_path, 20, 2, "1.95"))
    with pytest.raises(DataError):
        KDFollowData.load_pairs(os.path.join(str(tmp_path), "missing.csv"))


def test_make_windows() -> None:
    pairs = [KDFollowData.derive_kinematics(p) for p in KDFollowData.load_pairs(FIXTURE_PAIRS)]
    windows = KDFollowData.make_windows(pairs)
    assert len(windows) == 3 * (50 - 10)
    assert windows.features.shape == (120, 10, 3)
    first = windows[0]
    assert first.pair_id == "P001"
    assert first.target == pairs[0].foll_speed[10]
    assert math.isclose(first.t, 0.9)
    assert numpy.array_equal(first.features[0], [pairs[0].spacing[0], pairs[0].lead_speed[0],
                                                 pairs[0].speed_diff[0]])
    assert numpy.array_equal(windows.flat_features()[0][:3], first.features[0])
    # one pair per class cannot be split three ways
    with pytest.raises(DataError):
        KDFollowData.split_dataset(windows, 1)


def test_filter_spacing_segments() -> None:
    t = numpy.arange(50) * 0.1
    spacing = numpy.full(50, 10.0)
    spacing[15:20] = 60.0
    spacing[30:32] = 60.0
    foll_pos = 10 * t
    pair = KDFollowData.TrajectoryPair("X", HDV_HDV, t, foll_pos + spacing, foll_pos, numpy.full(50, 10.0),
                                       numpy.full(50, 10.0))
    output_blocks = []
    segments = KDFollowData.filter_spacing([KDFollowData.derive_kinematics(pair)], 50.0, 11, output_blocks)
    print_test_output(output_blocks)
    # runs of 15, 10 and 18 points; the middle one is too short
    assert [len(s) for s in segments] == [15, 18]
    assert [s.label() for s in segments] == ["X", "X#1"]
    windows = KDFollowData.make_windows(segments)
    assert len(windows) == (15 - 10) + (18 - 10)
    assert numpy.all(windows.features[:, :, KDFollowConstants.CHANNEL_SPACING] < 50)


def test_filter_spacing_drops_short_pair() -> None:
    # every point passes the spacing test but 8 points cannot fill one window
    t = numpy.arange(8) * 0.1
    pair = KDFollowData.TrajectoryPair("S", HDV_HDV, t, 10 * t + 10, 10 * t, numpy.full(8, 10.0),
                                       numpy.full(8, 10.0))
    assert KDFollowData.filter_spacing([pair], 50.0, 11) == []
    assert len(KDFollowData.filter_spacing([pair], 50.0, 8)) == 1


def test_filter_then_window_matches_masked_windows() -> None:
    rng = numpy.random.default_rng(17)
    for trial in range(30):
        n = int(rng.integers(5, 120))
        t = numpy.arange(n) * 0.1
        spacing = 50 + numpy.cumsum(rng.normal(0, 3, size=n)) + rng.uniform(-10, 10)
        foll_speed = rng.uniform(5, 15, size=n)
        foll_pos = numpy.cumsum(foll_speed) * 0.1
        pair = KDFollowData.TrajectoryPair("R{}".format(trial), HDV_AV, t, foll_pos + spacing, foll_pos,
                                           rng.uniform(5, 15, size=n), foll_speed)
        filtered = KDFollowData.make_windows(KDFollowData.filter_spacing([pair], 50.0, 11))
        everything = KDFollowData.make_windows([pair])
        if n < 11:
            assert len(filtered) == 0 and len(everything) == 0
            continue
        # a window survives when its 10 steps and its target all lie below the limit
        keep = numpy.lib.stride_tricks.sliding_window_view(pair.spacing < 50, 11).all(axis=1)
        assert len(filtered) == int(keep.sum())
        assert numpy.array_equal(filtered.features, everything.features[keep])
        assert numpy.array_equal(filtered.targets, everything.targets[keep])
        assert numpy.array_equal(filtered.times, everything.times[keep])


def test_derive_kinematics() -> None:
    t = numpy.arange(30) * 0.1
    pair = KDFollowData.TrajectoryPair("K", AV_HDV, t, 0.5 * t**2 + 20, 10 * t, t, numpy.full(30, 10.0))
    derived = KDFollowData.derive_kinematics(pair)
    assert numpy.allclose(derived.lead_accel, 1.0, rtol=0, atol=1e-9)
    assert numpy.allclose(derived.foll_accel, 0.0, rtol=0, atol=1e-12)
    assert numpy.allclose(derived.lead_jerk, 0.0, rtol=0, atol=1e-6)
    assert pair.lead_accel is None
    with pytest.raises(DataError):
        KDFollowData.derive_kinematics(pair.subset(0, 2, 0))


def test_fit_normalizer_rejects_constant_channel() -> None:
    rng = numpy.random.default_rng(12)
    features = rng.uniform(1, 20, size=(6, 10, 3))
    targets = rng.uniform(5, 10, size=6)
    windows = KDFollowData.WindowSet(features, targets, numpy.arange(6), ["A"] * 6, [HDV_HDV] * 6)
    normalizer = KDFollowData.fit_normalizer(windows)
    assert numpy.array_equal(normalizer.feature_min, features.min(axis=(0, 1)))
    assert normalizer.target_max == targets.max()

    features[:, :, KDFollowConstants.CHANNEL_SPACING] = 20.0
    windows = KDFollowData.WindowSet(features, targets, numpy.arange(6), ["A"] * 6, [HDV_HDV] * 6)
    with pytest.raises(DataError, match="spacing"):
        KDFollowData.fit_normalizer(windows)
    with pytest.raises(DataError):
        KDFollowData.fit_normalizer(windows.select(numpy.zeros(6, dtype=bool)))


def test_normalizer_by_hand_and_round_trip() -> None:
    normalizer = KDFollowData.Normalizer([0, 0, -5], [20, 40, 5], 0, 30)
    assert numpy.allclose(normalizer.apply_features(numpy.array([20.0, 10.0, 0.0])), [1.0, 0.25, 0.5])
    assert normalizer.apply_target(7.5) == 0.25
    rng = numpy.random.default_rng(14)
    features = rng.uniform(-50, 100, size=(1000, 3))
    assert numpy.max(numpy.abs(normalizer.invert_features(normalizer.apply_features(features)) - features)) < 1e-10
    targets = rng.uniform(-10, 40, size=1000)
    assert numpy.max(numpy.abs(normalizer.invert_target(normalizer.apply_target(targets)) - targets)) < 1e-10


def test_split_proportions() -> None:
    # 100 pairs of one window each divide 60/20/20
    pair_ids = ["P{:03d}".format(i) for i in range(100)]
    windows = KDFollowData.WindowSet(numpy.zeros((100, 10, 3)), numpy.zeros(100), numpy.zeros(100), pair_ids,
                                     [HDV_AV] * 100)
    split = KDFollowData.split_dataset(windows, 8)
    sizes = [len(split.pairs_in(tag)) for tag in range(3)]
    assert abs(sizes[0] - 60) <= 1 and abs(sizes[1] - 20) <= 1 and abs(sizes[2] - 20) <= 1
    assert sum(sizes) == 100


def test_split_and_normalize() -> None:
    split, normalizer, _ = synthetic_dataset()
    assignment = split.assignment
    by_split = [set(split.pairs_in(tag)) for tag in range(3)]
    assert by_split[0].isdisjoint(by_split[1])
    assert by_split[0].isdisjoint(by_split[2])
    assert by_split[1].isdisjoint(by_split[2])
    assert set(assignment) == set(split.windows.pair_ids)
    for pair_class in KDFollowConstants.PAIR_CLASSES:
        tags = {assignment[p] for p in assignment if split.windows.class_of_pair()[p] == pair_class}
        assert tags == {0, 1, 2}
    assert len(split.train) + len(split.validation) + len(split.test) == len(split.windows)

    scaled = normalizer.apply_features(split.train.features)
    assert scaled.min() >= 0 and scaled.max() <= 1
    assert numpy.max(numpy.abs(normalizer.invert_features(scaled) - split.train.features)) < 1e-10
    targets = normalizer.apply_target(split.train.targets)
    assert numpy.max(numpy.abs(normalizer.invert_target(targets) - split.train.targets)) < 1e-10

    again = KDFollowData.split_dataset(split.windows, 3)
    assert again.assignment == assignment


def test_save_load_windows(tmp_path) -> None:
    split, normalizer, _ = synthetic_dataset(n_pairs=4)
    filename = os.path.join(str(tmp_path), "windows.dcfw")
    KDFollowData.save_windows(split.windows, filename, normalizer)
    windows, loaded_normalizer = KDFollowData.load_windows(filename)
    assert numpy.array_equal(windows.features, split.windows.features)
    assert numpy.array_equal(windows.targets, split.windows.targets)
    assert numpy.array_equal(windows.splits, split.windows.splits)
    assert list(windows.pair_ids) == list(split.windows.pair_ids)
    assert list(windows.pair_classes) == list(split.windows.pair_classes)
    assert numpy.array_equal(loaded_normalizer.feature_min, normalizer.feature_min)
    assert loaded_normalizer.target_max == normalizer.target_max
    with open(filename, "ab") as outfile:
        outfile.write(b"\x00")
    with pytest.raises(DataError):
        KDFollowData.load_windows(filename)


# ---------- statistics ----------
def test_anova_by_hand() -> None:
    # group means 1.5 and 5.5: SSB = 16, SSW = 1, df = (1, 2)
    result = KDFollowStats.one_way_anova([[1, 2], [5, 6]])
    assert round(result.f, 10) == 32
    assert math.isclose(result.p, 1 - math.sqrt(16 / 17), rel_tol=1e-10)
    assert (result.df_between, result.df_within) == (1, 2)

    result = KDFollowStats.one_way_anova([[1, 2, 3], [1, 2, 3]])
    assert result.f == 0 and result.p == 1

    result = KDFollowStats.one_way_anova([[1, 1], [2, 2]])
    assert math.isinf(result.f) and result.p == 0

    with pytest.raises(DataError):
        KDFollowStats.one_way_anova([[1, 2, 3]])
    with pytest.raises(DataError):
        KDFollowStats.one_way_anova([[1, 2, 3], [4]])


def test_anova_against_library() -> None:
    rng = numpy.random.default_rng(5)
    for trial in range(20):
        groups = [rng.normal(loc, 1.0, size=rng.integers(3, 30)) for loc in rng.uniform(0, 1, size=3)]
        result = KDFollowStats.one_way_anova(groups)
        answer = scipy.stats.f_oneway(*groups)
        assert math.isclose(result.f, answer.statistic, rel_tol=1e-9)
        assert math.isclose(result.p, answer.pvalue, rel_tol=1e-7, abs_tol=1e-12)


def brute_force_f(groups: list) -> float:
    n_total = 0
    total = 0.0
    for g in groups:
        for x in g:
            n_total += 1
            total += x
    grand_mean = total / n_total
    ssb = 0.0
    ssw = 0.0
    for g in groups:
        group_mean = sum(g) / len(g)
        ssb += len(g) * (group_mean - grand_mean)**2
        for x in g:
            ssw += (x - group_mean)**2
    return (ssb / (len(groups) - 1)) / (ssw / (n_total - len(groups)))


def test_anova_brute_force() -> None:
    rng = numpy.random.default_rng(31)
    for trial in range(100):
        n_groups = int(rng.integers(2, 6))
        groups = [list(rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 2), size=rng.integers(2, 20)))
                  for _ in range(n_groups)]
        result = KDFollowStats.one_way_anova(groups)
        f = brute_force_f(groups)
        df_within = sum(len(g) for g in groups) - n_groups
        assert (result.df_between, result.df_within) == (n_groups - 1, df_within)
        assert math.isclose(result.f, f, rel_tol=1e-9)
        assert math.isclose(result.p, scipy.stats.f.sf(f, n_groups - 1, df_within), rel_tol=1e-7, abs_tol=1e-12)

        shifted = KDFollowStats.one_way_anova([numpy.asarray(g) + 7.5 for g in groups])
        assert math.isclose(shifted.f, result.f, rel_tol=1e-8)
        assert math.isclose(shifted.p, result.p, rel_tol=1e-6, abs_tol=1e-12)


def test_moment_invariance() -> None:
    rng = numpy.random.default_rng(32)
    for trial in range(50):
        sample = rng.gamma(2.0, 1.5, size=rng.integers(5, 60))
        skew = KDFollowStats.skewness(sample)
        kurt = KDFollowStats.kurtosis(sample)
        scale = rng.uniform(0.1, 10)
        shift = rng.uniform(-20, 20)
        assert abs(KDFollowStats.skewness(-sample) + skew) < 1e-9
        assert abs(KDFollowStats.skewness(scale * sample + shift) - skew) < 1e-9
        assert abs(KDFollowStats.kurtosis(scale * sample + shift) - kurt) < 1e-9
        assert abs(KDFollowStats.kurtosis(-scale * sample + shift) - kurt) < 1e-9


def test_moments() -> None:
    # mean 22, m2 = 1522, m3 = 88920
    assert math.isclose(KDFollowStats.skewness([1, 2, 3, 4, 100]), 88920 / 1522**1.5, rel_tol=1e-12)
    assert math.isclose(KDFollowStats.skewness([1, 2, 3, 4, 100]), 1.497, abs_tol=1e-3)
    assert abs(KDFollowStats.skewness([-2, -1, 0, 1, 2])) < 1e-12
    assert math.isclose(KDFollowStats.kurtosis([-1, 1, -1, 1]), -2)
    assert KDFollowStats.skewness([0, 0, 0, 10]) > 0
    with pytest.raises(DataError):
        KDFollowStats.skewness([3, 3, 3, 3])
    with pytest.raises(DataError):
        KDFollowStats.kurtosis([1, 2, 3])
    summary = KDFollowStats.summarize_group(HDV_HDV, 0, [1.0, 1.0])
    assert summary.n == 2 and summary.std == 0 and summary.skewness is None
    assert KDFollowStats.summarize_group(HDV_HDV, 0, []).mean is None


def test_ttc() -> None:
    assert KDFollowStats.ttc(10, 2) == 5
    assert math.isinf(KDFollowStats.ttc(10, 0))
    assert math.isinf(KDFollowStats.ttc(10, -1))
    with pytest.raises(DataError):
        KDFollowStats.ttc(-1, 1)
    values = KDFollowStats.ttc_array([10, 10, 0], [2, -1, 1])
    assert values[0] == 5 and math.isinf(values[1]) and values[2] == 0
    assert KDFollowStats.finite_mean(values) == 2.5
    assert KDFollowStats.finite_mean([math.inf]) is None


def test_spacing_bins() -> None:
    left = KDFollowStats.SpacingBins([5, 15, 25, 35, 45])
    assert list(left.assign(numpy.array([5.0, 15.0, 44.9, 45.0, 4.9]))) == [0, 1, 3, -1, -1]
    assert left.label(0) == "[5, 15)"
    right = KDFollowStats.SpacingBins([0, 10, 15, 30], KDFollowStats.CLOSED_RIGHT)
    assert list(right.assign(numpy.array([0.0, 10.0, 15.0, 30.0, 31.0]))) == [-1, 0, 1, 2, -1]
    assert right.label(2) == "(15, 30]"
    with pytest.raises(DataError):
        KDFollowStats.SpacingBins([5, 5, 10])


def test_speed_variability_ordering() -> None:
    pairs = synthetic_pairs(n_pairs=40, seed=23, duration=30.0)
    variability = KDFollowStats.speed_variability(pairs, KDFollowStats.SpacingBins([0.0, 1000.0]))
    assert variability[AV_HDV][0] < variability[HDV_HDV][0]


def test_descriptive_analysis() -> None:
    pairs = [KDFollowData.derive_kinematics(p) for p in synthetic_pairs(n_pairs=6, duration=30.0)]
    segments = KDFollowData.filter_spacing(pairs)
    config = KDFollowConfig.default_config()
    output, charts, values = KDFollowStats.descriptive_analysis(segments, config["stats.bins"],
                                                                config["stats.categories"])
    print_test_output(output)
    assert set(values) == {"speed_variability", "moments", "table1", "anova"}
    assert len(values["speed_variability"][AV_HDV]) == 4
    assert len(values["table1"]) == 3 * 3
    assert len(values["anova"]) == 3 * 3
    assert "speed_variability" in charts
    assert "kurtosis_foll_accel" in charts


# ---------- networks ----------
def check_gradient(weights, batch, target, training: bool = False, masks=None, eps: float = 1e-6) -> None:
    prediction, cache = KDFollowNetwork.forward(weights, batch, training, masks=masks)
    _, loss_grad = KDFollowNetwork.mse_loss(prediction[:, 0], target)
    analytic = KDFollowNetwork.backward(weights, cache, loss_grad)

    def loss() -> float:
        y, _ = KDFollowNetwork.forward(weights, batch, training, masks=masks)
        return KDFollowNetwork.mse_loss(y[:, 0], target)[0]

    numeric = numeric_gradient(loss, weights.vector, eps)
    assert analytic.shape == weights.vector.shape
    assert numpy.allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_mlp_gradient() -> None:
    rng = numpy.random.default_rng(1)
    spec = KDFollowNetwork.MlpSpec(6, (5, 4), hidden_activation=KDFollowConstants.ACT_SIGMOID)
    weights = KDFollowNetwork.init_weights(spec, 3)
    check_gradient(weights, rng.normal(size=(7, 6)), rng.uniform(size=7))


def test_lstm_gradient_with_dropout() -> None:
    rng = numpy.random.default_rng(2)
    spec = KDFollowNetwork.LstmSpec(3, (4, 3), dropout=0.3, projection=0, steps=5)
    weights = KDFollowNetwork.init_weights(spec, 4)
    masks = KDFollowNetwork.dropout_masks(spec, 4, rng)
    check_gradient(weights, rng.normal(size=(4, 5, 3)), rng.uniform(size=4), training=True, masks=masks)


def test_lstm_gradient_with_projection() -> None:
    rng = numpy.random.default_rng(3)
    spec = KDFollowNetwork.LstmSpec(3, (4,), dropout=0.0, projection=3, steps=4)
    weights = KDFollowNetwork.init_weights(spec, 5)
    check_gradient(weights, rng.normal(size=(5, 4, 3)), rng.uniform(size=5))


def random_weights(spec, rng) -> KDFollowNetwork.Weights:
    n_params = KDFollowNetwork.Weights(spec).n_params()
    return KDFollowNetwork.Weights(spec, rng.normal(0, 0.7, size=n_params))


def test_random_mlp_gradients() -> None:
    rng = numpy.random.default_rng(41)
    activations = KDFollowConstants.ACTIVATIONS
    checked = 0
    for trial in range(100):
        hidden = [int(h) for h in rng.integers(1, 6, size=rng.integers(1, 3))]
        spec = KDFollowNetwork.MlpSpec(int(rng.integers(1, 6)), hidden, activations[rng.integers(3)], 1,
                                       activations[rng.integers(3)])
        weights = random_weights(spec, rng)
        batch = rng.uniform(-1, 1, size=(int(rng.integers(1, 5)), spec.input_dim))
        target = rng.uniform(size=len(batch))
        _, cache = KDFollowNetwork.forward(weights, batch)
        # central differences straddling a ReLU kink do not measure the one-sided slope
        if any(act == KDFollowConstants.ACT_RELU and numpy.min(numpy.abs(z)) < 1e-3
               for _, z, _, act in cache.values["layers"]):
            continue
        check_gradient(weights, batch, target, eps=1e-5)
        checked += 1
    assert checked >= 90


def test_random_lstm_gradients() -> None:
    rng = numpy.random.default_rng(42)
    checked = 0
    for trial in range(100):
        layers = [int(u) for u in rng.integers(1, 5, size=rng.integers(1, 3))]
        spec = KDFollowNetwork.LstmSpec(int(rng.integers(1, 4)), layers, float(rng.choice([0.0, 0.3, 0.5])),
                                        int(rng.integers(0, 4)), int(rng.integers(2, 6)))
        weights = random_weights(spec, rng)
        n = int(rng.integers(1, 5))
        batch = rng.normal(size=(n, spec.steps, spec.input_channels))
        target = rng.uniform(size=n)
        masks = KDFollowNetwork.dropout_masks(spec, n, rng)
        _, cache = KDFollowNetwork.forward(weights, batch, True, masks=masks)
        if spec.projection > 0 and numpy.min(numpy.abs(cache.values["proj"][0])) < 1e-3:
            continue
        check_gradient(weights, batch, target, training=True, masks=masks, eps=1e-5)
        checked += 1
    assert checked >= 90


def test_zero_weights_give_half() -> None:
    mlp = KDFollowNetwork.Weights(KDFollowNetwork.MlpSpec(30, (8, 4)))
    prediction, _ = KDFollowNetwork.forward(mlp, numpy.ones((3, 30)))
    assert numpy.array_equal(prediction, numpy.full((3, 1), 0.5))
    lstm = KDFollowNetwork.Weights(KDFollowNetwork.LstmSpec(3, (4, 2), 0.0, 2, 10))
    prediction, _ = KDFollowNetwork.forward(lstm, numpy.ones((3, 10, 3)))
    assert numpy.array_equal(prediction, numpy.full((3, 1), 0.5))


def test_mlp_by_hand() -> None:
    identity = KDFollowConstants.ACT_IDENTITY
    weights = KDFollowNetwork.Weights(KDFollowNetwork.MlpSpec(1, (1,), identity, 1, identity))
    weights.view("W1")[:] = 2
    weights.view("b1")[:] = 1
    weights.view("W2")[:] = 3
    weights.view("b2")[:] = 0
    prediction, _ = KDFollowNetwork.forward(weights, numpy.array([[1.0]]))
    assert prediction[0, 0] == 9


def test_lstm_single_step_by_hand() -> None:
    weights = KDFollowNetwork.Weights(KDFollowNetwork.LstmSpec(1, (1,), 0.0, 0, 1))
    weights.view("lstm1.W")[:] = [[0.5, -0.3, 0.8, 0.2]]
    weights.view("lstm1.U")[:] = [[0.9, 0.9, 0.9, 0.9]]
    weights.view("lstm1.b")[:] = [0.1, 1.0, -0.2, 0.3]
    weights.view("head.W")[:] = [[1.5]]
    weights.view("head.b")[:] = [-0.4]
    prediction, _ = KDFollowNetwork.forward(weights, numpy.array([[[2.0]]]))

    def sigmoid(x: float) -> float:
        return 1 / (1 + math.exp(-x))

    # zero initial state: the forget gate and the recurrent kernel play no part
    c = sigmoid(2 * 0.5 + 0.1) * math.tanh(2 * 0.8 - 0.2)
    h = sigmoid(2 * 0.2 + 0.3) * math.tanh(c)
    assert math.isclose(prediction[0, 0], sigmoid(1.5 * h - 0.4), rel_tol=1e-12)


def test_batch_matches_rows() -> None:
    rng = numpy.random.default_rng(43)
    for spec, shape in ((KDFollowNetwork.MlpSpec(30, (8, 4)), (6, 30)),
                        (KDFollowNetwork.LstmSpec(3, (4, 3), 0.3, 2, 10), (6, 10, 3))):
        weights = KDFollowNetwork.init_weights(spec, 2)
        batch = rng.normal(size=shape)
        together, _ = KDFollowNetwork.forward(weights, batch)
        for i in range(len(batch)):
            alone, _ = KDFollowNetwork.forward(weights, batch[i:i+1])
            assert numpy.allclose(alone[0], together[i], rtol=0, atol=1e-12)


def test_dropout() -> None:
    rng = numpy.random.default_rng(44)
    batch = rng.normal(size=(5, 10, 3))
    no_dropout = KDFollowNetwork.init_weights(KDFollowNetwork.LstmSpec(3, (4, 3), 0.0, 0, 10), 6)
    training, _ = KDFollowNetwork.forward(no_dropout, batch, training=True)
    inference, _ = KDFollowNetwork.forward(no_dropout, batch)
    assert numpy.array_equal(training, inference)

    weights = KDFollowNetwork.init_weights(KDFollowNetwork.LstmSpec(3, (4, 3), 0.3, 0, 10), 6)
    with pytest.raises(ConfigError):
        KDFollowNetwork.forward(weights, batch, training=True)
    first, _ = KDFollowNetwork.forward(weights, batch, training=True, rng=numpy.random.default_rng(1))
    second, _ = KDFollowNetwork.forward(weights, batch, training=True, rng=numpy.random.default_rng(1))
    assert numpy.array_equal(first, second)
    # dropout never acts at inference
    inference, _ = KDFollowNetwork.forward(weights, batch)
    assert numpy.array_equal(inference, KDFollowNetwork.forward(weights, batch, rng=numpy.random.default_rng(2))[0])


def test_init_spread() -> None:
    weights = KDFollowNetwork.init_weights(KDFollowNetwork.MlpSpec(60, (60,)), 7)
    kernel = weights.view("W1")
    assert abs(kernel.std() - math.sqrt(2 / 120)) < 0.15 * math.sqrt(2 / 120)
    assert numpy.max(numpy.abs(kernel)) <= math.sqrt(6 / 120)
    assert numpy.all(weights.view("b1") == 0)
    lstm = KDFollowNetwork.init_weights(KDFollowNetwork.LstmSpec(3, (4,), 0.0, 0, 10), 7)
    assert numpy.array_equal(lstm.view("lstm1.b"), [0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0])


def test_optimizer_steps_by_hand() -> None:
    spec = KDFollowNetwork.MlpSpec(1, (1,))
    weights = KDFollowNetwork.Weights(spec, numpy.ones(4))
    state = KDFollowNetwork.OptimizerState(KDFollowNetwork.OptimizerSpec(KDFollowConstants.OPT_SGD, 0.1),
                                           weights.n_params())
    KDFollowNetwork.optimizer_step(state, weights, numpy.full(4, 2.0))
    assert numpy.allclose(weights.vector, 0.8, rtol=0, atol=1e-15)
    assert weights.version == 1

    weights = KDFollowNetwork.Weights(spec, numpy.ones(4))
    state = KDFollowNetwork.OptimizerState(KDFollowNetwork.OptimizerSpec(), weights.n_params())
    for _ in range(3):
        KDFollowNetwork.optimizer_step(state, weights, numpy.zeros(4))
    assert numpy.array_equal(weights.vector, numpy.ones(4))
    # a nonzero gradient then moves each weight against its sign
    KDFollowNetwork.optimizer_step(state, weights, numpy.array([1.0, -1.0, 0.0, 0.0]))
    assert state.step == 4
    assert weights.vector[0] < 1 < weights.vector[1]


def test_mse_by_hand() -> None:
    loss, grad = KDFollowNetwork.mse_loss([0.5, 0.5], [1, 0])
    assert loss == 0.25
    assert numpy.array_equal(grad, [-0.5, 0.5])


def test_composite_loss_identity() -> None:
    rng = numpy.random.default_rng(45)
    alphas = numpy.linspace(0, 1, 11)
    for trial in range(1000):
        alpha = float(alphas[trial % 11])
        y_obs, y_student, y_teacher = rng.uniform(size=(3, int(rng.integers(1, 20))))
        loss, _, student_loss, distill_loss = KDFollowDistill.composite_loss(y_obs, y_student, y_teacher, alpha)
        assert abs(loss - (alpha * student_loss + (1 - alpha) * distill_loss)) < 1e-12
        assert math.isclose(student_loss, KDFollowNetwork.mse_loss(y_student, y_obs)[0], rel_tol=1e-12)
        assert math.isclose(distill_loss, KDFollowNetwork.mse_loss(y_student, y_teacher)[0], rel_tol=1e-12)


def test_composite_loss() -> None:
    rng = numpy.random.default_rng(4)
    y_obs, y_student, y_teacher = rng.uniform(size=(3, 8))
    for alpha in (0.0, 0.3, 1.0):
        loss, grad, student_loss, distill_loss = KDFollowDistill.composite_loss(y_obs, y_student, y_teacher, alpha)
        assert abs(loss - (alpha * student_loss + (1 - alpha) * distill_loss)) < 1e-12

        def loss_of() -> float:
            return KDFollowDistill.composite_loss(y_obs, y_student, y_teacher, alpha)[0]

        assert numpy.allclose(grad, numeric_gradient(loss_of, y_student), rtol=1e-5, atol=1e-9)
    # alpha of one is exactly the plain loss
    loss, grad, _, _ = KDFollowDistill.composite_loss(y_obs, y_student, y_teacher, 1.0)
    plain_loss, plain_grad = KDFollowNetwork.mse_loss(y_student, y_obs)
    assert loss == plain_loss
    assert numpy.array_equal(grad, plain_grad)
    with pytest.raises(ConfigError):
        KDFollowDistill.composite_loss(y_obs, y_student, y_teacher, 1.5)
    with pytest.raises(ShapeError):
        KDFollowDistill.composite_loss(y_obs, y_student[:4], y_teacher, 0.5)


def test_multiply_adds() -> None:
    teacher = KDFollowNetwork.count_multiply_adds(KDFollowNetwork.LstmSpec())
    student = KDFollowNetwork.count_multiply_adds(KDFollowNetwork.MlpSpec())
    assert student == 30 * 60 + 60 * 60 + 60
    assert teacher == 10 * 4 * 475 * (3 + 475) + 10 * 4 * 61 * (475 + 61) + 61
    assert teacher / student > 100


def test_weights_persistence(tmp_path) -> None:
    spec = KDFollowNetwork.MlpSpec(30, (8, 4))
    weights = KDFollowNetwork.init_weights(spec, 9)
    filename = os.path.join(str(tmp_path), "student.dcfn")
    KDFollowNetwork.save_weights(weights, filename)
    loaded = KDFollowNetwork.load_weights(filename, spec)
    assert numpy.array_equal(loaded.vector, weights.vector)
    assert loaded.layout == weights.layout
    with pytest.raises(ShapeError):
        KDFollowNetwork.load_weights(filename, KDFollowNetwork.MlpSpec(30, (8,)))
    with pytest.raises(ShapeError):
        KDFollowNetwork.Weights(spec, numpy.zeros(3))


def test_divergence_and_stale_cache() -> None:
    spec = KDFollowNetwork.MlpSpec(4, (3,))
    weights = KDFollowNetwork.init_weights(spec, 1)
    state = KDFollowNetwork.OptimizerState(KDFollowNetwork.OptimizerSpec(), weights.n_params())
    grads = numpy.zeros(weights.n_params())
    grads[0] = math.nan
    with pytest.raises(DivergenceError):
        KDFollowNetwork.optimizer_step(state, weights, grads, 1, 0)

    _, cache = KDFollowNetwork.forward(weights, numpy.ones((2, 4)))
    KDFollowNetwork.optimizer_step(state, weights, numpy.ones(weights.n_params()))
    with pytest.raises(StaleCacheError):
        KDFollowNetwork.backward(weights, cache, numpy.ones(2))


# ---------- training and distillation ----------
def tiny_models(split, normalizer) -> tuple:
    teacher = KDFollowDistill.train_teacher(split, normalizer, KDFollowNetwork.LstmSpec(3, (4,), 0.0, 0, 10),
                                            KDFollowNetwork.OptimizerSpec(batch_size=64, epochs=1), 1)
    optimizer = KDFollowNetwork.OptimizerSpec(batch_size=32, epochs=2)
    student = KDFollowDistill.train_student_plain(split, normalizer, KDFollowNetwork.MlpSpec(30, (8,)), optimizer, 5)
    return teacher, student, optimizer


def test_distill_alpha_one_matches_student() -> None:
    split, normalizer, _ = synthetic_dataset(n_pairs=4)
    teacher, student, optimizer = tiny_models(split, normalizer)
    assert len(student.log) == 3
    assert student.log[0].epoch == 0
    teacher_before = teacher.weights.vector.copy()
    config = KDFollowDistill.DistillConfig(1.0, teacher, KDFollowNetwork.MlpSpec(30, (8,)), optimizer, 5)
    kdnn = KDFollowDistill.train_kdnn(split, normalizer, config)
    assert numpy.array_equal(kdnn.weights.vector, student.weights.vector)
    assert numpy.array_equal(teacher.weights.vector, teacher_before)

    cached = KDFollowDistill.train_kdnn(split, normalizer, KDFollowDistill.DistillConfig(
        0.5, teacher, KDFollowNetwork.MlpSpec(30, (8,)), optimizer, 5, cache_teacher=True))
    uncached = KDFollowDistill.train_kdnn(split, normalizer, KDFollowDistill.DistillConfig(
        0.5, teacher, KDFollowNetwork.MlpSpec(30, (8,)), optimizer, 5))
    assert numpy.allclose(cached.weights.vector, uncached.weights.vector, rtol=0, atol=1e-9)
    assert numpy.array_equal(teacher.weights.vector, teacher_before)


def test_alpha_sweep() -> None:
    split, normalizer, _ = synthetic_dataset(n_pairs=4)
    teacher, student, optimizer = tiny_models(split, normalizer)
    alphas = KDFollowUtils.parse_float_list("0.1:0.9:0.1")
    result = KDFollowDistill.alpha_sweep(split, normalizer, teacher, KDFollowNetwork.MlpSpec(30, (8,)), optimizer,
                                         alphas, 5, student=student)
    print_test_output([KDFollowDistill.sweep_block(result)])
    assert [row[0] for row in result.rows] == alphas
    for alpha, rmse, diff in result.rows:
        assert rmse > 0
        assert math.isclose(diff, rmse - result.student_rmse)
    assert result.best_alpha in alphas
    assert result.best_rmse() == min(row[1] for row in result.rows)
    assert len(KDFollowDistill.sweep_frame(result)) == 9


def test_best_alpha_ties() -> None:
    rows = [[0.2, 0.5, 0.0], [0.4, 0.5, 0.0], [0.6, 0.7, 0.0], [0.8, None, None]]
    assert KDFollowDistill.best_alpha_of(rows) == 0.4


def test_training_reduces_loss_and_repeats() -> None:
    split, normalizer, _ = synthetic_dataset(n_pairs=4)
    spec = KDFollowNetwork.MlpSpec(30, (8,))
    optimizer = KDFollowNetwork.OptimizerSpec(batch_size=32, epochs=5)
    first = KDFollowDistill.train_student_plain(split, normalizer, spec, optimizer, 21)
    second = KDFollowDistill.train_student_plain(split, normalizer, spec, optimizer, 21)
    assert [e.epoch for e in first.log] == [0, 1, 2, 3, 4, 5]
    assert first.log[-1].train_loss < first.log[0].train_loss
    assert first.log[-1].val_loss < first.log[0].val_loss
    assert first.log == second.log
    assert numpy.array_equal(first.weights.vector, second.weights.vector)
    other = KDFollowDistill.train_student_plain(split, normalizer, spec, optimizer, 22)
    assert not numpy.array_equal(first.weights.vector, other.weights.vector)


def test_alpha_zero_follows_teacher() -> None:
    split, normalizer, _ = synthetic_dataset(n_pairs=4)
    # all-zero weights with a sigmoid output predict 0.5 everywhere
    constant = KDFollowDistill.TrainedModel("CONST", KDFollowNetwork.Weights(KDFollowNetwork.MlpSpec(30, (8,))),
                                            normalizer, [])
    optimizer = KDFollowNetwork.OptimizerSpec(batch_size=32, epochs=10)
    config = KDFollowDistill.DistillConfig(0.0, constant, KDFollowNetwork.MlpSpec(30, (8,)), optimizer, 5)
    kdnn = KDFollowDistill.train_kdnn(split, normalizer, config)
    assert kdnn.log[-1].distill_loss < 0.1 * kdnn.log[0].distill_loss
    assert kdnn.log[-1].train_loss == kdnn.log[-1].distill_loss
    prediction = kdnn.predict_normalized(normalizer.apply_features(split.train.features))
    assert numpy.max(numpy.abs(prediction - 0.5)) < 0.1


def test_ordering_counts_with_missing_errors() -> None:
    rows = [[1, 0.5, 0.6, 0.3, 0.55],
            [2, None, 0.6, 0.3, 0.7],
            [3, 0.7, None, 0.5, None],
            [4, 0.6, 0.6, 0.1, 0.6]]
    assert KDFollowDistill.ordering_counts(rows) == (2, 2)
    output = KDFollowDistill.ordering_block(rows)
    print_test_output([output])
    assert "2 of 4" in output[-2] and "2 of 4" in output[-1]
    assert KDFollowDistill.ordering_counts([]) == (0, 0)


def test_timeseries_cv() -> None:
    folds = KDFollowDistill.timeseries_cv(8, 3)
    assert [(list(a), list(b)) for a, b in folds] == [([0, 1], [2, 3]),
                                                      ([0, 1, 2, 3], [4, 5]),
                                                      ([0, 1, 2, 3, 4, 5], [6, 7])]
    # equal validation blocks of n // (k + 1) at the end, each trained on everything before it
    folds = KDFollowDistill.timeseries_cv(40, 3)
    assert [(a[0], a[-1] + 1, b[0], b[-1] + 1) for a, b in folds] == [(0, 10, 10, 20), (0, 20, 20, 30),
                                                                       (0, 30, 30, 40)]
    for train_index, val_index in KDFollowDistill.timeseries_cv(100, 4):
        assert train_index.max() < val_index.min()
        assert len(val_index) == 20
    with pytest.raises(DataError):
        KDFollowDistill.timeseries_cv(3, 3)


def test_random_search() -> None:
    space = KDFollowDistill.SearchSpace(2, budget=6)

    def objective(config: dict) -> float:
        return config["learning_rate"]

    best, trials = KDFollowDistill.random_search(space, objective, 13)
    again, trials_again = KDFollowDistill.random_search(space, objective, 13)
    assert best == again
    assert trials == trials_again
    assert len(trials) == 6
    assert best["learning_rate"] == min(score for _, score in trials)
    threaded, _ = KDFollowDistill.random_search(space, objective, 13, threads=3)
    assert threaded == best
    for config, _ in trials:
        assert 1e-4 <= config["learning_rate"] <= 1e-1
        assert len(config["widths"]) == 2
        assert isinstance(config["epochs"], int) and 3 <= config["epochs"] <= 10
        assert isinstance(config["batch_size"], int) and 32 <= config["batch_size"] <= 256
        assert all(isinstance(w, int) and 16 <= w <= 128 for w in config["widths"])
        assert 0 <= config["dropout"] <= 0.5

    # the draws are those of the library sampler
    drawn = list(ParameterSampler(space.distributions(), n_iter=6, random_state=13))
    assert [config["learning_rate"] for config, _ in trials] == [d["learning_rate"] for d in drawn]
    assert [config["widths"][1] for config, _ in trials] == [d["width_1"] for d in drawn]

    single = KDFollowDistill.SearchSpace(1, budget=1)
    best, trials = KDFollowDistill.random_search(single, objective, 2)
    assert len(trials) == 1 and best == trials[0][0]
    with pytest.raises(ConfigError):
        KDFollowDistill.check_alpha(1.5)
    with pytest.raises(ConfigError):
        KDFollowDistill.SearchSpace(1, budget=0)


# ---------- Gipps baseline and synthetic data ----------
def test_gipps_step_values() -> None:
    params = KDFollowGipps.GippsParams()
    assert KDFollowGipps.gipps_step(1e6, params.v_desired, params.v_desired, params) == params.v_desired
    assert KDFollowGipps.gipps_step(params.s_eff, 0.0, 0.0, params) == 0.0

    # free and braking branches by hand for spacing 30 m behind a lead at the same 10 m/s
    v = 10.0
    v_accel = v + 2.5 * 1.7 * 1.0 * (1 - v / 13.9) * math.sqrt(0.025 + v / 13.9)
    v_brake = -3.0 + math.sqrt(9.0 + 3.0 * (2 * (30 - 6.5) - v - v**2 / -3.5))
    assert math.isclose(KDFollowGipps.gipps_step(30.0, v, v, params), min(v_accel, v_brake), rel_tol=1e-12)

    # too close to brake comfortably: emergency stop
    assert KDFollowGipps.gipps_step(6.6, 15.0, 0.0, params) == 0.0


def test_gipps_step_bounds() -> None:
    params = KDFollowGipps.GippsParams()
    spacing = numpy.linspace(7, 100, 200)
    for v in (0.0, 5.0, 13.9):
        v_next = KDFollowGipps.gipps_step(spacing, v, 8.0, params)
        assert numpy.all(numpy.diff(v_next) >= -1e-12)
        assert numpy.all(v_next >= 0)
        assert numpy.all(v_next <= v + 2.5 * params.a_max * params.tau + 1e-12)


def test_gipps_parameter_checks() -> None:
    with pytest.raises(ConfigError):
        KDFollowGipps.GippsParams(b=1.0)
    with pytest.raises(ConfigError):
        KDFollowGipps.update_steps(KDFollowGipps.GippsParams(tau=0.25), 0.1)
    means = KDFollowGipps.GippsParams()
    with pytest.raises(ConfigError):
        KDFollowGipps.ScenarioPreset(HDV_HDV, means, 0.6, 4, 12, 2, 3, 0.2, 0.1)
    with pytest.raises(ConfigError):
        KDFollowGipps.ScenarioPreset(HDV_HDV, means, 0.1, 4, 12, 2, 4.0, 0.2, 0.1)


def test_gipps_convergence_and_steady_state() -> None:
    params = KDFollowGipps.GippsParams()
    t = numpy.arange(601) * 0.1
    lead_speed = numpy.full(601, 20.0)
    lead_pos = 1000 + 20 * t
    pair = KDFollowGipps.gipps_rollout(t, lead_pos, lead_speed, params, 1000.0, 0.0)
    assert abs(pair.foll_speed[-1] - params.v_desired) <= 0.05 * params.v_desired

    lead_speed = numpy.full(601, params.v_desired)
    lead_pos = 200 + params.v_desired * t
    pair = KDFollowGipps.gipps_rollout(t, lead_pos, lead_speed, params, 200.0, params.v_desired)
    assert numpy.allclose(pair.foll_speed, params.v_desired, rtol=0, atol=1e-12)
    assert numpy.allclose(pair.spacing, 200.0, rtol=0, atol=1e-9)


def test_gipps_hard_stop() -> None:
    params = KDFollowGipps.GippsParams()
    t = numpy.arange(401) * 0.1
    lead_speed = numpy.maximum(15 - 3.0 * numpy.maximum(t - 2, 0), 0)
    spacing0 = KDFollowGipps.safe_initial_spacing(params, 15.0)
    lead_pos = KDFollowGipps.integrate_positions(lead_speed, 0.1, spacing0)
    pair = KDFollowGipps.gipps_rollout(t, lead_pos, lead_speed, params, spacing0, 15.0)
    assert pair.spacing.min() > 0
    assert pair.foll_speed.min() >= 0


def test_gipps_randomized_safety() -> None:
    presets = default_presets()
    for i in range(1000):
        preset = presets[KDFollowConstants.PAIR_CLASSES[i % 3]]
        rng = numpy.random.default_rng(1000 + i)
        pair, _ = KDFollowGipps.generate_pair(preset, rng, "R{}".format(i), 30.0, 0.1, noisy=False)
        assert pair.spacing.min() > 0
        assert pair.foll_speed.min() >= 0


def test_gipps_rollout_edges() -> None:
    params = KDFollowGipps.GippsParams()
    pair = KDFollowGipps.gipps_rollout([], [], [], params, 1.0, 0.0)
    assert len(pair) == 0
    with pytest.raises(DataError):
        KDFollowGipps.gipps_rollout([0.0, 0.1], [10.0, 11.0], [10.0, 10.0], params, params.s_eff, 10.0)


def test_synthetic_dataset(tmp_path) -> None:
    assert synthetic_pairs(n_pairs=0) == []
    pairs = synthetic_pairs(n_pairs=3, duration=10.0)
    assert len(pairs) == 9
    assert [p.pair_id for p in pairs[:3]] == ["AV-HDV-0001", "AV-HDV-0002", "AV-HDV-0003"]
    assert all(len(p) == 101 for p in pairs)
    assert all(p.lead_speed.min() >= 0 and p.foll_speed.min() >= 0 for p in pairs)

    first = os.path.join(str(tmp_path), "first.csv")
    second = os.path.join(str(tmp_path), "second.csv")
    KDFollowData.write_pairs_csv(pairs, first)
    KDFollowData.write_pairs_csv(synthetic_pairs(n_pairs=3, duration=10.0), second)
    with open(first, "rb") as a, open(second, "rb") as b:
        assert a.read() == b.read()
    reloaded = KDFollowData.load_pairs(first)
    assert sorted(p.pair_id for p in reloaded) == sorted(p.pair_id for p in pairs)

    # presets are not changed by a different reaction time
    presets = default_presets()
    KDFollowGipps.generate_synthetic_dataset(presets, 1, 1, 5.0, tau=2.0)
    assert presets[HDV_HDV].means.tau == 1.0


def test_gipps_predictor_reproduces_rollout() -> None:
    preset = default_presets()[HDV_HDV]
    pair, params = KDFollowGipps.generate_pair(preset, numpy.random.default_rng(3), "X", 30.0, 0.1, noisy=False)
    windows = KDFollowData.make_windows([pair])
    model = KDFollowGipps.GippsModel(params)
    prediction = model.predict(windows.features, windows.times, windows.pair_ids)
    assert numpy.max(numpy.abs(prediction - windows.targets)) < 1e-6


def test_gipps_fit() -> None:
    preset = default_presets()[HDV_AV]
    pair, params = KDFollowGipps.generate_pair(preset, numpy.random.default_rng(8), "F", 30.0, 0.1, noisy=False)
    start = preset.means
    fitted = KDFollowGipps.fit_gipps_params([pair], start)
    windows = KDFollowData.make_windows([pair])
    assert (KDFollowGipps.fit_objective(windows, fitted, 0.1) <=
            KDFollowGipps.fit_objective(windows, start.replace(b_hat=start.b + KDFollowGipps.B_HAT_OFFSET), 0.1))
    assert math.isclose(fitted.b_hat, fitted.b + KDFollowGipps.B_HAT_OFFSET)

    short = pair.subset(0, 5, 0)
    assert KDFollowGipps.fit_gipps_params([short], start) is start

    model = KDFollowGipps.fit_gipps_model([pair, short.subset(0, 5, 0)], KDFollowGipps.GippsParams(),
                                          {HDV_AV: preset})
    assert set(model.params_by_pair) == {"F"}


# ---------- evaluation ----------
def test_rmse() -> None:
    assert math.isclose(KDFollowEval.rmse([1, 2], [0, 0]), math.sqrt(2.5))
    x = numpy.array([3.0, 1.0, 4.0, 1.5])
    y = numpy.array([2.0, 7.0, 1.0, 8.0])
    assert KDFollowEval.rmse(x, x) == 0
    permutation = [2, 0, 3, 1]
    assert math.isclose(KDFollowEval.rmse(x[permutation], y[permutation]), KDFollowEval.rmse(x, y))
    assert KDFollowEval.rmse([], []) is None
    with pytest.raises(ShapeError):
        KDFollowEval.rmse([1, 2], [1])


def test_rmse_by_group_and_pair() -> None:
    pairs = KDFollowData.load_pairs(FIXTURE_PAIRS)
    windows = KDFollowData.make_windows(pairs[:2])
    result = KDFollowEval.rmse_by_group(ZeroModel(), windows)
    assert result[HDV_HDV] is None
    assert math.isclose(result[AV_HDV], math.sqrt(numpy.mean(pairs[0].foll_speed[10:]**2)))
    rows = KDFollowEval.per_pair_rmse(ZeroModel(), windows)
    assert [row[:3] for row in rows] == [["P001", AV_HDV, 40], ["P002", HDV_AV, 40]]


def test_replay_rollout() -> None:
    preset = default_presets()[HDV_HDV]
    pair, _ = KDFollowGipps.generate_pair(preset, numpy.random.default_rng(4), "Y", 30.0, 0.1, noisy=False)
    result = KDFollowEval.closed_loop_rollout(ReplayModel(pair), pair)
    assert numpy.max(numpy.abs(result.foll_pos - pair.foll_pos[10:])) < 1e-9
    assert numpy.array_equal(result.t, pair.t[10:])
    observed = KDFollowStats.ttc_array(pair.spacing[10:], pair.speed_diff[10:])
    assert math.isclose(result.min_ttc, observed.min(), rel_tol=1e-9)
    assert not result.collision


def test_rollout_stopping_and_collision() -> None:
    t = numpy.arange(100) * 0.1
    pair = KDFollowData.TrajectoryPair("C", HDV_HDV, t, 30 + 10 * t, 10 * t, numpy.full(100, 10.0),
                                       numpy.full(100, 10.0))
    result = KDFollowEval.closed_loop_rollout(ZeroModel(), pair)
    assert math.isinf(result.min_ttc)
    assert not result.collision
    assert len(result.t) == 90

    result = KDFollowEval.closed_loop_rollout(ConstantModel(30.0), pair)
    assert result.collision
    assert result.min_ttc == 0
    assert result.ttc[-1] == 0
    assert len(result.t) < 90
    assert numpy.all(result.running_min[1:] <= result.running_min[:-1])

    result = KDFollowEval.closed_loop_rollout(ZeroModel(), pair, horizon=2.0)
    assert len(result.t) == 20
    with pytest.raises(DataError):
        KDFollowEval.closed_loop_rollout(ZeroModel(), pair.subset(0, 10, 0))


def test_gipps_closed_loop() -> None:
    presets = default_presets()
    pairs = []
    params_by_pair = {}
    for i, pair_class in enumerate(KDFollowConstants.PAIR_CLASSES):
        pair, params = KDFollowGipps.generate_pair(presets[pair_class], numpy.random.default_rng(50 + i),
                                                   "G{}".format(i), 30.0, 0.1, noisy=False)
        pairs.append(pair)
        params_by_pair[pair.pair_id] = params
    model = KDFollowGipps.GippsModel(KDFollowGipps.GippsParams(), params_by_pair=params_by_pair)
    for pair, result in KDFollowEval.rollout_pairs(model, pairs, threads=2):
        assert not result.collision
        assert numpy.all(result.running_min[1:] <= result.running_min[:-1])
        assert numpy.max(numpy.abs(result.foll_speed - pair.foll_speed[10:])) < 1e-6
    minimum, collisions = KDFollowEval.min_ttc_by_group(model, pairs)
    assert collisions == {AV_HDV: 0, HDV_AV: 0, HDV_HDV: 0}


def test_speed_profiles(tmp_path) -> None:
    pairs = synthetic_pairs(n_pairs=1, duration=10.0, noisy=False)[:2]
    models = {"GIPPS": KDFollowGipps.GippsModel(KDFollowGipps.GippsParams()), "ZERO": ZeroModel(),
              "LEAD": LeadSpeedModel(), "CONST": ConstantModel(8.0)}
    written = KDFollowEval.speed_profile_export(models, pairs, str(tmp_path))
    assert len(written) == 8
    frame = pandas.read_csv(KDFollowEval.profile_filename(str(tmp_path), pairs[0], "CONST"))
    assert list(frame.columns) == ["t", "observed", "predicted"]
    assert numpy.allclose(frame["t"], pairs[0].t[10:], atol=1e-6)
    assert numpy.allclose(frame["predicted"], 8.0)
    segment = pairs[0].subset(0, 50, 2)
    assert KDFollowEval.profile_filename("out", segment, "ZERO").endswith("profile_AV-HDV-0001_seg2_ZERO.csv")


def test_compute_metering() -> None:
    split, normalizer, _ = synthetic_dataset(n_pairs=3)
    result = KDFollowEval.compute_metering(ZeroModel(), split.test, batch=10, repetitions=2)
    assert result.batch == 1000 and result.repetitions == 5
    assert result.median_seconds >= 0 and result.iqr_seconds >= 0
    assert math.isclose(result.seconds_per_10k, result.median_seconds * 10)
    assert result.multiply_adds is None
    student = KDFollowDistill.TrainedModel("MLP", KDFollowNetwork.init_weights(KDFollowNetwork.MlpSpec(), 1),
                                           normalizer, [])
    assert KDFollowEval.compute_metering(student, split.test).multiply_adds == 5460


def test_teacher_slower_than_student() -> None:
    split, normalizer, _ = synthetic_dataset(n_pairs=3)
    teacher = KDFollowDistill.TrainedModel(
        "LSTM", KDFollowNetwork.init_weights(KDFollowNetwork.LstmSpec(3, (128, 32), 0.0, 0, 10), 1), normalizer, [])
    student = KDFollowDistill.TrainedModel("MLP", KDFollowNetwork.init_weights(KDFollowNetwork.MlpSpec(), 1),
                                           normalizer, [])
    teacher_time = KDFollowEval.compute_metering(teacher, split.test)
    student_time = KDFollowEval.compute_metering(student, split.test)
    assert teacher_time.median_seconds > student_time.median_seconds
    assert teacher_time.multiply_adds > 10 * student_time.multiply_adds


def test_evaluate_and_write_report(tmp_path) -> None:
    pairs = synthetic_pairs(n_pairs=1, duration=10.0, noisy=False)
    windows = KDFollowData.make_windows(pairs)
    models = {"GIPPS": KDFollowGipps.GippsModel(KDFollowGipps.GippsParams()), "ZERO": ZeroModel()}
    report = KDFollowEval.evaluate_models(models, windows, pairs, profile_pairs=2)
    print_test_output(KDFollowEval.report_blocks(report))
    assert report.models == ["GIPPS", "ZERO"]
    assert len(report.per_pair_rows()) == 2
    assert len(report.metering) == 2
    written = KDFollowEval.write_report(report, str(tmp_path), "abc123")
    assert all("abc123" in os.path.basename(f) for f in written)
    with open(os.path.join(str(tmp_path), "eval_abc123.json"), "r") as infile:
        document = json.load(infile)
    assert document["models"] == ["GIPPS", "ZERO"]
    assert document["run_hash"] == "abc123"
    assert set(document["rmse_by_group"]["ZERO"]) == set(KDFollowConstants.PAIR_CLASSES)
    assert os.path.isfile(os.path.join(str(tmp_path), "eval_compute_abc123.csv"))


# ---------- command line ----------
TINY_CONFIG = """# small networks so the whole pipeline runs in seconds
synth.pairs = 5
synth.duration = 12
teacher.layers = 4
teacher.epochs = 1
teacher.batch_size = 64
student.hidden = 8
student.epochs = 1
student.batch_size = 64
search.budget = 2
eval.profile_pairs = 2
"""


def write_tiny_config(tmp_path) -> str:
    filename = os.path.join(str(tmp_path), "tiny.config")
    with open(filename, "w") as outfile:
        outfile.write(TINY_CONFIG)
    return filename


def read_summary(out_dir: str) -> dict:
    with open(os.path.join(out_dir, "summary.json"), "r") as infile:
        return json.load(infile)


def test_cli_synth_and_analyze(tmp_path) -> None:
    out_dir = os.path.join(str(tmp_path), "run")
    assert main(["synth", "--pairs", "4", "--duration", "20", "--seed", "7", "--out", out_dir]) == 0
    assert os.path.isfile(os.path.join(out_dir, "pairs.csv"))
    assert read_summary(out_dir)["results"]["pairs"] == {AV_HDV: 4, HDV_AV: 4, HDV_HDV: 4}
    assert main(["analyze", "--out", out_dir]) == 0
    for name in ("speed_variability.csv", "moments.csv", "table1.csv", "anova.csv", "report.txt",
                 "manifest.txt", "resolved.config"):
        assert os.path.isfile(os.path.join(out_dir, name))


def test_cli_synth_is_deterministic(tmp_path) -> None:
    outputs = []
    for name in ("a", "b"):
        out_dir = os.path.join(str(tmp_path), name)
        assert main(["synth", "--pairs", "2", "--duration", "10", "--seed", "3", "--out", out_dir]) == 0
        with open(os.path.join(out_dir, "pairs.csv"), "rb") as infile:
            pairs_bytes = infile.read()
        with open(os.path.join(out_dir, "summary.json"), "rb") as infile:
            summary_bytes = infile.read()
        outputs.append((pairs_bytes, summary_bytes))
    assert outputs[0] == outputs[1]


def test_cli_errors(tmp_path) -> None:
    out_dir = os.path.join(str(tmp_path), "empty")
    assert main(["distill", "--out", out_dir]) == KDFollowConstants.EXIT_DATA
    summary = read_summary(out_dir)
    assert summary["exit_code"] == KDFollowConstants.EXIT_DATA
    assert "windows.dcfw" in summary["error"]

    assert main(["synth", "--config", os.path.join(str(tmp_path), "missing.config"),
                 "--out", out_dir]) == KDFollowConstants.EXIT_CONFIG
    filename = os.path.join(str(tmp_path), "unknown.config")
    with open(filename, "w") as outfile:
        outfile.write("teacher.width = 10\n")
    assert main(["synth", "--config", filename, "--out", out_dir]) == KDFollowConstants.EXIT_CONFIG
    assert main(["sweep", "--alphas", "0.5,1.5", "--out", out_dir]) == KDFollowConstants.EXIT_CONFIG


def test_cli_pipeline(tmp_path) -> None:
    config = write_tiny_config(tmp_path)
    out_dir = os.path.join(str(tmp_path), "pipeline")
    common = ["--config", config, "--out", out_dir, "--seed", "5"]
    assert main(["synth"] + common) == 0
    assert main(["ingest"] + common) == 0
    windows = read_summary(out_dir)["results"]["windows"]
    assert windows["train"] > 0 and windows["validation"] > 0 and windows["test"] > 0

    assert main(["train"] + common) == 0
    assert os.path.isfile(os.path.join(out_dir, "teacher.dcfn"))
    assert os.path.isfile(os.path.join(out_dir, "training_MLP.csv"))
    assert main(["distill", "--alpha", "0.5"] + common) == 0
    assert read_summary(out_dir)["results"]["alpha"] == 0.5

    assert main(["sweep", "--alphas", "0.1:0.9:0.1"] + common) == 0
    sweep = pandas.read_csv(os.path.join(out_dir, "alpha_sweep.csv"))
    assert len(sweep) == 9
    assert list(sweep.columns) == ["alpha", "rmse", "error_difference"]

    assert main(["evaluate"] + common) == 0
    summary = read_summary(out_dir)
    assert set(summary["results"]["rmse"]) == {"LSTM", "MLP", "KDNN", "GIPPS"}
    assert any(name.startswith("eval_") and name.endswith(".json") for name in summary["artifacts"])
    assert any(name.startswith("profile_") for name in summary["artifacts"])

    assert main(["rollout", "--horizon", "5"] + common) == 0
    for name in ("LSTM", "MLP", "KDNN", "GIPPS"):
        assert os.path.isfile(os.path.join(out_dir, "rollout_{}.csv".format(name)))
    assert set(read_summary(out_dir)["results"]["collisions"]) == {"LSTM", "MLP", "KDNN", "GIPPS"}

    assert main(["bench"] + common) == 0
    results = read_summary(out_dir)["results"]
    assert results["multiply_add_ratio"] > 1
    assert set(results["seconds_per_10k"]) == {"LSTM", "MLP", "KDNN", "GIPPS"}

    # a searched student keeps working with every later stage
    assert main(["train", "--model", "student", "--search"] + common) == 0
    assert "MLP_search" in read_summary(out_dir)["results"]
    assert main(["distill"] + common) == 0
    assert main(["evaluate"] + common) == 0


def read_run_directory(out_dir: str) -> dict:
    """
    the bytes of every file in a run directory, with the manifest's creation time left out
    """
    contents = {}
    for name in sorted(os.listdir(out_dir)):
        with open(os.path.join(out_dir, name), "rb") as infile:
            data = infile.read()
        if name == "manifest.txt":
            data = b"".join(line for line in data.splitlines(keepends=True) if not line.startswith(b"created"))
        contents[name] = data
    return contents


def test_cli_pipeline_is_reproducible(tmp_path) -> None:
    config = write_tiny_config(tmp_path)
    runs = []
    for name in ("a", "b"):
        out_dir = os.path.join(str(tmp_path), name)
        common = ["--config", config, "--out", out_dir, "--seed", "5", "--threads", "1"]
        for command in (["synth"], ["ingest"], ["train"], ["distill"], ["sweep", "--alphas", "0.5"], ["evaluate"]):
            assert main(command + common) == 0
        runs.append(read_run_directory(out_dir))
    assert sorted(runs[0]) == sorted(runs[1])
    for name in runs[0]:
        assert runs[0][name] == runs[1][name], name
    assert b"run.out" not in runs[0]["resolved.config"]
    assert b"run.seed = 5" in runs[0]["resolved.config"]


def test_cli_sweep_over_seeds(tmp_path) -> None:
    config = write_tiny_config(tmp_path)
    out_dir = os.path.join(str(tmp_path), "ordering")
    assert main(["sweep", "--alphas", "0.5", "--seeds", "2", "--config", config, "--out", out_dir,
                 "--seed", "5"]) == 0
    frame = pandas.read_csv(os.path.join(out_dir, "ordering.csv"))
    assert list(frame.columns) == ["seed", "teacher_rmse", "student_rmse", "best_alpha", "best_kdnn_rmse"]
    assert list(frame["seed"]) == [5, 6]
    assert list(frame["best_alpha"]) == [0.5, 0.5]
    assert numpy.all(frame["teacher_rmse"] > 0) and numpy.all(frame["best_kdnn_rmse"] > 0)
    results = read_summary(out_dir)["results"]
    assert results["seeds"] == 2
    assert 0 <= results["teacher_no_worse"] <= 2 and 0 <= results["kdnn_no_worse"] <= 2
    assert main(["sweep", "--alphas", "0.5", "--seeds", "0", "--out", out_dir]) == KDFollowConstants.EXIT_CONFIG


def test_cli_divergence_exit_code(tmp_path, monkeypatch) -> None:
    config = write_tiny_config(tmp_path)
    out_dir = os.path.join(str(tmp_path), "diverged")
    common = ["--config", config, "--out", out_dir, "--seed", "5"]
    assert main(["synth"] + common) == 0
    assert main(["ingest"] + common) == 0

    def non_finite_loss(prediction, target) -> tuple:
        prediction = numpy.asarray(prediction, dtype=float)
        return math.nan, numpy.zeros_like(prediction)

    monkeypatch.setattr(KDFollowNetwork, "mse_loss", non_finite_loss)
    assert main(["train", "--model", "student"] + common) == KDFollowConstants.EXIT_DIVERGENCE
    summary = read_summary(out_dir)
    assert summary["exit_code"] == KDFollowConstants.EXIT_DIVERGENCE
    assert summary["error"] is not None
