"""
Descriptive statistics of car-following behavior: spacing-binned speed variability, moments of the speed
difference, one-way ANOVA across pair classes and time-to-collision summaries
"""

import logging
import math
from typing import Optional

import numpy
import scipy.special
import scipy.stats

import KDFollowCharts
import KDFollowConstants
from KDFollowConstants import group_summary, anova_result
from KDFollowLanguage import get_text
from KDFollowMessages import DataError
from KDFollowUtils import create_output_table, format_number

LOG = logging.getLogger(__name__)

CLOSED_LEFT = "left"
CLOSED_RIGHT = "right"


class SpacingBins:
    """
    edges of spacing bins in meters

    Left-closed bins, [a, b), are used for the variability and moment figures; right-closed bins, (a, b], for
    the spacing categories of the ANOVA table
    """
    def __init__(self, edges, closed: str = CLOSED_LEFT):
        self.edges = numpy.asarray(edges, dtype=float)
        if len(self.edges) < 2 or numpy.any(numpy.diff(self.edges) <= 0):
            raise DataError("bin edges must be strictly increasing with at least two edges")
        self.closed = closed

    def n_bins(self) -> int:
        return len(self.edges) - 1

    def assign(self, values) -> numpy.ndarray:
        """
        bin index of each value, -1 when outside every bin
        """
        index = numpy.digitize(values, self.edges, right=(self.closed == CLOSED_RIGHT)) - 1
        index[(index < 0) | (index >= self.n_bins())] = -1
        return index

    def label(self, i: int) -> str:
        if self.closed == CLOSED_RIGHT:
            return "({:g}, {:g}]".format(self.edges[i], self.edges[i+1])
        return "[{:g}, {:g})".format(self.edges[i], self.edges[i+1])

    def midpoints(self) -> list:
        return [float(a + b) / 2 for a, b in zip(self.edges, self.edges[1:])]


def pooled_variable(pairs: list, pair_class: str, variable: str) -> tuple:
    """
    concatenate spacing and a named per-point variable over every pair of a class
    """
    spacing = []
    values = []
    for pair in pairs:
        if pair.pair_class == pair_class:
            x = getattr(pair, variable)
            if x is None:
                raise DataError("pair {}: {} is not available; derive kinematics first".format(pair.label(),
                                                                                               variable))
            spacing.append(pair.spacing)
            values.append(x)
    if len(spacing) == 0:
        return numpy.zeros(0), numpy.zeros(0)
    return numpy.concatenate(spacing), numpy.concatenate(values)


# ---------- moments ----------
def sample_std(sample) -> Optional[float]:
    sample = numpy.asarray(sample, dtype=float)
    if len(sample) < 2:
        return None
    return float(numpy.std(sample, ddof=1))


def check_moment_sample(sample, min_n: int) -> numpy.ndarray:
    sample = numpy.asarray(sample, dtype=float)
    if len(sample) < min_n:
        raise DataError("at least {} values are needed, {} given".format(min_n, len(sample)))
    if numpy.all(sample == sample[0]):
        raise DataError(get_text("degenerate sample"))
    return sample


def skewness(sample) -> float:
    """
    Fisher-Pearson coefficient of skewness, m3/m2^1.5, with population central moments
    """
    return float(scipy.stats.skew(check_moment_sample(sample, 3), bias=True))


def kurtosis(sample) -> float:
    """
    excess kurtosis, m4/m2^2 - 3, with population central moments
    """
    return float(scipy.stats.kurtosis(check_moment_sample(sample, 4), fisher=True, bias=True))


def optional_moment(func, sample) -> Optional[float]:
    try:
        return func(sample)
    except DataError:
        return None


def summarize_group(pair_class: str, bin_index: int, sample) -> group_summary:
    sample = numpy.asarray(sample, dtype=float)
    n = len(sample)
    mean = float(numpy.mean(sample)) if n > 0 else None
    return group_summary(pair_class, bin_index, n, mean, sample_std(sample), optional_moment(skewness, sample),
                         optional_moment(kurtosis, sample))


def speed_variability(pairs: list, bins: SpacingBins) -> dict:
    """
    sample standard deviation of follower speed in every (class, spacing bin) cell; empty cells are None
    """
    result = {}
    for pair_class in KDFollowConstants.PAIR_CLASSES:
        spacing, speed = pooled_variable(pairs, pair_class, "foll_speed")
        index = bins.assign(spacing)
        result[pair_class] = [sample_std(speed[index == b]) for b in range(bins.n_bins())]
    return result


def moment_summaries(pairs: list, bins: SpacingBins, variable: str = "speed_diff") -> list:
    """
    mean, standard deviation, skewness and excess kurtosis of a variable (speed difference or follower
    acceleration) in every (class, spacing bin) cell
    """
    summaries = []
    for pair_class in KDFollowConstants.PAIR_CLASSES:
        spacing, values = pooled_variable(pairs, pair_class, variable)
        index = bins.assign(spacing)
        for b in range(bins.n_bins()):
            summaries.append(summarize_group(pair_class, b, values[index == b]))
    return summaries


# ---------- ANOVA ----------
def one_way_anova(groups: list) -> anova_result:
    """
    one-way analysis of variance across independent groups

    The p-value is the upper tail of the F-distribution, computed through the regularized incomplete beta
    function. With no variance within groups, F is 0 (p = 1) when the group means are equal and infinite
    (p = 0) otherwise
    """
    groups = [numpy.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2:
        raise DataError("ANOVA needs at least two groups")
    if any(len(g) < 2 for g in groups):
        raise DataError("every ANOVA group needs at least two observations")
    n_total = sum(len(g) for g in groups)
    df_between = len(groups) - 1
    df_within = n_total - len(groups)
    grand_mean = numpy.sum([numpy.sum(g) for g in groups]) / n_total
    ssb = 0
    ssw = 0
    for g in groups:
        group_mean = numpy.mean(g)
        ssb += len(g) * (group_mean - grand_mean)**2
        ssw += numpy.sum((g - group_mean)**2)
    if ssw == 0:
        if ssb == 0:
            return anova_result(0.0, 1.0, df_between, df_within)
        return anova_result(math.inf, 0.0, df_between, df_within)
    f = float((ssb / df_between) / (ssw / df_within))
    p = float(scipy.special.betainc(df_within / 2, df_between / 2, df_within / (df_within + df_between * f)))
    return anova_result(f, min(max(p, 0.0), 1.0), df_between, df_within)


# ---------- time-to-collision ----------
def ttc(spacing: float, speed_diff: float) -> float:
    """
    time-to-collision: spacing over closing speed when the follower is closing in, infinite otherwise
    """
    if spacing < 0:
        raise DataError("negative spacing {}".format(spacing))
    if speed_diff > 0:
        return spacing / speed_diff
    return math.inf


def ttc_array(spacing, speed_diff) -> numpy.ndarray:
    spacing = numpy.asarray(spacing, dtype=float)
    speed_diff = numpy.asarray(speed_diff, dtype=float)
    if numpy.any(spacing < 0):
        raise DataError("negative spacing {}".format(spacing[spacing < 0][0]))
    result = numpy.full(spacing.shape, math.inf)
    closing = speed_diff > 0
    result[closing] = spacing[closing] / speed_diff[closing]
    return result


def finite_mean(values) -> Optional[float]:
    values = numpy.asarray(values, dtype=float)
    values = values[numpy.isfinite(values)]
    if len(values) == 0:
        return None
    return float(numpy.mean(values))


def category_samples(pairs: list, categories: SpacingBins, pair_class: str, c: int) -> dict:
    spacing, speed = pooled_variable(pairs, pair_class, "foll_speed")
    _, accel = pooled_variable(pairs, pair_class, "foll_accel")
    _, speed_diff = pooled_variable(pairs, pair_class, "speed_diff")
    inside = categories.assign(spacing) == c
    ttc_values = ttc_array(spacing[inside], speed_diff[inside])
    return {"speed": speed[inside], "accel": accel[inside], "ttc": ttc_values[numpy.isfinite(ttc_values)]}


def summarize_table1(pairs: list, categories: SpacingBins) -> list:
    """
    rows of (category, class, n, mean following speed, mean acceleration, mean finite TTC)
    """
    rows = []
    for c in range(categories.n_bins()):
        for pair_class in KDFollowConstants.PAIR_CLASSES:
            samples = category_samples(pairs, categories, pair_class, c)
            n = len(samples["speed"])
            rows.append([categories.label(c), pair_class, n,
                         float(numpy.mean(samples["speed"])) if n > 0 else None,
                         float(numpy.mean(samples["accel"])) if n > 0 else None,
                         finite_mean(samples["ttc"])])
    return rows


def anova_table(pairs: list, categories: SpacingBins) -> list:
    """
    one-way ANOVA across pair classes, within each spacing category, of following speed, acceleration and
    finite TTC; cells which cannot be tested hold None
    """
    rows = []
    for c in range(categories.n_bins()):
        samples = [category_samples(pairs, categories, pair_class, c)
                   for pair_class in KDFollowConstants.PAIR_CLASSES]
        for variable, label in (("speed", "Mean Following Speed"), ("accel", "Mean Acceleration"),
                                ("ttc", "Time-to-Collision")):
            groups = [s[variable] for s in samples if len(s[variable]) >= 2]
            result = None
            if len(groups) >= 2 and sum(len(g) for g in groups) > len(groups):
                result = one_way_anova(groups)
            else:
                LOG.warning("ANOVA skipped for %s in %s: too few observations", label, categories.label(c))
            rows.append([categories.label(c), get_text(label), result])
    return rows


# ---------- reports ----------
def variability_block(variability: dict, bins: SpacingBins, decimal_places: int = 3) -> list:
    output = ["→ {}".format(get_text("Speed Variability"))]
    headers = [get_text("Class")] + [bins.label(b) for b in range(bins.n_bins())]
    table = [[pair_class] + values for pair_class, values in variability.items()]
    create_output_table(output, table, headers, [""] + ["f"]*bins.n_bins(), decimal_places)
    return output


def moments_block(summaries: list, bins: SpacingBins, variable: str, decimal_places: int = 3) -> list:
    output = ["→ {}: {}".format(get_text("Moments"), variable)]
    table = [[s.pair_class, bins.label(s.bin), s.n, s.mean, s.std, s.skewness, s.kurtosis] for s in summaries]
    create_output_table(output, table, [get_text("Class"), get_text("bin"), get_text("n"), get_text("Mean"),
                                        get_text("Std"), get_text("Skewness"), get_text("Kurtosis")],
                        ["", "", "d", "f", "f", "f", "f"], decimal_places)
    return output


def table1_block(rows: list, anova_rows: list, decimal_places: int = 2) -> list:
    output = ["→ {}".format(get_text("Statistical Analysis with ANOVA"))]
    create_output_table(output, rows, [get_text("Category"), get_text("Class"), get_text("n"),
                                       get_text("Mean Following Speed"), get_text("Mean Acceleration"),
                                       get_text("Time-to-Collision")],
                        ["", "", "d", "f", "f", "f"], decimal_places)
    output.append("")
    table = []
    for category, variable, result in anova_rows:
        if result is None:
            table.append([category, variable, None, None, None, None])
        else:
            table.append([category, variable, result.f, result.p, result.df_between, result.df_within])
    create_output_table(output, table, [get_text("Category"), get_text("Variable"), get_text("F"), get_text("p"),
                                        get_text("df between"), get_text("df within")],
                        ["", "", "f", "f", "d", "d"], 4)
    return output


def descriptive_analysis(pairs: list, bin_edges, category_edges, moment_variable: str = "speed_diff") -> tuple:
    """
    run every descriptive analysis on filtered pairs with derived kinematics

    returns the report blocks, chart data keyed by name and a dictionary of the raw results
    """
    bins = SpacingBins(bin_edges, CLOSED_LEFT)
    categories = SpacingBins(category_edges, CLOSED_RIGHT)
    output_blocks = []
    chart_data = {}

    variability = speed_variability(pairs, bins)
    output_blocks.append(variability_block(variability, bins))
    chart = KDFollowCharts.chart_binned_statistic("Speed Variability", "Speed standard deviation (m/s)",
                                                  bins.edges, variability)
    chart_data["speed_variability"] = chart

    moments = {}
    for variable in ("speed_diff", "foll_accel"):
        moments[variable] = moment_summaries(pairs, bins, variable)
    # the report leads with the configured variable
    for variable in sorted(moments, key=lambda v: v != moment_variable):
        output_blocks.append(moments_block(moments[variable], bins, variable))
        for statistic in ("skewness", "kurtosis"):
            values = {}
            for pair_class in KDFollowConstants.PAIR_CLASSES:
                values[pair_class] = [getattr(s, statistic) for s in moments[variable] if s.pair_class == pair_class]
            chart_data["{}_{}".format(statistic, variable)] = KDFollowCharts.chart_binned_statistic(
                "{} of {}".format(statistic.capitalize(), variable), statistic.capitalize(), bins.edges, values)

    table1 = summarize_table1(pairs, categories)
    anova_rows = anova_table(pairs, categories)
    output_blocks.append(table1_block(table1, anova_rows))
    for category, variable, result in anova_rows:
        if result is not None:
            LOG.info("ANOVA %s %s: F = %s, p = %s", category, variable, format_number(result.f, decimals=3),
                     format_number(result.p, decimals=4))

    values = {"speed_variability": variability, "moments": moments, "table1": table1, "anova": anova_rows}
    return output_blocks, chart_data, values
