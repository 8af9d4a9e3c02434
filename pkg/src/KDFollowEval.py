"""
Evaluation of trained models: prediction errors overall, by pair group and by pair, closed-loop rollouts with
minimum time-to-collision, speed profiles for plotting, and compute metering
"""

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy
import pandas

try:
    import resource
except ImportError:  # not available on Windows
    resource = None

import KDFollowCharts
import KDFollowConstants
import KDFollowNetwork
from KDFollowConstants import metering_result, rollout_result
from KDFollowData import TrajectoryPair, WindowSet, history_steps, make_windows
from KDFollowLanguage import get_text
from KDFollowMessages import DataError, ShapeError, report_warning
from KDFollowStats import ttc_array
from KDFollowUtils import create_output_table, format_number, write_json

LOG = logging.getLogger(__name__)

MIN_BENCH_BATCH = 1000
MIN_REPETITIONS = 5


# ---------- prediction error ----------
def rmse(predictions, targets) -> Optional[float]:
    predictions = numpy.asarray(predictions, dtype=float)
    targets = numpy.asarray(targets, dtype=float)
    if predictions.shape != targets.shape:
        raise ShapeError("{} predictions for {} targets".format(len(predictions), len(targets)))
    if len(predictions) == 0:
        return None
    return float(numpy.sqrt(numpy.mean((predictions - targets)**2)))


def predict_windows(model, windows: WindowSet) -> numpy.ndarray:
    if len(windows) == 0:
        return numpy.zeros(0)
    return numpy.asarray(model.predict(windows.features, windows.times, windows.pair_ids), dtype=float)


def rmse_by_group(model, windows: WindowSet, prediction: Optional[numpy.ndarray] = None) -> dict:
    """
    RMSE (m/s) for every pair class; a class without windows gets None and a warning
    """
    if prediction is None:
        prediction = predict_windows(model, windows)
    classes = numpy.asarray(windows.pair_classes, dtype=object)
    result = {}
    for pair_class in KDFollowConstants.PAIR_CLASSES:
        rows = classes == pair_class
        if not numpy.any(rows):
            report_warning(get_text("RMSE by pair group"), get_text("no empty group").format(pair_class))
            result[pair_class] = None
        else:
            result[pair_class] = rmse(prediction[rows], windows.targets[rows])
    return result


def per_pair_rmse(model, windows: WindowSet, pair_ids: Optional[list] = None,
                  prediction: Optional[numpy.ndarray] = None) -> list:
    """
    rows of [pair id, class, window count, RMSE] in pair id order
    """
    if prediction is None:
        prediction = predict_windows(model, windows)
    ids = numpy.asarray(windows.pair_ids, dtype=object)
    class_of = windows.class_of_pair()
    if pair_ids is None:
        pair_ids = windows.pair_id_list()
    rows = []
    for pair_id in pair_ids:
        index = ids == pair_id
        rows.append([pair_id, class_of.get(pair_id, ""), int(numpy.sum(index)),
                     rmse(prediction[index], windows.targets[index])])
    return rows


# ---------- closed loop ----------
def closed_loop_rollout(model, pair: TrajectoryPair, horizon: float = 0.0,
                        history: float = KDFollowConstants.DEFAULT_HISTORY,
                        dt: float = KDFollowConstants.DEFAULT_DT) -> rollout_result:
    """
    drive the follower with the model's own predictions behind the observed lead

    The first history/dt points are the observed warm-up. From then on every predicted speed (clamped at zero) is
    integrated trapezoidally into a follower position, and spacing and speed difference are recomputed from the
    simulated state. A horizon of zero runs to the end of the pair. If the spacing reaches zero the rollout stops
    and is recorded as a collision with a minimum TTC of zero
    """
    steps = history_steps(history, dt)
    n = len(pair)
    if n < steps + 1:
        raise DataError("pair {} has {} points, fewer than the {} step warm-up plus one".format(pair.label(), n,
                                                                                              steps))
    end = n if horizon <= 0 else min(n, steps + int(round(horizon / dt)))
    foll_pos = pair.foll_pos.copy()
    foll_speed = pair.foll_speed.copy()
    collision = False
    stop = end
    for q in range(steps, end):
        lead_speed = pair.lead_speed[q-steps:q]
        window = numpy.stack([pair.lead_pos[q-steps:q] - foll_pos[q-steps:q], lead_speed,
                              foll_speed[q-steps:q] - lead_speed], axis=1)
        speed = float(model.predict(window[numpy.newaxis], [pair.t[q-1]], [pair.pair_id])[0])
        foll_speed[q] = max(speed, 0.0)
        foll_pos[q] = foll_pos[q-1] + dt * (foll_speed[q-1] + foll_speed[q]) / 2
        if pair.lead_pos[q] - foll_pos[q] <= 0:
            collision = True
            stop = q + 1
            break
    simulated = slice(steps, stop)
    spacing = pair.lead_pos[simulated] - foll_pos[simulated]
    speed_diff = foll_speed[simulated] - pair.lead_speed[simulated]
    ttc = ttc_array(numpy.maximum(spacing, 0.0), speed_diff)
    if collision:
        ttc[-1] = 0.0
    running_min = numpy.minimum.accumulate(ttc) if len(ttc) > 0 else ttc
    min_ttc = float(running_min[-1]) if len(running_min) > 0 else math.inf
    if collision:
        LOG.warning("collision in closed-loop rollout of pair %s at t = %s", pair.label(), pair.t[stop-1])
    return rollout_result(pair.t[simulated], foll_pos[simulated], foll_speed[simulated], spacing, speed_diff, ttc,
                          running_min, min_ttc, collision)


def rollout_pairs(model, pairs: list, horizon: float = 0.0, history: float = KDFollowConstants.DEFAULT_HISTORY,
                  dt: float = KDFollowConstants.DEFAULT_DT, threads: int = 1) -> list:
    """
    closed-loop rollouts of every pair long enough for the warm-up, in input order
    """
    steps = history_steps(history, dt)
    usable = [pair for pair in pairs if len(pair) > steps]

    def run(pair):
        return closed_loop_rollout(model, pair, horizon, history, dt)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(run, usable))
    else:
        results = [run(pair) for pair in usable]
    return list(zip(usable, results))


def min_ttc_by_group(model, pairs: list, horizon: float = 0.0, history: float = KDFollowConstants.DEFAULT_HISTORY,
                     dt: float = KDFollowConstants.DEFAULT_DT, threads: int = 1) -> tuple:
    """
    smallest closed-loop minimum TTC per pair class, and the number of collisions per class
    """
    minimum = {pair_class: None for pair_class in KDFollowConstants.PAIR_CLASSES}
    collisions = {pair_class: 0 for pair_class in KDFollowConstants.PAIR_CLASSES}
    for pair, result in rollout_pairs(model, pairs, horizon, history, dt, threads):
        current = minimum.get(pair.pair_class)
        if current is None or result.min_ttc < current:
            minimum[pair.pair_class] = result.min_ttc
        if result.collision:
            collisions[pair.pair_class] += 1
    return minimum, collisions


# ---------- speed profiles ----------
def profile_filename(out_dir: str, pair: TrajectoryPair, model_name: str) -> str:
    label = pair.label().replace("#", "_seg")
    return os.path.join(out_dir, "profile_{}_{}.csv".format(label, model_name))


def speed_profile_export(models: dict, pairs: list, out_dir: str, history: float = KDFollowConstants.DEFAULT_HISTORY,
                         dt: float = KDFollowConstants.DEFAULT_DT) -> list:
    """
    one CSV per pair and model holding the observed follower speed and the one-step prediction on the observed
    time grid; returns the file names written
    """
    steps = history_steps(history, dt)
    written = []
    for pair in pairs:
        if len(pair) <= steps:
            LOG.debug("pair %s too short for a speed profile", pair.label())
            continue
        windows = make_windows([pair], history, dt)
        for name, model in models.items():
            frame = pandas.DataFrame({"t": pair.t[steps:], "observed": pair.foll_speed[steps:],
                                      "predicted": predict_windows(model, windows)})
            filename = profile_filename(out_dir, pair, name)
            frame.to_csv(filename, index=False, float_format="%.6f", lineterminator="\n")
            written.append(filename)
    return written


# ---------- compute ----------
def peak_rss_kb() -> Optional[int]:
    if resource is None:
        return None
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)


def multiply_adds_of(model) -> Optional[int]:
    spec = getattr(model, "spec", None)
    if spec is None:
        return None
    return KDFollowNetwork.count_multiply_adds(spec)


def bench_features(windows: WindowSet, batch: int) -> tuple:
    """
    exactly batch windows, cycling through the available ones
    """
    if len(windows) == 0:
        raise DataError("no windows to benchmark")
    index = numpy.arange(batch) % len(windows)
    return windows.features[index], windows.times[index], [windows.pair_ids[i] for i in index]


def compute_metering(model, windows: WindowSet, batch: int = MIN_BENCH_BATCH,
                     repetitions: int = MIN_REPETITIONS, name: Optional[str] = None) -> metering_result:
    """
    median and interquartile range of the wall time to predict a batch, after one warm-up call
    """
    batch = max(batch, MIN_BENCH_BATCH)
    repetitions = max(repetitions, MIN_REPETITIONS)
    features, times, pair_ids = bench_features(windows, batch)
    model.predict(features, times, pair_ids)
    elapsed = []
    for _ in range(repetitions):
        start = time.perf_counter()
        model.predict(features, times, pair_ids)
        elapsed.append(time.perf_counter() - start)
    q1, median, q3 = numpy.percentile(elapsed, [25, 50, 75])
    if name is None:
        name = getattr(model, "name", "")
    return metering_result(name, batch, repetitions, float(median), float(q3 - q1), float(median) * 10000 / batch,
                           multiply_adds_of(model), peak_rss_kb())


# ---------- report ----------
class EvalReport:
    """
    every metric of an evaluation, keyed by model name in the order the models were given
    """
    def __init__(self):
        self.models = []
        self.overall = {}
        self.by_group = {}
        self.per_pair = {}
        self.min_ttc = {}
        self.collisions = {}
        self.metering = []
        self.run_hash = ""

    def per_pair_rows(self) -> list:
        """
        one row per pair, one RMSE column per model
        """
        rows = []
        if len(self.models) == 0:
            return rows
        first = self.per_pair[self.models[0]]
        for i, (pair_id, pair_class, n, _) in enumerate(first):
            rows.append([pair_id, pair_class, n] + [self.per_pair[name][i][3] for name in self.models])
        return rows

    def to_dict(self) -> dict:
        return {"run_hash": self.run_hash,
                "models": self.models,
                "rmse": self.overall,
                "rmse_by_group": self.by_group,
                "rmse_by_pair": [dict(zip(["pair_id", "pair_type", "windows"] + self.models, row))
                                 for row in self.per_pair_rows()],
                "min_ttc_by_group": self.min_ttc,
                "collisions_by_group": self.collisions,
                "compute": [m._asdict() for m in self.metering]}


def evaluate_models(models: dict, test: WindowSet, test_pairs: list, history: float = KDFollowConstants.DEFAULT_HISTORY,
                    dt: float = KDFollowConstants.DEFAULT_DT, horizon: float = 0.0, profile_pairs: int = 6,
                    bench_batch: int = MIN_BENCH_BATCH, repetitions: int = MIN_REPETITIONS, threads: int = 1,
                    meter: bool = True) -> EvalReport:
    """
    prediction errors, closed-loop safety and compute cost of every model on the test split
    """
    report = EvalReport()
    report.models = list(models.keys())
    pair_ids = test.pair_id_list()[:profile_pairs]
    for name, model in models.items():
        prediction = predict_windows(model, test)
        report.overall[name] = rmse(prediction, test.targets)
        report.by_group[name] = rmse_by_group(model, test, prediction)
        report.per_pair[name] = per_pair_rmse(model, test, pair_ids, prediction)
        report.min_ttc[name], report.collisions[name] = min_ttc_by_group(model, test_pairs, horizon, history, dt,
                                                                         threads)
        LOG.info("%s: test RMSE %s m/s", name, format_number(report.overall[name], decimals=4))
        if meter:
            report.metering.append(compute_metering(model, test, bench_batch, repetitions, name))
    return report


def overall_block(report: EvalReport, decimal_places: int = 3) -> list:
    output = ["→ {}".format(get_text("RMSE"))]
    create_output_table(output, [[name, report.overall[name]] for name in report.models],
                        [get_text("Model"), get_text("RMSE")], ["", "f"], decimal_places)
    return output


def group_block(report: EvalReport, decimal_places: int = 3) -> list:
    output = ["→ {}".format(get_text("RMSE by pair group"))]
    rows = [[name] + [report.by_group[name][c] for c in KDFollowConstants.PAIR_CLASSES] for name in report.models]
    create_output_table(output, rows, [get_text("Model")] + list(KDFollowConstants.PAIR_CLASSES),
                        ["", "f", "f", "f"], decimal_places)
    return output


def pair_block(report: EvalReport, decimal_places: int = 3) -> list:
    output = ["→ {}".format(get_text("Prediction errors by pair"))]
    create_output_table(output, report.per_pair_rows(), [get_text("Pair"), get_text("Class"), get_text("n")] +
                        report.models, ["", "", "d"] + ["f"] * len(report.models), decimal_places)
    return output


def ttc_block(report: EvalReport, decimal_places: int = 2) -> list:
    output = ["→ {}".format(get_text("Closed-loop rollouts"))]
    rows = []
    for name in report.models:
        for c in KDFollowConstants.PAIR_CLASSES:
            rows.append([name, c, report.min_ttc[name][c], report.collisions[name][c]])
    create_output_table(output, rows, [get_text("Model"), get_text("Pair group"), get_text("Min TTC"),
                                       get_text("Collisions")], ["", "", "f", "d"], decimal_places)
    return output


def compute_block(report: EvalReport) -> list:
    output = ["→ {}".format(get_text("Compute Metering"))]
    rows = [[m.model, m.batch, m.median_seconds, m.iqr_seconds, m.seconds_per_10k, m.multiply_adds]
            for m in report.metering]
    create_output_table(output, rows, [get_text("Model"), get_text("Batch size"), get_text("Median seconds"),
                                       get_text("IQR"), get_text("Seconds per 10k"), get_text("Multiply-adds")],
                        ["", "d", "f", "f", "f", "d"], 6)
    return output


def report_blocks(report: EvalReport) -> list:
    blocks = [overall_block(report), group_block(report), pair_block(report), ttc_block(report)]
    if len(report.metering) > 0:
        blocks.append(compute_block(report))
    return blocks


def report_charts(report: EvalReport) -> dict:
    charts = {"rmse_by_group": KDFollowCharts.chart_grouped_bars("RMSE by pair group", "RMSE", report.by_group),
              "min_ttc_by_group": KDFollowCharts.chart_grouped_bars("Closed-loop rollouts", "Min TTC",
                                                                    report.min_ttc)}
    if len(report.metering) > 0:
        charts["compute"] = KDFollowCharts.chart_grouped_bars(
            "Compute Metering", "Seconds per 10k", {m.model: {"seconds_per_10k": m.seconds_per_10k}
                                                    for m in report.metering})
    return charts


def write_report(report: EvalReport, out_dir: str, run_hash: str) -> list:
    """
    the report as one JSON document plus CSV tables, file names carrying the run hash; returns the files written
    """
    report.run_hash = run_hash
    written = []

    def table(frame: pandas.DataFrame, stem: str):
        filename = os.path.join(out_dir, "{}_{}.csv".format(stem, run_hash))
        frame.to_csv(filename, index=False, float_format="%.6f", lineterminator="\n")
        written.append(filename)

    filename = os.path.join(out_dir, "eval_{}.json".format(run_hash))
    write_json(report.to_dict(), filename)
    written.append(filename)
    table(pandas.DataFrame([[name, report.overall[name]] for name in report.models], columns=["model", "rmse"]),
          "eval_rmse")
    table(pandas.DataFrame([[name, c, report.by_group[name][c]] for name in report.models
                            for c in KDFollowConstants.PAIR_CLASSES], columns=["model", "pair_type", "rmse"]),
          "eval_rmse_by_group")
    table(pandas.DataFrame(report.per_pair_rows(), columns=["pair_id", "pair_type", "windows"] + report.models),
          "eval_rmse_by_pair")
    table(pandas.DataFrame([[name, c, report.min_ttc[name][c], report.collisions[name][c]] for name in report.models
                            for c in KDFollowConstants.PAIR_CLASSES],
                           columns=["model", "pair_type", "min_ttc", "collisions"]), "eval_min_ttc")
    if len(report.metering) > 0:
        table(pandas.DataFrame(report.metering, columns=metering_result._fields), "eval_compute")
    for name, chart in report_charts(report).items():
        chart_file = os.path.join(out_dir, "chart_{}_{}.txt".format(name, run_hash))
        KDFollowCharts.write_chart(chart, chart_file)
        written.append(chart_file)
    LOG.info("evaluation report written to %s", out_dir)
    return written
