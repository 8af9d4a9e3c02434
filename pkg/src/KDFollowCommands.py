"""
The pipeline stages behind each command-line subcommand, and the run context which records what every run wrote
"""

import datetime
import logging
import os

import pandas

import KDFollowCharts
import KDFollowConfig
import KDFollowConstants
import KDFollowData
import KDFollowDistill
import KDFollowEval
import KDFollowGipps
import KDFollowNetwork
import KDFollowStats
from KDFollowData import DatasetSplit
from KDFollowLanguage import get_text
from KDFollowMessages import ConfigError, DataError, ShapeError, report_warning
from KDFollowUtils import blocks_to_text, create_output_table, file_hash, format_number, parse_float_list, \
    stage_seed, text_hash, write_json

LOG = logging.getLogger(__name__)

PAIRS_FILE = "pairs.csv"
WINDOWS_FILE = "windows.dcfw"
TEACHER_FILE = "teacher.dcfn"
STUDENT_FILE = "student.dcfn"
KDNN_FILE = "kdnn.dcfn"
RESOLVED_FILE = "resolved.config"
MANIFEST_FILE = "manifest.txt"
SUMMARY_FILE = "summary.json"
REPORT_FILE = "report.txt"

TABLE_FLOAT = "%.6f"


class RunContext:
    """
    everything one invocation needs and produces: resolved configuration, output directory, report blocks,
    artifacts and results for the exit summary
    """
    def __init__(self, command: str, config: dict):
        self.command = command
        self.config = config
        self.out_dir = config["run.out"]
        self.seed = config["run.seed"]
        self.threads = config["run.threads"]
        self.output_blocks = []
        self.artifacts = []
        self.results = {}
        self.stages = {}
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def require(self, name: str) -> str:
        filename = self.path(name)
        if not os.path.isfile(filename):
            raise DataError(get_text("artifact_missing").format(filename))
        return filename

    def stage_seed(self, stage: str) -> int:
        seed = stage_seed(self.seed, stage)
        self.stages[stage] = seed
        return seed

    def add_artifact(self, filename: str) -> None:
        name = os.path.relpath(filename, self.out_dir)
        if name not in self.artifacts:
            self.artifacts.append(name)

    def data_path(self) -> str:
        if self.config["data.path"] != "":
            return self.config["data.path"]
        return self.path(PAIRS_FILE)

    def data_label(self) -> str:
        """
        the data file as recorded in the manifest: relative when it lives in the output directory
        """
        if self.config["data.path"] != "":
            return self.config["data.path"]
        return PAIRS_FILE

    def dataset_hash(self) -> str:
        for filename in (self.data_path(), self.path(WINDOWS_FILE)):
            if os.path.isfile(filename):
                return file_hash(filename)
        return ""

    def run_hash(self) -> str:
        text = "".join("{} = {}\n".format(k, KDFollowConfig.format_config_value(v))
                       for k, v in KDFollowConfig.reproducible_items(self.config))
        return text_hash(text + self.dataset_hash())

    def finish(self, exit_code: int, error: Exception = None) -> None:
        """
        write the resolved configuration, the manifest, the text report and the exit summary
        """
        KDFollowConfig.export_config(self.config, self.path(RESOLVED_FILE))
        manifest = ["version = {}".format(KDFollowConstants.version_str()),
                    "command = {}".format(self.command),
                    "seed = {}".format(self.seed),
                    "threads = {}".format(self.threads),
                    "data = {}".format(self.data_label()),
                    "dataset_hash = {}".format(self.dataset_hash()),
                    "run_hash = {}".format(self.run_hash())]
        for stage in sorted(self.stages):
            manifest.append("seed.{} = {}".format(stage, self.stages[stage]))
        manifest.append("created = {}".format(datetime.datetime.now().isoformat(timespec="seconds")))
        with open(self.path(MANIFEST_FILE), "w") as outfile:
            outfile.write("\n".join(manifest) + "\n")
        if len(self.output_blocks) > 0:
            with open(self.path(REPORT_FILE), "w", encoding="utf-8") as outfile:
                outfile.write(blocks_to_text(self.output_blocks))
            self.add_artifact(self.path(REPORT_FILE))
        summary = {"command": self.command,
                   "exit_code": exit_code,
                   "error": None if error is None else str(error),
                   "artifacts": sorted(self.artifacts),
                   "results": self.results}
        write_json(summary, self.path(SUMMARY_FILE))


# ---------- configuration to objects ----------
def window_steps(config: dict) -> int:
    return KDFollowData.history_steps(config["data.history"], config["data.dt"])


def teacher_spec(config: dict) -> KDFollowNetwork.LstmSpec:
    return KDFollowNetwork.LstmSpec(KDFollowConstants.N_CHANNELS, config["teacher.layers"], config["teacher.dropout"],
                                    config["teacher.projection"], window_steps(config))


def student_spec(config: dict) -> KDFollowNetwork.MlpSpec:
    return KDFollowNetwork.MlpSpec(window_steps(config) * KDFollowConstants.N_CHANNELS, config["student.hidden"])


def optimizer_spec(config: dict, prefix: str) -> KDFollowNetwork.OptimizerSpec:
    return KDFollowNetwork.OptimizerSpec(config[prefix + ".optimizer"], config[prefix + ".learning_rate"],
                                         config[prefix + ".batch_size"], config[prefix + ".epochs"])


def load_dataset(ctx: RunContext) -> tuple:
    """
    the windows written by ingest, regrouped into their splits, and the normalization fitted on training
    """
    windows, normalizer = KDFollowData.load_windows(ctx.require(WINDOWS_FILE))
    if normalizer is None:
        raise DataError("{} carries no normalization".format(ctx.path(WINDOWS_FILE)))
    if windows.steps() != window_steps(ctx.config):
        raise ConfigError("windows hold {} steps but the configuration asks for {}".format(
            windows.steps(), window_steps(ctx.config)))
    assignment = {p: int(s) for p, s in zip(windows.pair_ids, windows.splits)}
    return DatasetSplit(windows, assignment, ctx.stage_seed("split")), normalizer


def load_model(ctx: RunContext, filename: str, name: str, spec, normalizer) -> KDFollowDistill.TrainedModel:
    """
    load a trained network; its widths may differ from the configured ones (after a search) but its kind and
    input shape must match
    """
    weights = KDFollowNetwork.load_weights(ctx.require(filename))
    stored = weights.spec
    if stored.kind != spec.kind:
        raise ShapeError("{} holds a {} network, expected {}".format(filename, stored.kind, spec.kind))
    if stored.kind == KDFollowNetwork.KIND_MLP:
        compatible = stored.input_dim == spec.input_dim
    else:
        compatible = (stored.steps, stored.input_channels) == (spec.steps, spec.input_channels)
    if not compatible:
        raise ShapeError("{} was trained on windows of another shape".format(filename))
    return KDFollowDistill.TrainedModel(name, weights, normalizer, [])


def filtered_segments(ctx: RunContext, pair_ids=None) -> list:
    """
    spacing-filtered segments of the raw pairs, optionally only those of the given pairs
    """
    config = ctx.config
    pairs = KDFollowData.load_pairs(ctx.data_path(), KDFollowConfig.schema_from_config(config), config["data.dt"])
    if pair_ids is not None:
        keep = set(pair_ids)
        pairs = [pair for pair in pairs if pair.pair_id in keep]
    derived = [KDFollowData.derive_kinematics(pair) for pair in pairs]
    return KDFollowData.filter_spacing(derived, config["data.max_spacing"], window_steps(config) + 1)


def write_table(ctx: RunContext, frame: pandas.DataFrame, name: str) -> str:
    filename = ctx.path(name)
    frame.to_csv(filename, index=False, float_format=TABLE_FLOAT, lineterminator="\n")
    ctx.add_artifact(filename)
    return filename


def write_charts(ctx: RunContext, charts: dict) -> None:
    for name, chart in charts.items():
        filename = ctx.path("chart_{}.txt".format(name))
        KDFollowCharts.write_chart(chart, filename)
        ctx.add_artifact(filename)


def training_block(model: KDFollowDistill.TrainedModel, test: KDFollowData.WindowSet) -> list:
    output = ["→ {}: {}".format(get_text("Training"), model.name)]
    rows = [[e.epoch, e.train_loss, e.val_loss, e.val_rmse] for e in model.log]
    create_output_table(output, rows, [get_text("Epoch"), get_text("Training loss"), get_text("Validation loss"),
                                       get_text("Validation RMSE")], ["d", "f", "f", "f"], 6)
    output.append("{}: {}".format(get_text("Test RMSE"),
                                  format_number(KDFollowDistill.rmse_ms(model, test), decimals=4)))
    return output


def save_model(ctx: RunContext, model: KDFollowDistill.TrainedModel, filename: str) -> None:
    KDFollowNetwork.save_weights(model.weights, ctx.path(filename))
    ctx.add_artifact(ctx.path(filename))
    log_file = ctx.path("training_{}.csv".format(model.name))
    KDFollowDistill.write_training_log(model.log, log_file)
    ctx.add_artifact(log_file)
    ctx.results["{}_epochs".format(model.name)] = len(model.log) - 1


# ---------- subcommands ----------
def run_synth(ctx: RunContext, args) -> None:
    config = ctx.config
    n_pairs = config["synth.pairs"] if args.pairs is None else args.pairs
    duration = config["synth.duration"] if args.duration is None else args.duration
    if n_pairs < 0 or duration <= 0:
        raise ConfigError(get_text("config_bad_value").format("synth", "{} pairs of {} s".format(n_pairs, duration)))
    presets = KDFollowGipps.presets_from_config(config)
    pairs = KDFollowGipps.generate_synthetic_dataset(presets, n_pairs, ctx.stage_seed("synth"), duration,
                                                     config["data.dt"], config["gipps.tau"])
    filename = ctx.path(PAIRS_FILE)
    KDFollowData.write_pairs_csv(pairs, filename, KDFollowConfig.schema_from_config(config))
    ctx.add_artifact(filename)
    counts = KDFollowData.class_counts(pairs)
    ctx.output_blocks.append(KDFollowData.class_count_block(counts, get_text("Synthetic Data")))
    ctx.results["pairs"] = counts


def run_ingest(ctx: RunContext, args) -> None:
    config = ctx.config
    pairs = KDFollowData.load_pairs(ctx.data_path(), KDFollowConfig.schema_from_config(config), config["data.dt"],
                                    ctx.output_blocks)
    split, normalizer, segments = KDFollowData.build_dataset(pairs, ctx.stage_seed("split"),
                                                             config["data.max_spacing"], config["data.history"],
                                                             config["data.dt"], ctx.output_blocks)
    filename = ctx.path(WINDOWS_FILE)
    KDFollowData.save_windows(split.windows, filename, normalizer)
    ctx.add_artifact(filename)
    ctx.add_artifact(KDFollowData.sidecar_name(filename))
    rows = []
    for tag, name in enumerate(KDFollowConstants.SPLIT_NAMES):
        rows.append([get_text(name), len(split.pairs_in(tag)), len(split.windows.split_subset(tag))])
    output = ["→ {}".format(get_text("Windows per split"))]
    create_output_table(output, rows, [get_text("Split"), get_text("Pairs"), get_text("Windows")], ["", "d", "d"])
    ctx.output_blocks.append(output)
    ctx.results["segments"] = len(segments)
    ctx.results["windows"] = {name: int(row[2]) for name, row in zip(KDFollowConstants.SPLIT_NAMES, rows)}


def run_analyze(ctx: RunContext, args) -> None:
    config = ctx.config
    segments = filtered_segments(ctx)
    blocks, charts, values = KDFollowStats.descriptive_analysis(segments, config["stats.bins"],
                                                                config["stats.categories"],
                                                                config["stats.moment_variable"])
    ctx.output_blocks.extend(blocks)
    write_charts(ctx, charts)
    bins = KDFollowStats.SpacingBins(config["stats.bins"])
    write_table(ctx, pandas.DataFrame([[c, bins.label(i), std] for c, stds in values["speed_variability"].items()
                                       for i, std in enumerate(stds)], columns=["pair_type", "bin", "speed_std"]),
                "speed_variability.csv")
    moments = [[variable] + list(s) for variable, rows in values["moments"].items() for s in rows]
    write_table(ctx, pandas.DataFrame(moments, columns=["variable"] + list(KDFollowConstants.group_summary._fields)),
                "moments.csv")
    write_table(ctx, pandas.DataFrame(values["table1"], columns=["category", "pair_type", "n", "mean_speed",
                                                                 "mean_accel", "mean_ttc"]), "table1.csv")
    anova_rows = [[category, variable] + ([None] * 4 if result is None else list(result))
                  for category, variable, result in values["anova"]]
    write_table(ctx, pandas.DataFrame(anova_rows, columns=["category", "variable", "f", "p", "df_between",
                                                           "df_within"]), "anova.csv")
    ctx.results["anova_tests"] = sum(1 for _, _, r in values["anova"] if r is not None)


def run_train(ctx: RunContext, args) -> None:
    config = ctx.config
    split, normalizer = load_dataset(ctx)
    jobs = []
    if args.model in ("teacher", "both"):
        jobs.append(("teacher", KDFollowConstants.MODEL_TEACHER, teacher_spec(config),
                     optimizer_spec(config, "teacher"), TEACHER_FILE))
    if args.model in ("student", "both"):
        jobs.append(("student", KDFollowConstants.MODEL_STUDENT, student_spec(config),
                     optimizer_spec(config, "student"), STUDENT_FILE))
    for role, name, spec, optimizer, filename in jobs:
        seed = ctx.stage_seed(role)
        if args.search and config["search.model"] == role:
            n_layers = len(spec.layers) if spec.kind == KDFollowNetwork.KIND_LSTM else len(spec.hidden)
            space = KDFollowDistill.SearchSpace(n_layers, budget=config["search.budget"], folds=config["search.folds"])
            model, best, trials = KDFollowDistill.search_and_train(name, spec, optimizer, split, normalizer, space,
                                                                   seed, ctx.threads)
            ctx.output_blocks.append(KDFollowDistill.search_block(trials, best))
            write_table(ctx, pandas.DataFrame([dict(c, score=s, widths=",".join(str(w) for w in c["widths"]))
                                               for c, s in trials]), "search_{}.csv".format(name))
            ctx.results["{}_search".format(name)] = best
        else:
            model = KDFollowDistill.train_network(name, spec, optimizer, split.train, split.validation, normalizer,
                                                  seed)
        save_model(ctx, model, filename)
        ctx.output_blocks.append(training_block(model, split.test))
        ctx.results["{}_test_rmse".format(name)] = KDFollowDistill.rmse_ms(model, split.test)


def run_distill(ctx: RunContext, args) -> None:
    config = ctx.config
    split, normalizer = load_dataset(ctx)
    teacher = load_model(ctx, TEACHER_FILE, KDFollowConstants.MODEL_TEACHER, teacher_spec(config), normalizer)
    alpha = config["distill.alpha"] if args.alpha is None else args.alpha
    distill_config = KDFollowDistill.DistillConfig(alpha, teacher, student_spec(config),
                                                   optimizer_spec(config, "student"), ctx.stage_seed("student"),
                                                   config["distill.cache_teacher"])
    model = KDFollowDistill.train_kdnn(split, normalizer, distill_config)
    save_model(ctx, model, KDNN_FILE)
    ctx.output_blocks.append(training_block(model, split.test))
    ctx.results["alpha"] = alpha
    ctx.results["KDNN_test_rmse"] = KDFollowDistill.rmse_ms(model, split.test)


def run_sweep(ctx: RunContext, args) -> None:
    config = ctx.config
    try:
        alphas = config["distill.alphas"] if args.alphas is None else parse_float_list(args.alphas)
    except ValueError:
        raise ConfigError(get_text("config_bad_value").format("--alphas", args.alphas))
    if len(alphas) == 0:
        raise ConfigError(get_text("config_bad_value").format("--alphas", args.alphas))
    for alpha in alphas:
        KDFollowDistill.check_alpha(alpha)
    if args.seeds is not None:
        run_ordering(ctx, alphas, args.seeds)
        return
    split, normalizer = load_dataset(ctx)
    teacher = load_model(ctx, TEACHER_FILE, KDFollowConstants.MODEL_TEACHER, teacher_spec(config), normalizer)
    result = KDFollowDistill.alpha_sweep(split, normalizer, teacher, student_spec(config),
                                         optimizer_spec(config, "student"), alphas, ctx.stage_seed("student"),
                                         ctx.threads, cache_teacher=config["distill.cache_teacher"])
    write_table(ctx, KDFollowDistill.sweep_frame(result), "alpha_sweep.csv")
    write_charts(ctx, {"alpha_sweep": KDFollowDistill.sweep_chart(result)})
    ctx.output_blocks.append(KDFollowDistill.sweep_block(result))
    ctx.results["best_alpha"] = result.best_alpha
    ctx.results["best_rmse"] = result.best_rmse()
    ctx.results["student_rmse"] = result.student_rmse
    ctx.results["teacher_rmse"] = result.teacher_rmse


def run_ordering(ctx: RunContext, alphas: list, n_seeds: int) -> None:
    config = ctx.config
    if n_seeds < 1:
        raise ConfigError(get_text("config_bad_value").format("--seeds", n_seeds))
    seeds = [ctx.seed + i for i in range(n_seeds)]
    rows = KDFollowDistill.ordering_experiment(KDFollowGipps.presets_from_config(config), config["synth.pairs"],
                                               config["synth.duration"], seeds, teacher_spec(config),
                                               optimizer_spec(config, "teacher"), student_spec(config),
                                               optimizer_spec(config, "student"), alphas,
                                               config["data.max_spacing"], config["data.history"], config["data.dt"],
                                               config["gipps.tau"], ctx.threads)
    write_table(ctx, pandas.DataFrame(rows, columns=["seed", "teacher_rmse", "student_rmse", "best_alpha",
                                                     "best_kdnn_rmse"]), "ordering.csv")
    ctx.output_blocks.append(KDFollowDistill.ordering_block(rows))
    ctx.results["seeds"] = len(rows)
    ctx.results["teacher_no_worse"], ctx.results["kdnn_no_worse"] = KDFollowDistill.ordering_counts(rows)


def evaluation_models(ctx: RunContext, normalizer, test_segments: list) -> dict:
    """
    teacher, student, the distilled student when one has been trained, and Gipps fitted per test pair
    """
    config = ctx.config
    models = {KDFollowConstants.MODEL_TEACHER: load_model(ctx, TEACHER_FILE, KDFollowConstants.MODEL_TEACHER,
                                                          teacher_spec(config), normalizer),
              KDFollowConstants.MODEL_STUDENT: load_model(ctx, STUDENT_FILE, KDFollowConstants.MODEL_STUDENT,
                                                          student_spec(config), normalizer)}
    if os.path.isfile(ctx.path(KDNN_FILE)):
        models[KDFollowConstants.MODEL_KDNN] = load_model(ctx, KDNN_FILE, KDFollowConstants.MODEL_KDNN,
                                                          student_spec(config), normalizer)
    else:
        report_warning(KDFollowConstants.MODEL_KDNN, get_text("artifact_missing").format(ctx.path(KDNN_FILE)))
    models[KDFollowConstants.MODEL_GIPPS] = KDFollowGipps.fit_gipps_model(
        test_segments, KDFollowGipps.params_from_config(config), KDFollowGipps.presets_from_config(config),
        config["data.history"], config["data.dt"])
    return models


def run_evaluate(ctx: RunContext, args) -> None:
    config = ctx.config
    split, normalizer = load_dataset(ctx)
    test_segments = filtered_segments(ctx, split.pairs_in(KDFollowConstants.SPLIT_TEST))
    models = evaluation_models(ctx, normalizer, test_segments)
    horizon = config["eval.horizon"] if args.horizon is None else args.horizon
    report = KDFollowEval.evaluate_models(models, split.test, test_segments, config["data.history"],
                                          config["data.dt"], horizon, config["eval.profile_pairs"],
                                          threads=ctx.threads, meter=False)
    for filename in KDFollowEval.write_report(report, ctx.out_dir, ctx.run_hash()):
        ctx.add_artifact(filename)
    profile_ids = set(split.test.pair_id_list()[:config["eval.profile_pairs"]])
    profile_pairs = [s for s in test_segments if s.pair_id in profile_ids]
    for filename in KDFollowEval.speed_profile_export(models, profile_pairs, ctx.out_dir, config["data.history"],
                                                      config["data.dt"]):
        ctx.add_artifact(filename)
    ctx.output_blocks.extend(KDFollowEval.report_blocks(report))
    ctx.results["rmse"] = report.overall
    ctx.results["rmse_by_group"] = report.by_group


def run_rollout(ctx: RunContext, args) -> None:
    config = ctx.config
    split, normalizer = load_dataset(ctx)
    test_segments = filtered_segments(ctx, split.pairs_in(KDFollowConstants.SPLIT_TEST))
    models = evaluation_models(ctx, normalizer, test_segments)
    horizon = config["eval.horizon"] if args.horizon is None else args.horizon
    output = ["→ {}".format(get_text("Closed-loop rollouts"))]
    table = []
    ctx.results["collisions"] = {}
    for name, model in models.items():
        rows = []
        for pair, result in KDFollowEval.rollout_pairs(model, test_segments, horizon, config["data.history"],
                                                       config["data.dt"], ctx.threads):
            rows.append([pair.label(), pair.pair_class, result.min_ttc, result.collision])
        write_table(ctx, pandas.DataFrame(rows, columns=["pair", "pair_type", "min_ttc", "collision"]),
                    "rollout_{}.csv".format(name))
        for pair_class in KDFollowConstants.PAIR_CLASSES:
            values = [r[2] for r in rows if r[1] == pair_class]
            table.append([name, pair_class, len(values), min(values) if len(values) > 0 else None,
                          sum(1 for r in rows if r[1] == pair_class and r[3])])
        ctx.results["collisions"][name] = sum(1 for r in rows if r[3])
    create_output_table(output, table, [get_text("Model"), get_text("Pair group"), get_text("Pairs"),
                                        get_text("Min TTC"), get_text("Collisions")], ["", "", "d", "f", "d"], 2)
    ctx.output_blocks.append(output)


def run_bench(ctx: RunContext, args) -> None:
    config = ctx.config
    split, normalizer = load_dataset(ctx)
    test_segments = filtered_segments(ctx, split.pairs_in(KDFollowConstants.SPLIT_TEST))
    models = evaluation_models(ctx, normalizer, test_segments)
    batch = config["eval.bench_batch"] if args.batch is None else args.batch
    repetitions = config["eval.repetitions"] if args.repetitions is None else args.repetitions
    report = KDFollowEval.EvalReport()
    report.models = list(models.keys())
    for name, model in models.items():
        report.metering.append(KDFollowEval.compute_metering(model, split.test, batch, repetitions, name))
    write_table(ctx, pandas.DataFrame(report.metering, columns=KDFollowConstants.metering_result._fields),
                "bench.csv")
    write_charts(ctx, {"compute": KDFollowEval.report_charts(report)["compute"]})
    output = KDFollowEval.compute_block(report)
    ratio = (KDFollowNetwork.count_multiply_adds(models[KDFollowConstants.MODEL_TEACHER].spec) /
             KDFollowNetwork.count_multiply_adds(models[KDFollowConstants.MODEL_STUDENT].spec))
    output.append("{}: {}".format(get_text("Multiply-add ratio of teacher to student"), format_number(ratio,
                                                                                                   decimals=1)))
    ctx.output_blocks.append(output)
    ctx.results["multiply_add_ratio"] = ratio
    ctx.results["seconds_per_10k"] = {m.model: m.seconds_per_10k for m in report.metering}


COMMANDS = {"synth": run_synth,
            "ingest": run_ingest,
            "analyze": run_analyze,
            "train": run_train,
            "distill": run_distill,
            "sweep": run_sweep,
            "evaluate": run_evaluate,
            "rollout": run_rollout,
            "bench": run_bench}
