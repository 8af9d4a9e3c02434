"""
Response-based knowledge distillation: teacher training, plain student training, distilled student training
against the composite loss, the alpha sweep, and model selection by random search with time-series
cross-validation
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

import numpy
import pandas
import scipy.stats
from sklearn.model_selection import ParameterSampler, TimeSeriesSplit

import KDFollowCharts
import KDFollowConstants
import KDFollowData
import KDFollowGipps
import KDFollowNetwork
from KDFollowConstants import epoch_log
from KDFollowData import DatasetSplit, Normalizer, WindowSet
from KDFollowLanguage import get_text
from KDFollowMessages import ConfigError, DataError, DivergenceError, ShapeError
from KDFollowUtils import create_output_table, format_number, inline_float, stage_seed

LOG = logging.getLogger(__name__)

PREDICT_CHUNK = 4096


class TrainedModel:
    """
    a trained network together with the normalization it was trained under and its training log
    """
    def __init__(self, name: str, weights: KDFollowNetwork.Weights, normalizer: Normalizer, log: list):
        self.name = name
        self.weights = weights
        self.spec = weights.spec
        self.normalizer = normalizer
        self.log = log

    def predict_normalized(self, scaled_features: numpy.ndarray) -> numpy.ndarray:
        """
        predictions in [0, 1] from normalized windows, with dropout off
        """
        output = []
        for start in range(0, len(scaled_features), PREDICT_CHUNK):
            batch = KDFollowNetwork.encode_inputs(self.spec, scaled_features[start:start + PREDICT_CHUNK])
            prediction, _ = KDFollowNetwork.forward(self.weights, batch, training=False)
            output.append(prediction[:, 0])
        if len(output) == 0:
            return numpy.zeros(0)
        return numpy.concatenate(output)

    def predict(self, features: numpy.ndarray, times=None, pair_ids=None) -> numpy.ndarray:
        """
        follower speed (m/s) one step after each window of raw features
        """
        scaled = self.normalizer.apply_features(numpy.asarray(features, dtype=float))
        return self.normalizer.invert_target(self.predict_normalized(scaled))


class DistillConfig:
    def __init__(self, alpha: float, teacher: TrainedModel, student: KDFollowNetwork.MlpSpec,
                 optimizer: KDFollowNetwork.OptimizerSpec, seed: int, cache_teacher: bool = False):
        check_alpha(alpha)
        if not numpy.all(numpy.isfinite(teacher.weights.vector)):
            raise ConfigError("teacher weights are not finite")
        self.alpha = alpha
        self.teacher = teacher
        self.student = student
        self.optimizer = optimizer
        self.seed = seed
        self.cache_teacher = cache_teacher


def check_alpha(alpha: float) -> None:
    if not 0 <= alpha <= 1:
        raise ConfigError("alpha must lie in [0, 1], got {}".format(alpha))


# ---------- loss ----------
def composite_loss(y_obs, y_student, y_teacher, alpha: float) -> tuple:
    """
    alpha * MSE(observed, student) + (1 - alpha) * MSE(teacher, student)

    returns the loss, its gradient with respect to the student predictions, and the two component losses
    """
    check_alpha(alpha)
    y_obs = numpy.asarray(y_obs, dtype=float)
    y_student = numpy.asarray(y_student, dtype=float)
    y_teacher = numpy.asarray(y_teacher, dtype=float)
    n = len(y_student)
    if n < 1 or len(y_obs) != n or len(y_teacher) != n:
        raise ShapeError("observed, student and teacher predictions must have equal non-zero length")
    student_loss = float(numpy.mean((y_obs - y_student)**2))
    distill_loss = float(numpy.mean((y_teacher - y_student)**2))
    loss = alpha * student_loss + (1.0 - alpha) * distill_loss
    grad = (2.0 / n) * (alpha * (y_student - y_obs) + (1.0 - alpha) * (y_student - y_teacher))
    return loss, grad, student_loss, distill_loss


def rmse_ms(model: TrainedModel, windows: WindowSet) -> Optional[float]:
    if len(windows) == 0:
        return None
    prediction = model.predict(windows.features)
    return float(numpy.sqrt(numpy.mean((prediction - windows.targets)**2)))


# ---------- training ----------
def train_network(name: str, spec, optimizer: KDFollowNetwork.OptimizerSpec, train: WindowSet,
                  validation: WindowSet, normalizer: Normalizer, seed: int, teacher: Optional[TrainedModel] = None,
                  alpha: float = 1.0, cache_teacher: bool = False) -> TrainedModel:
    """
    minibatch training shared by every model

    Without a teacher the loss is plain MSE on normalized targets; with one it is the composite loss and teacher
    predictions are made per batch in inference mode, or once up front when cached. The log starts with an
    epoch 0 entry evaluated before any update
    """
    init_seed, order_seed, dropout_seed = numpy.random.SeedSequence(seed).spawn(3)
    weights = KDFollowNetwork.init_weights(spec, int(init_seed.generate_state(1)[0]))
    order_rng = numpy.random.default_rng(order_seed)
    dropout_rng = numpy.random.default_rng(dropout_seed)
    state = KDFollowNetwork.OptimizerState(optimizer, weights.n_params())

    x_scaled = normalizer.apply_features(train.features)
    x_train = KDFollowNetwork.encode_inputs(spec, x_scaled)
    y_train = normalizer.apply_target(train.targets)
    n = len(y_train)
    if n == 0:
        raise DataError("the training split is empty")
    teacher_all = None
    if teacher is not None:
        check_alpha(alpha)
        teacher_steps = getattr(teacher.spec, "steps", None)
        if teacher_steps is not None and teacher_steps != train.steps():
            raise ShapeError("teacher expects {} steps, windows have {}".format(teacher_steps, train.steps()))
        if cache_teacher:
            teacher_all = teacher.predict_normalized(x_scaled)

    log = [evaluate_epoch(0, weights, x_scaled, y_train, teacher, alpha, validation, normalizer)]
    for epoch in range(1, optimizer.epochs + 1):
        order = order_rng.permutation(n)
        for b, start in enumerate(range(0, n, optimizer.batch_size)):
            index = order[start:start + optimizer.batch_size]
            prediction, cache = KDFollowNetwork.forward(weights, x_train[index], training=True, rng=dropout_rng)
            y_student = prediction[:, 0]
            if teacher is None:
                loss, grad = KDFollowNetwork.mse_loss(y_student, y_train[index])
            else:
                if teacher_all is not None:
                    y_teacher = teacher_all[index]
                else:
                    y_teacher = teacher.predict_normalized(x_scaled[index])
                loss, grad, _, _ = composite_loss(y_train[index], y_student, y_teacher, alpha)
            if not math.isfinite(loss):
                raise DivergenceError(get_text("divergence detected").format(epoch, b), epoch, b)
            grads = KDFollowNetwork.backward(weights, cache, grad)
            KDFollowNetwork.optimizer_step(state, weights, grads, epoch, b)
            LOG.debug("%s epoch %d batch %d loss %g", name, epoch, b, loss)
        entry = evaluate_epoch(epoch, weights, x_scaled, y_train, teacher, alpha, validation, normalizer)
        log.append(entry)
        LOG.info("%s epoch %d: train %s, validation RMSE %s m/s", name, epoch,
                 format_number(entry.train_loss, decimals=6), format_number(entry.val_rmse, decimals=4))
    return TrainedModel(name, weights, normalizer, log)


def evaluate_epoch(epoch: int, weights, x_scaled, y_train, teacher, alpha, validation: WindowSet,
                   normalizer: Normalizer) -> epoch_log:
    model = TrainedModel("", weights, normalizer, [])
    y_student = model.predict_normalized(x_scaled)
    if teacher is None:
        train_loss, _ = KDFollowNetwork.mse_loss(y_student, y_train)
        student_loss = train_loss
        distill_loss = None
    else:
        y_teacher = teacher.predict_normalized(x_scaled)
        train_loss, _, student_loss, distill_loss = composite_loss(y_train, y_student, y_teacher, alpha)
    if not math.isfinite(train_loss):
        raise DivergenceError(get_text("divergence detected").format(epoch, None), epoch, None)
    val_loss = None
    val_rmse = None
    if len(validation) > 0:
        y_val = model.predict_normalized(normalizer.apply_features(validation.features))
        val_loss, _ = KDFollowNetwork.mse_loss(y_val, normalizer.apply_target(validation.targets))
        val_rmse = float(numpy.sqrt(numpy.mean((normalizer.invert_target(y_val) - validation.targets)**2)))
    return epoch_log(epoch, train_loss, student_loss, distill_loss, val_loss, val_rmse)


def train_teacher(split: DatasetSplit, normalizer: Normalizer, spec: KDFollowNetwork.LstmSpec,
                  optimizer: KDFollowNetwork.OptimizerSpec, seed: int) -> TrainedModel:
    return train_network(KDFollowConstants.MODEL_TEACHER, spec, optimizer, split.train, split.validation, normalizer,
                         seed)


def train_student_plain(split: DatasetSplit, normalizer: Normalizer, spec: KDFollowNetwork.MlpSpec,
                        optimizer: KDFollowNetwork.OptimizerSpec, seed: int) -> TrainedModel:
    return train_network(KDFollowConstants.MODEL_STUDENT, spec, optimizer, split.train, split.validation, normalizer,
                         seed)


def train_kdnn(split: DatasetSplit, normalizer: Normalizer, config: DistillConfig) -> TrainedModel:
    """
    train a student from random initialization against the composite loss of a frozen teacher
    """
    if config.student.input_dim != split.train.steps() * KDFollowConstants.N_CHANNELS:
        raise ShapeError("student input width {} does not match windows of {} steps".format(
            config.student.input_dim, split.train.steps()))
    return train_network(KDFollowConstants.MODEL_KDNN, config.student, config.optimizer, split.train,
                         split.validation, normalizer, config.seed, config.teacher, config.alpha, config.cache_teacher)


def write_training_log(log: list, filename: str) -> None:
    pandas.DataFrame(log, columns=epoch_log._fields).to_csv(filename, index=False, lineterminator="\n")


# ---------- alpha sweep ----------
class SweepResult:
    def __init__(self, rows: list, best_alpha: float, student_rmse: Optional[float],
                 teacher_rmse: Optional[float], models: dict):
        self.rows = rows  # [alpha, rmse, rmse - student rmse]
        self.best_alpha = best_alpha
        self.student_rmse = student_rmse
        self.teacher_rmse = teacher_rmse
        self.models = models

    def best_rmse(self) -> Optional[float]:
        for alpha, rmse, _ in self.rows:
            if alpha == self.best_alpha:
                return rmse
        return None


def best_alpha_of(rows: list) -> float:
    """
    alpha with the lowest RMSE, ties going to the larger alpha
    """
    valid = [(rmse, -alpha) for alpha, rmse, _ in rows if rmse is not None]
    return -min(valid)[1]


def alpha_sweep(split: DatasetSplit, normalizer: Normalizer, teacher: TrainedModel,
                student_spec: KDFollowNetwork.MlpSpec, optimizer: KDFollowNetwork.OptimizerSpec, alphas: list,
                seed: int, threads: int = 1, student: Optional[TrainedModel] = None,
                cache_teacher: bool = False) -> SweepResult:
    """
    train one distilled student per alpha against a shared teacher and compare test RMSE (m/s) with the plain
    student trained under the same seed
    """
    if student is None:
        student = train_student_plain(split, normalizer, student_spec, optimizer, seed)
    student_rmse = rmse_ms(student, split.test)
    teacher_rmse = rmse_ms(teacher, split.test)

    def run(alpha: float) -> TrainedModel:
        config = DistillConfig(alpha, teacher, student_spec, optimizer, seed, cache_teacher)
        return train_kdnn(split, normalizer, config)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            models = list(executor.map(run, alphas))
    else:
        models = [run(alpha) for alpha in alphas]
    rows = []
    for alpha, model in zip(alphas, models):
        rmse = rmse_ms(model, split.test)
        diff = None if (rmse is None or student_rmse is None) else rmse - student_rmse
        rows.append([alpha, rmse, diff])
    best = best_alpha_of(rows)
    LOG.info("%s: %s", get_text("Best alpha"), best)
    return SweepResult(rows, best, student_rmse, teacher_rmse, dict(zip(alphas, models)))


def sweep_block(result: SweepResult, decimal_places: int = 3) -> list:
    output = ["→ {}".format(get_text("Prediction error of KDNN model")),
              "{}: {}".format(get_text("RMSE of teacher network"),
                              format_number(result.teacher_rmse, decimals=decimal_places)),
              "{}: {}".format(get_text("RMSE of student network"),
                              format_number(result.student_rmse, decimals=decimal_places)),
              ""]
    create_output_table(output, result.rows, [get_text("Alpha"), get_text("RMSE"),
                                              get_text("Error Difference with student network")],
                        ["f", "f", "f"], decimal_places)
    output.append("{}: {}".format(get_text("Best alpha"), format(result.best_alpha, inline_float(1))))
    return output


def sweep_frame(result: SweepResult) -> pandas.DataFrame:
    frame = pandas.DataFrame(result.rows, columns=["alpha", "rmse", "error_difference"])
    return frame


def sweep_chart(result: SweepResult) -> KDFollowCharts.ChartData:
    chart_data = KDFollowCharts.ChartData(get_text("Prediction error of KDNN model"))
    chart_data.x_label = get_text("Alpha")
    chart_data.y_label = get_text("RMSE")
    chart_data.add_multi_line(KDFollowConstants.MODEL_KDNN, [r[0] for r in result.rows], [r[1] for r in result.rows])
    return chart_data


# ---------- model selection ----------
class SearchSpace:
    """
    ranges sampled by the random search; widths keep the layer count of the base network
    """
    def __init__(self, n_layers: int, epochs=(3, 10), widths=(16, 128), learning_rate=(1e-4, 1e-1),
                 batch_size=(32, 256), dropout=(0.0, 0.5), budget: int = 20, folds: int = 3):
        if budget < 1:
            raise ConfigError("search budget must be at least 1")
        self.n_layers = n_layers
        self.epochs = epochs
        self.widths = widths
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.dropout = dropout
        self.budget = budget
        self.folds = folds

    def distributions(self) -> dict:
        """
        log-uniform learning rate, uniform integer epochs, widths and batch size, uniform dropout
        """
        params = {"epochs": scipy.stats.randint(self.epochs[0], self.epochs[1] + 1),
                  "learning_rate": scipy.stats.loguniform(self.learning_rate[0], self.learning_rate[1]),
                  "batch_size": scipy.stats.randint(self.batch_size[0], self.batch_size[1] + 1),
                  "dropout": scipy.stats.uniform(self.dropout[0], self.dropout[1] - self.dropout[0])}
        for layer in range(self.n_layers):
            params["width_{}".format(layer)] = scipy.stats.randint(self.widths[0], self.widths[1] + 1)
        return params

    def configurations(self, seed: int) -> list:
        sampler = ParameterSampler(self.distributions(), n_iter=self.budget, random_state=seed)
        return [{"epochs": int(drawn["epochs"]),
                 "widths": [int(drawn["width_{}".format(layer)]) for layer in range(self.n_layers)],
                 "learning_rate": float(drawn["learning_rate"]),
                 "batch_size": int(drawn["batch_size"]),
                 "dropout": float(drawn["dropout"])} for drawn in sampler]


def timeseries_cv(n: int, k: int = 3) -> list:
    """
    expanding-window folds over n time-ordered items: every fold trains on all items before its validation block
    """
    if n < k + 1:
        raise DataError("{} windows are too few for {} time-series folds".format(n, k))
    return list(TimeSeriesSplit(n_splits=k).split(numpy.arange(n)))


def time_order(windows: WindowSet) -> numpy.ndarray:
    return numpy.argsort(windows.times, kind="stable")


def random_search(space: SearchSpace, objective: Callable, seed: int, threads: int = 1) -> tuple:
    """
    evaluate budget sampled configurations; returns the one with the lowest objective (first on ties) and every
    (config, score) trial in sampling order
    """
    configs = space.configurations(seed)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            scores = list(executor.map(objective, configs))
    else:
        scores = [objective(config) for config in configs]
    trials = list(zip(configs, scores))
    best = min(range(len(trials)), key=lambda i: (trials[i][1], i))
    return configs[best], trials


def spec_with(base_spec, config: dict):
    if base_spec.kind == KDFollowNetwork.KIND_MLP:
        return KDFollowNetwork.MlpSpec(base_spec.input_dim, config["widths"], base_spec.hidden_activation,
                                       base_spec.output_dim, base_spec.output_activation)
    return KDFollowNetwork.LstmSpec(base_spec.input_channels, config["widths"], config["dropout"],
                                    base_spec.projection, base_spec.steps)


def optimizer_with(base: KDFollowNetwork.OptimizerSpec, config: dict) -> KDFollowNetwork.OptimizerSpec:
    return KDFollowNetwork.OptimizerSpec(base.kind, config["learning_rate"], config["batch_size"], config["epochs"])


def cv_objective(base_spec, base_optimizer, split: DatasetSplit, normalizer: Normalizer, folds: int,
                 seed: int) -> Callable:
    """
    mean validation MSE (normalized) over expanding-window folds of the time-ordered training windows
    """
    ordered = split.train.select(time_order(split.train))
    fold_index = timeseries_cv(len(ordered), folds)

    def objective(config: dict) -> float:
        spec = spec_with(base_spec, config)
        optimizer = optimizer_with(base_optimizer, config)
        losses = []
        for f, (train_index, val_index) in enumerate(fold_index):
            try:
                model = train_network("search", spec, optimizer, ordered.select(train_index),
                                      ordered.select(val_index), normalizer, stage_seed(seed, str(f)))
            except DivergenceError:
                return math.inf
            losses.append(model.log[-1].val_loss)
        return float(numpy.mean(losses))
    return objective


def search_and_train(name: str, base_spec, base_optimizer, split: DatasetSplit, normalizer: Normalizer,
                     space: SearchSpace, seed: int, threads: int = 1) -> tuple:
    """
    choose hyperparameters by random search with time-series cross-validation, then train on the full
    training split
    """
    objective = cv_objective(base_spec, base_optimizer, split, normalizer, space.folds, stage_seed(seed, "cv"))
    best, trials = random_search(space, objective, stage_seed(seed, "search"), threads)
    LOG.info("search selected %s", best)
    model = train_network(name, spec_with(base_spec, best), optimizer_with(base_optimizer, best), split.train,
                          split.validation, normalizer, seed)
    return model, best, trials


def search_block(trials: list, best: dict) -> list:
    output = ["→ {}".format(get_text("Hyperparameter search"))]
    table = [[i + 1, c["epochs"], ",".join(str(w) for w in c["widths"]), c["learning_rate"], c["batch_size"],
              c["dropout"], score] for i, (c, score) in enumerate(trials)]
    create_output_table(output, table, ["#", get_text("Epochs"), get_text("Widths"), get_text("Learning rate"),
                                        get_text("Batch size"), get_text("Dropout"), get_text("CV MSE")],
                        ["d", "d", "", "f", "d", "f", "f"], 5)
    output.append("{}: {}".format(get_text("Selected"), best))
    return output


# ---------- multi-seed ordering experiment ----------
def ordering_experiment(presets: dict, n_pairs: int, duration: float, seeds: list, teacher_spec, teacher_optimizer,
                        student_spec, student_optimizer, alphas: list, max_spacing: float, history: float,
                        dt: float, tau: float, threads: int = 1) -> list:
    """
    for every seed: generate a synthetic dataset, train teacher, student and the alpha sweep, and record the test
    RMSE of each so the orderings teacher <= student and best KDNN <= student can be counted
    """
    rows = []
    for seed in seeds:
        pairs = KDFollowGipps.generate_synthetic_dataset(presets, n_pairs, stage_seed(seed, "synth"), duration, dt,
                                                         tau)
        split, normalizer, _ = KDFollowData.build_dataset(pairs, stage_seed(seed, "split"), max_spacing, history, dt)
        if len(split.test) == 0:
            raise DataError("seed {}: the synthetic test split is empty; raise the pair count or duration".format(seed))
        teacher = train_teacher(split, normalizer, teacher_spec, teacher_optimizer, stage_seed(seed, "teacher"))
        result = alpha_sweep(split, normalizer, teacher, student_spec, student_optimizer, alphas,
                             stage_seed(seed, "student"), threads)
        rows.append([seed, result.teacher_rmse, result.student_rmse, result.best_alpha, result.best_rmse()])
        LOG.info("seed %d: teacher %s, student %s, KDNN %s", seed, result.teacher_rmse, result.student_rmse,
                 result.best_rmse())
    return rows


def no_worse(rmse, reference) -> bool:
    return rmse is not None and reference is not None and rmse <= reference


def ordering_counts(rows: list) -> tuple:
    """
    seeds where the teacher, and where the best KDNN, is no worse than the student; missing errors never count
    """
    return sum(1 for r in rows if no_worse(r[1], r[2])), sum(1 for r in rows if no_worse(r[4], r[2]))


def ordering_block(rows: list) -> list:
    output = ["→ {}".format(get_text("Ordering across seeds"))]
    create_output_table(output, rows, [get_text("Seed"), get_text("RMSE of teacher network"),
                                       get_text("RMSE of student network"), get_text("Best alpha"),
                                       get_text("Prediction error of KDNN model")], ["d", "f", "f", "f", "f"], 3)
    teacher_wins, kdnn_wins = ordering_counts(rows)
    output.append(get_text("teacher no worse than student in {} of {} seeds").format(teacher_wins, len(rows)))
    output.append(get_text("KDNN no worse than student in {} of {} seeds").format(kdnn_wins, len(rows)))
    return output
