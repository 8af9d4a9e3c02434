"""
Gipps car-following baseline and the synthetic trajectory generator built on it
"""

import copy
import logging
import math
from typing import Optional

import numpy

import KDFollowConfig
import KDFollowConstants
from KDFollowData import TrajectoryPair, make_windows
from KDFollowLanguage import get_text
from KDFollowMessages import ConfigError, DataError, report_warning

LOG = logging.getLogger(__name__)

LEAD_MAX_ACCEL = 2.0  # m/s^2
LEAD_RESPONSE = 1.0  # s, time constant of the lead's speed tracking
SEGMENT_SECONDS = (5.0, 15.0)
PERIOD_SECONDS = (8.0, 20.0)
FIT_FACTORS = (0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4)
FIT_SWEEPS = 2
B_HAT_OFFSET = -0.5


class GippsParams:
    def __init__(self, a_max: float = 1.7, b: float = -3.0, b_hat: float = -3.5, v_desired: float = 13.9,
                 s_eff: float = 6.5, tau: float = 1.0):
        """
        :param a_max: desired acceleration (m/s^2)
        :param b: desired braking, negative (m/s^2)
        :param b_hat: braking assumed of the lead, negative (m/s^2)
        :param v_desired: desired speed (m/s)
        :param s_eff: effective lead size plus margin (m)
        :param tau: reaction time (s)
        """
        if not (a_max > 0 and b < 0 and b_hat < 0 and v_desired > 0 and s_eff > 0 and tau > 0):
            raise ConfigError("invalid Gipps parameters: a_max {}, b {}, b_hat {}, V {}, s_eff {}, tau {}".format(
                a_max, b, b_hat, v_desired, s_eff, tau))
        self.a_max = a_max
        self.b = b
        self.b_hat = b_hat
        self.v_desired = v_desired
        self.s_eff = s_eff
        self.tau = tau

    def replace(self, **changes) -> "GippsParams":
        values = {"a_max": self.a_max, "b": self.b, "b_hat": self.b_hat, "v_desired": self.v_desired,
                  "s_eff": self.s_eff, "tau": self.tau}
        values.update(changes)
        return GippsParams(**values)

    def as_list(self) -> list:
        return [self.a_max, self.b, self.b_hat, self.v_desired, self.s_eff, self.tau]


class ScenarioPreset:
    """
    distribution of follower parameters and lead behavior for one pair class
    """
    def __init__(self, pair_class: str, means: GippsParams, jitter: float, base_speed_min: float,
                 base_speed_max: float, lead_amplitude: float, lead_brake: float, stop_probability: float,
                 noise: float):
        if not 0 <= jitter < 0.5:
            raise ConfigError("preset jitter must be in [0, 0.5)")
        if lead_brake > -means.b_hat:
            raise ConfigError("preset {}: lead braking {} exceeds the assumed braking {}".format(
                pair_class, lead_brake, means.b_hat))
        self.pair_class = pair_class
        self.means = means
        self.jitter = jitter
        self.base_speed_min = base_speed_min
        self.base_speed_max = base_speed_max
        self.lead_amplitude = lead_amplitude
        self.lead_brake = lead_brake
        self.stop_probability = stop_probability
        self.noise = noise

    def sample_params(self, rng) -> GippsParams:
        """
        follower parameters jittered multiplicatively around the preset means; b_hat stays fixed
        """
        factors = 1 + self.jitter * rng.uniform(-1, 1, size=4)
        return self.means.replace(a_max=self.means.a_max * factors[0], b=self.means.b * factors[1],
                                  v_desired=self.means.v_desired * factors[2], s_eff=self.means.s_eff * factors[3])


def params_from_config(config: dict) -> GippsParams:
    return GippsParams(config["gipps.a_max"], config["gipps.b"], config["gipps.b_hat"], config["gipps.v_desired"],
                       config["gipps.s_eff"], config["gipps.tau"])


def presets_from_config(config: dict) -> dict:
    presets = {}
    for pair_class, prefix in KDFollowConfig.PRESET_KEYS.items():
        def value(name):
            return config["{}.{}".format(prefix, name)]
        means = GippsParams(value("a_max"), value("b"), value("b_hat"), value("v_desired"), value("s_eff"),
                            config["gipps.tau"])
        presets[pair_class] = ScenarioPreset(pair_class, means, value("jitter"), value("base_speed_min"),
                                             value("base_speed_max"), value("lead_amplitude"), value("lead_brake"),
                                             value("stop_probability"), value("noise"))
    return presets


# ---------- model ----------
def gipps_step(spacing, v_foll, v_lead, params: GippsParams):
    """
    follower speed one reaction time ahead: the smaller of the free-acceleration and safe-braking speeds,
    never negative; a negative discriminant in the braking branch means an emergency stop

    works on scalars or numpy arrays
    """
    v = numpy.asarray(v_foll, dtype=float)
    ratio = v / params.v_desired
    v_accel = v + 2.5 * params.a_max * params.tau * (1 - ratio) * numpy.sqrt(0.025 + ratio)
    discriminant = (params.b**2 * params.tau**2 -
                    params.b * (2 * (numpy.asarray(spacing, dtype=float) - params.s_eff) - v * params.tau -
                                numpy.asarray(v_lead, dtype=float)**2 / params.b_hat))
    v_brake = numpy.where(discriminant >= 0, params.b * params.tau + numpy.sqrt(numpy.maximum(discriminant, 0)), 0.0)
    v_next = numpy.maximum(0.0, numpy.minimum(v_accel, v_brake))
    if v_next.ndim == 0:
        return float(v_next)
    return v_next


def update_steps(params: GippsParams, dt: float) -> int:
    steps = params.tau / dt
    if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
        raise ConfigError("reaction time {} s is not an integer multiple of dt {} s".format(params.tau, dt))
    return int(round(steps))


def gipps_rollout(lead_t, lead_pos, lead_speed, params: GippsParams, initial_spacing: float, initial_speed: float,
                  dt: float = KDFollowConstants.DEFAULT_DT, pair_id: str = "", pair_class: str = "") -> TrajectoryPair:
    """
    simulate a follower behind an observed lead

    The follower decides every tau seconds; between decisions its speed ramps linearly to the decided speed and
    positions advance by trapezoidal integration
    """
    lead_t = numpy.asarray(lead_t, dtype=float)
    lead_pos = numpy.asarray(lead_pos, dtype=float)
    lead_speed = numpy.asarray(lead_speed, dtype=float)
    n = update_steps(params, dt)
    k = len(lead_t)
    if k > 0 and initial_spacing <= params.s_eff:
        raise DataError("initial spacing {} m does not exceed the effective size {} m".format(initial_spacing,
                                                                                            params.s_eff))
    foll_pos = numpy.zeros(k)
    foll_speed = numpy.zeros(k)
    if k > 0:
        foll_pos[0] = lead_pos[0] - initial_spacing
        foll_speed[0] = initial_speed
    v_next = initial_speed
    for q in range(1, k):
        m = ((q - 1) // n) * n
        if q - 1 == m:
            v_next = gipps_step(lead_pos[m] - foll_pos[m], foll_speed[m], lead_speed[m], params)
        foll_speed[q] = foll_speed[m] + (v_next - foll_speed[m]) * ((q - m) / n)
        foll_pos[q] = foll_pos[q-1] + dt * (foll_speed[q-1] + foll_speed[q]) / 2
    return TrajectoryPair(pair_id, pair_class, lead_t, lead_pos, foll_pos, lead_speed, foll_speed, dt=dt)


class GippsModel:
    """
    one-step Gipps predictor with the same predict interface as the trained networks

    The prediction reproduces the rollout exactly: the decision instant preceding the target is located from the
    window's absolute time, and the speed ramp from that instant is evaluated at the target step
    """
    def __init__(self, default_params: GippsParams, dt: float = KDFollowConstants.DEFAULT_DT,
                 params_by_pair: Optional[dict] = None):
        self.default_params = default_params
        self.dt = dt
        self.params_by_pair = {} if params_by_pair is None else params_by_pair
        self.name = KDFollowConstants.MODEL_GIPPS

    def params_for(self, pair_id) -> GippsParams:
        return self.params_by_pair.get(pair_id, self.default_params)

    def predict(self, features: numpy.ndarray, times, pair_ids=None) -> numpy.ndarray:
        features = numpy.asarray(features, dtype=float)
        times = numpy.asarray(times, dtype=float)
        prediction = numpy.zeros(len(features))
        if pair_ids is None:
            pair_ids = numpy.full(len(features), None, dtype=object)
        pair_ids = numpy.asarray(pair_ids, dtype=object)
        for pair_id in set(pair_ids):
            rows = numpy.flatnonzero(pair_ids == pair_id)
            prediction[rows] = predict_with_params(features[rows], times[rows], self.params_for(pair_id), self.dt)
        return prediction


def predict_with_params(features: numpy.ndarray, times: numpy.ndarray, params: GippsParams,
                        dt: float) -> numpy.ndarray:
    n = update_steps(params, dt)
    steps = features.shape[1]
    last_index = numpy.rint(times / dt).astype(int)
    phase = numpy.mod(last_index, n)
    # a decision instant older than the window falls back to its first step
    anchor = numpy.maximum(steps - 1 - phase, 0)
    rows = numpy.arange(len(features))
    spacing = features[rows, anchor, KDFollowConstants.CHANNEL_SPACING]
    v_lead = features[rows, anchor, KDFollowConstants.CHANNEL_LEAD_SPEED]
    v_foll = features[rows, anchor, KDFollowConstants.CHANNEL_SPEED_DIFF] + v_lead
    v_next = gipps_step(spacing, v_foll, v_lead, params)
    ramp = (steps - anchor) / n
    return v_foll + (v_next - v_foll) * ramp


# ---------- calibration ----------
def fit_objective(windows, params: GippsParams, dt: float) -> float:
    prediction = predict_with_params(windows.features, windows.times, params, dt)
    return float(numpy.sum((prediction - windows.targets)**2))


def fit_gipps_params(segments: list, start: GippsParams, history: float = KDFollowConstants.DEFAULT_HISTORY,
                     dt: float = KDFollowConstants.DEFAULT_DT) -> GippsParams:
    """
    least-squares fit of a_max, V, b and s_eff to one pair's one-step speeds by coordinate grid search, b_hat
    following b with a fixed offset; a pair which cannot be fitted keeps the starting (preset mean) parameters
    """
    label = segments[0].pair_id if len(segments) > 0 else "?"
    windows = make_windows(segments, history, dt)
    if len(windows) == 0:
        report_warning(get_text("Gipps fit fallback").format(label), "no windows")
        return start
    best = start.replace(b_hat=start.b + B_HAT_OFFSET)
    best_score = fit_objective(windows, best, dt)
    if not math.isfinite(best_score):
        report_warning(get_text("Gipps fit fallback").format(label), "non-finite error")
        return start
    for _ in range(FIT_SWEEPS):
        for name in ("a_max", "v_desired", "b", "s_eff"):
            center = getattr(best, name)
            for factor in FIT_FACTORS:
                changes = {name: center * factor}
                if name == "b":
                    changes["b_hat"] = center * factor + B_HAT_OFFSET
                candidate = best.replace(**changes)
                score = fit_objective(windows, candidate, dt)
                if score < best_score:
                    best, best_score = candidate, score
    LOG.debug("pair %s fitted: %s (SSE %g)", label, best.as_list(), best_score)
    return best


def fit_gipps_model(segments: list, default_params: GippsParams, presets: Optional[dict] = None,
                    history: float = KDFollowConstants.DEFAULT_HISTORY,
                    dt: float = KDFollowConstants.DEFAULT_DT) -> GippsModel:
    """
    fit parameters for every pair, starting from the preset means of its class when presets are given
    """
    by_pair = {}
    for segment in segments:
        by_pair.setdefault(segment.pair_id, []).append(segment)
    params_by_pair = {}
    for pair_id in sorted(by_pair):
        pair_class = by_pair[pair_id][0].pair_class
        start = default_params
        if presets is not None and pair_class in presets:
            start = presets[pair_class].means
        params_by_pair[pair_id] = fit_gipps_params(by_pair[pair_id], start, history, dt)
    return GippsModel(default_params, dt, params_by_pair)


# ---------- synthetic data ----------
def lead_speed_profile(rng, duration: float, dt: float, base_speed_min: float, base_speed_max: float,
                       amplitude: float, lead_brake: float, stop_probability: float) -> tuple:
    """
    lead speeds tracking a piecewise sinusoidal target with occasional stops; acceleration is bounded by
    LEAD_MAX_ACCEL and braking by lead_brake

    returns times and speeds
    """
    k = int(round(duration / dt)) + 1
    t = numpy.arange(k) * dt
    target = numpy.zeros(k)
    start = 0
    while start < k:
        length = int(round(rng.uniform(*SEGMENT_SECONDS) / dt))
        stop = min(k, start + max(length, 1))
        base = rng.uniform(base_speed_min, base_speed_max)
        period = rng.uniform(*PERIOD_SECONDS)
        phase = rng.uniform(0, 2 * math.pi)
        if start > 0 and rng.random() < stop_probability:
            target[start:stop] = 0
        else:
            target[start:stop] = numpy.maximum(base + amplitude * numpy.sin(2 * math.pi * t[start:stop] / period +
                                                                            phase), 0)
        start = stop
    speed = numpy.zeros(k)
    if k > 0:
        speed[0] = target[0]
    for q in range(1, k):
        accel = min(max((target[q] - speed[q-1]) / LEAD_RESPONSE, -lead_brake), LEAD_MAX_ACCEL)
        speed[q] = max(0.0, speed[q-1] + accel * dt)
    return t, speed


def integrate_positions(speed: numpy.ndarray, dt: float, start: float = 0.0) -> numpy.ndarray:
    pos = numpy.zeros(len(speed))
    if len(speed) > 0:
        pos[0] = start
        pos[1:] = start + numpy.cumsum(dt * (speed[:-1] + speed[1:]) / 2)
    return pos


def safe_initial_spacing(params: GippsParams, speed: float) -> float:
    """
    smallest spacing at which the safe-braking speed behind a lead at the same speed is that speed, plus 2 m
    """
    braking_gap = speed**2 * (1 / abs(params.b) - 1 / abs(params.b_hat)) / 2
    return params.s_eff + 1.5 * speed * params.tau + max(braking_gap, 0.0) + 2.0


def generate_pair(preset: ScenarioPreset, rng, pair_id: str, duration: float, dt: float,
                  noisy: bool = True) -> tuple:
    """
    simulate one pair; returns the observed pair and the parameters it was generated with
    """
    params = preset.sample_params(rng)
    t, lead_speed = lead_speed_profile(rng, duration, dt, preset.base_speed_min, preset.base_speed_max,
                                       preset.lead_amplitude, preset.lead_brake, preset.stop_probability)
    v0 = float(lead_speed[0]) if len(lead_speed) > 0 else 0.0
    spacing0 = safe_initial_spacing(params, v0) + rng.uniform(0, 5)
    lead_pos = integrate_positions(lead_speed, dt, spacing0)
    pair = gipps_rollout(t, lead_pos, lead_speed, params, spacing0, v0, dt, pair_id, preset.pair_class)
    if noisy and preset.noise > 0:
        pair = TrajectoryPair(pair_id, preset.pair_class, pair.t, pair.lead_pos, pair.foll_pos,
                              numpy.maximum(pair.lead_speed + rng.normal(0, preset.noise, len(pair)), 0),
                              numpy.maximum(pair.foll_speed + rng.normal(0, preset.noise, len(pair)), 0), dt=dt)
    return pair, params


def generate_synthetic_dataset(presets: dict, n_pairs: int, seed: int, duration: float = 30.0,
                               dt: float = KDFollowConstants.DEFAULT_DT, tau: Optional[float] = None,
                               noisy: bool = True) -> list:
    """
    n_pairs simulated pairs of every class in presets

    each pair draws from its own seed, derived from (seed, class, index), so the dataset does not depend on
    generation order
    """
    pairs = []
    for c, pair_class in enumerate(KDFollowConstants.PAIR_CLASSES):
        if pair_class not in presets:
            continue
        preset = presets[pair_class]
        if tau is not None and tau != preset.means.tau:
            preset = copy.copy(preset)
            preset.means = preset.means.replace(tau=tau)
        for i in range(n_pairs):
            rng = numpy.random.default_rng(numpy.random.SeedSequence([seed, c, i]))
            pair, _ = generate_pair(preset, rng, "{}-{:04d}".format(pair_class, i + 1), duration, dt, noisy)
            pairs.append(pair)
    LOG.info("generated %d synthetic pairs", len(pairs))
    return pairs
