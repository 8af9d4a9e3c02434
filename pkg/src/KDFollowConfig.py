"""
Import and export of configuration options

The configuration file is flat text of key = value lines, keys carrying a section prefix (e.g., "teacher.layers").
Every key may be overridden by an environment variable named DCF_ followed by the key in upper case with dots
replaced by underscores (e.g., DCF_TEACHER_LAYERS).
"""

import logging
import os
from typing import Optional

import KDFollowConstants
from KDFollowConstants import AV_HDV, HDV_AV, HDV_HDV
from KDFollowLanguage import get_text
from KDFollowMessages import ConfigError
from KDFollowUtils import parse_float_list, parse_int_list

LOG = logging.getLogger(__name__)

ENV_PREFIX = "DCF_"
CONFIG_FILE = "kdfollow.config"

# keys naming where a run writes rather than what it computes
LOCATION_KEYS = ("run.out",)

# config key prefix for each synthetic scenario preset
PRESET_KEYS = {AV_HDV: "synth.av_hdv", HDV_AV: "synth.hdv_av", HDV_HDV: "synth.hdv_hdv"}
PRESET_PARAMS = ("a_max", "b", "b_hat", "v_desired", "s_eff", "jitter", "base_speed_min", "base_speed_max",
                 "lead_amplitude", "lead_brake", "stop_probability", "noise")


def default_presets() -> dict:
    """
    scenario presets by pair class; the AV follower is milder and keeps a longer standstill distance and its
    (human) lead drives more smoothly, so its speed variability is the lowest
    """
    return {
        AV_HDV: {"a_max": 1.2, "b": -2.5, "b_hat": -3.5, "v_desired": 12.5, "s_eff": 8.0, "jitter": 0.05,
                 "base_speed_min": 6.0, "base_speed_max": 9.0, "lead_amplitude": 1.0, "lead_brake": 2.5,
                 "stop_probability": 0.1, "noise": 0.03},
        HDV_AV: {"a_max": 2.2, "b": -3.0, "b_hat": -3.5, "v_desired": 14.5, "s_eff": 6.0, "jitter": 0.15,
                 "base_speed_min": 5.0, "base_speed_max": 13.0, "lead_amplitude": 3.0, "lead_brake": 3.0,
                 "stop_probability": 0.2, "noise": 0.1},
        HDV_HDV: {"a_max": 1.8, "b": -3.0, "b_hat": -3.5, "v_desired": 13.9, "s_eff": 6.5, "jitter": 0.15,
                  "base_speed_min": 4.0, "base_speed_max": 12.0, "lead_amplitude": 2.5, "lead_brake": 3.0,
                  "stop_probability": 0.2, "noise": 0.1},
    }


def default_config() -> dict:
    """
    create the default configuration
    """
    config = {
        "run.seed": 0,
        "run.threads": 1,
        "run.out": "kdfollow_out",
        "data.path": "",
        "data.dt": KDFollowConstants.DEFAULT_DT,
        "data.history": KDFollowConstants.DEFAULT_HISTORY,
        "data.max_spacing": KDFollowConstants.DEFAULT_MAX_SPACING,
        "stats.bins": [5.0, 15.0, 25.0, 35.0, 45.0],
        "stats.categories": [0.0, 10.0, 15.0, 30.0],
        "stats.moment_variable": "speed_diff",
        "student.hidden": [60, 60],
        "student.epochs": 5,
        "student.learning_rate": 0.01,
        "student.batch_size": 100,
        "student.optimizer": KDFollowConstants.OPT_ADAM,
        "teacher.layers": [475, 61],
        "teacher.dropout": 0.3,
        "teacher.projection": 0,
        "teacher.epochs": 10,
        "teacher.learning_rate": 0.0016,
        "teacher.batch_size": 161,
        "teacher.optimizer": KDFollowConstants.OPT_ADAM,
        "distill.alpha": 0.5,
        "distill.alphas": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        "distill.cache_teacher": False,
        "search.budget": 20,
        "search.folds": 3,
        "search.model": "student",
        "gipps.a_max": 1.7,
        "gipps.b": -3.0,
        "gipps.b_hat": -3.5,
        "gipps.v_desired": 13.9,
        "gipps.s_eff": 6.5,
        "gipps.tau": 1.0,
        "synth.pairs": 30,
        "synth.duration": 30.0,
        "eval.horizon": 0.0,
        "eval.repetitions": 5,
        "eval.bench_batch": 1000,
        "eval.profile_pairs": 6,
    }
    for name, column in KDFollowConstants.DEFAULT_SCHEMA.items():
        config["schema." + name] = column
    for pair_class, preset in default_presets().items():
        for param, value in preset.items():
            config["{}.{}".format(PRESET_KEYS[pair_class], param)] = value
    return config


def _positive_float(value: str) -> float:
    value = float(value)
    if not value > 0:
        raise ValueError
    return value


def _negative_float(value: str) -> float:
    value = float(value)
    if not value < 0:
        raise ValueError
    return value


def _int_at_least(value: str, minimum: int) -> int:
    value = int(value)
    if value < minimum:
        raise ValueError
    return value


def _fraction(value: str, closed_top: bool = True) -> float:
    value = float(value)
    if (value < 0) or (value > 1) or ((not closed_top) and value == 1):
        raise ValueError
    return value


def _edges(value: str) -> list:
    edges = parse_float_list(value)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError
    return edges


def _bool(value: str) -> bool:
    if value.lower() in ("true", "yes", "1"):
        return True
    if value.lower() in ("false", "no", "0"):
        return False
    raise ValueError


def validate_config(key: str, value):
    """
    validate whether the imported value is valid for the specified key, including conversion from strings

    unknown keys and invalid values raise a ConfigError
    """
    if key not in default_config():
        raise ConfigError(get_text("config_unknown_key").format(key))
    if not isinstance(value, str):
        return value
    try:
        value = value.strip()
        if key in ("run.seed",):
            return _int_at_least(value, 0)
        elif key in ("run.threads", "student.epochs", "student.batch_size", "teacher.epochs", "teacher.batch_size",
                     "search.budget", "eval.repetitions", "eval.bench_batch", "eval.profile_pairs"):
            return _int_at_least(value, 1)
        elif key in ("teacher.projection", "synth.pairs"):
            return _int_at_least(value, 0)
        elif key == "search.folds":
            return _int_at_least(value, 2)
        elif key in ("run.out", "data.path") or key.startswith("schema."):
            return value
        elif key in ("data.dt", "data.history", "data.max_spacing", "student.learning_rate", "teacher.learning_rate",
                     "gipps.a_max", "gipps.v_desired", "gipps.s_eff", "gipps.tau", "synth.duration"):
            return _positive_float(value)
        elif key in ("gipps.b", "gipps.b_hat"):
            return _negative_float(value)
        elif key == "eval.horizon":
            horizon = float(value)
            if horizon < 0:
                raise ValueError
            return horizon
        elif key in ("stats.bins", "stats.categories"):
            return _edges(value)
        elif key == "stats.moment_variable":
            if value not in ("speed_diff", "foll_accel"):
                raise ValueError
            return value
        elif key in ("student.hidden", "teacher.layers"):
            widths = parse_int_list(value)
            if len(widths) < 1 or min(widths) < 1:
                raise ValueError
            return widths
        elif key in ("student.optimizer", "teacher.optimizer"):
            if value.lower() not in (KDFollowConstants.OPT_ADAM, KDFollowConstants.OPT_SGD):
                raise ValueError
            return value.lower()
        elif key == "teacher.dropout":
            return _fraction(value, closed_top=False)
        elif key == "distill.alpha":
            return _fraction(value)
        elif key == "distill.alphas":
            alphas = parse_float_list(value)
            if len(alphas) < 1:
                raise ValueError
            for a in alphas:
                _fraction(str(a))
            return alphas
        elif key == "distill.cache_teacher":
            return _bool(value)
        elif key == "search.model":
            if value not in ("student", "teacher"):
                raise ValueError
            return value
        elif key.startswith("synth."):
            param = key.split(".")[-1]
            if param in ("b", "b_hat"):
                return _negative_float(value)
            elif param == "jitter":
                jitter = float(value)
                if (jitter < 0) or (jitter >= 0.5):
                    raise ValueError
                return jitter
            elif param in ("stop_probability",):
                return _fraction(value)
            elif param in ("noise", "lead_amplitude", "base_speed_min"):
                x = float(value)
                if x < 0:
                    raise ValueError
                return x
            return _positive_float(value)
    except ValueError:
        raise ConfigError(get_text("config_bad_value").format(key, value))
    return value


def check_consistency(config: dict) -> None:
    """
    cross-key checks which cannot be made one key at a time
    """
    for pair_class, prefix in PRESET_KEYS.items():
        if config[prefix + ".base_speed_max"] < config[prefix + ".base_speed_min"]:
            raise ConfigError(get_text("config_bad_value").format(prefix + ".base_speed_max",
                                                                  config[prefix + ".base_speed_max"]))
    steps = config["data.history"] / config["data.dt"]
    if abs(steps - round(steps)) > 1e-9:
        raise ConfigError(get_text("config_bad_value").format("data.history", config["data.history"]))


def import_config(filename: Optional[str] = None, environ: Optional[dict] = None) -> dict:
    """
    Import a configuration file if one is given, then apply environment overrides. Return values in file,
    or defaults, as necessary
    """
    config = default_config()
    if filename is not None:
        try:
            with open(filename, "r") as infile:
                for n, line in enumerate(infile, start=1):
                    line = line.split("#")[0].strip()
                    if line == "":
                        continue
                    if "=" not in line:
                        raise ConfigError(get_text("config_bad_line").format(n, filename))
                    key, value = line.split("=", 1)
                    key = key.strip()
                    config[key] = validate_config(key, value)
        except IOError:
            raise ConfigError(get_text("artifact_missing").format(filename))
    if environ is None:
        environ = os.environ
    for key in config:
        env_name = ENV_PREFIX + key.upper().replace(".", "_")
        if env_name in environ:
            LOG.info("configuration %s overridden from %s", key, env_name)
            config[key] = validate_config(key, environ[env_name])
    check_consistency(config)
    return config


def format_config_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(format_config_value(v) for v in value)
    return str(value)


def reproducible_items(config: dict) -> list:
    """
    the sorted (key, value) pairs which define a run's results; where the run writes is not among them
    """
    return [(key, config[key]) for key in sorted(config) if key not in LOCATION_KEYS]


def export_config(config: dict, filename: str) -> None:
    """
    export the resolved configuration options so the run can be reproduced
    """
    with open(filename, "w") as outfile:
        for key, value in reproducible_items(config):
            outfile.write("{} = {}\n".format(key, format_config_value(value)))


def schema_from_config(config: dict) -> dict:
    return {name: config["schema." + name] for name in KDFollowConstants.DEFAULT_SCHEMA}
