"""
Text used in reports and messages
"""

current_language = "English"


ENGLISH_DICTIONARY = {"Alpha": "Alpha",
                      "artifact_missing": "Required artifact not found: {}",
                      "Batch size": "Batch size",
                      "Best alpha": "Best alpha",
                      "bin": "bin",
                      "Category": "Category",
                      "Class": "Class",
                      "Closed-loop rollouts": "Closed-loop rollouts",
                      "Collisions": "Collisions",
                      "Compute Metering": "Compute Metering",
                      "config_bad_line": "Line {} of {} is not of the form key = value",
                      "config_bad_value": "Invalid value for {}: {}",
                      "config_unknown_key": "Unknown configuration key: {}",
                      "CV MSE": "CV MSE",
                      "degenerate sample": "degenerate sample",
                      "df between": "df between",
                      "df within": "df within",
                      "divergence detected": "divergence detected at epoch {}, batch {}",
                      "Dropout": "Dropout",
                      "Epoch": "Epoch",
                      "Epochs": "Epochs",
                      "Error Difference with student network": "Error Difference with student network",
                      "F": "F",
                      "Gipps fit fallback": "Gipps fit failed for pair {}; using preset means",
                      "Hyperparameter search": "Hyperparameter search",
                      "Ingested Trajectories": "Ingested Trajectories",
                      "IQR": "IQR",
                      "KDNN no worse than student in {} of {} seeds": "KDNN no worse than student in {} of {} seeds",
                      "Kurtosis": "Kurtosis",
                      "Learning rate": "Learning rate",
                      "Loaded {} pairs from {}": "Loaded {} pairs from {}",
                      "Mean": "Mean",
                      "Mean Acceleration": "Mean Acceleration",
                      "Mean Following Speed": "Mean Following Speed",
                      "Median seconds": "Median seconds",
                      "Min TTC": "Min TTC",
                      "Model": "Model",
                      "Moments": "Moments",
                      "Multiply-add ratio of teacher to student": "Multiply-add ratio of teacher to student",
                      "Multiply-adds": "Multiply-adds",
                      "n": "n",
                      "no empty group": "RMSE group {} is empty",
                      "Ordering across seeds": "Ordering across seeds",
                      "p": "p",
                      "Pair": "Pair",
                      "Pair group": "Pair group",
                      "Pairs": "Pairs",
                      "pairs retained": "{} pairs retained",
                      "points removed": "{} points at or beyond {} m removed",
                      "Prediction error of KDNN model": "Prediction error of KDNN model",
                      "Prediction errors by pair": "Prediction errors by pair",
                      "Reference": "Reference",
                      "RMSE": "RMSE",
                      "RMSE by pair group": "RMSE by pair group",
                      "RMSE of student network": "RMSE of student network",
                      "RMSE of teacher network": "RMSE of teacher network",
                      "Seconds per 10k": "Seconds per 10k",
                      "Seed": "Seed",
                      "segments dropped": "{} segments shorter than {} points dropped",
                      "Selected": "Selected",
                      "Skewness": "Skewness",
                      "Spacing (m)": "Spacing (m)",
                      "Spacing Filter": "Spacing Filter",
                      "Speed standard deviation (m/s)": "Speed standard deviation (m/s)",
                      "Speed Variability": "Speed Variability",
                      "Split": "Split",
                      "Statistical Analysis with ANOVA": "Statistical Analysis with ANOVA",
                      "Std": "Std",
                      "Synthetic Data": "Synthetic Data",
                      "teacher no worse than student in {} of {} seeds":
                          "teacher no worse than student in {} of {} seeds",
                      "test": "test",
                      "Test RMSE": "Test RMSE (m/s)",
                      "Time-to-Collision": "Time-to-Collision",
                      "train": "train",
                      "Training": "Training",
                      "Training loss": "Training loss",
                      "Validation loss": "Validation loss",
                      "Validation RMSE": "Validation RMSE (m/s)",
                      "validation": "validation",
                      "Variable": "Variable",
                      "Widths": "Widths",
                      "Windows": "Windows",
                      "Windows per split": "Windows per split",
                      "{} windows built from {} segments": "{} windows built from {} segments"}


LANGUAGES = {"English": ENGLISH_DICTIONARY}


def language_list() -> list:
    return list(LANGUAGES.keys())


def get_text(text: str) -> str:
    """
    return the text in the current language, falling back to the key itself when missing
    """
    return LANGUAGES[current_language].get(text, text)
