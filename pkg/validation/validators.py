"""
Field-level validation of run configurations.

Every validator returns ``(success, reasons)`` and collects every problem it finds
instead of stopping at the first one.
"""
import math
from typing import Any

ACTIVATIONS = ("relu", "gdn")
SEARCH_ORDERS = ("by_sensitivity", "given")

SECTIONS = ("model", "training", "draq", "search", "slimming", "dataset", "output_dir")

# (type, lower bound, upper bound, inclusive bounds); None bounds are open
_NUMERIC_FIELDS: dict[str, dict[str, tuple[type, float | None, float | None, bool]]] = {
    "model": {
        "N": (int, 4, 512, True),
        "M": (int, 4, 512, True),
        "depth": (int, 2, 4, True),
    },
    "training": {
        "lr": (float, 0.0, 1.0, False),
        "batch": (int, 1, 1024, True),
        "crop": (int, 4, 512, True),
        "iters": (int, 0, None, True),
        "seed": (int, 0, 2 ** 64 - 1, True),
        "log_every": (int, 1, None, True),
    },
    "draq": {
        "alpha": (float, 0.0, 0.5, False),
        "reg_strength": (float, 0.0, None, True),
        "recalib_period": (int, 1, None, True),
        "k_override": (float, 0.0, None, False),
        "bits": (int, 2, 16, True),
        "finetune_iters": (int, 0, None, True),
    },
    "search": {
        "eps": (float, 0.0, None, True),
        "floor_bits": (int, 2, 16, True),
        "start_bits": (int, 2, 16, True),
        "probe_bits": (int, 2, 16, True),
        "finetune_iters": (int, 0, None, True),
        "budget": (float, 2.0, 16.0, True),
    },
    "slimming": {
        "eta": (float, 0.0, None, True),
        "epsilon_p": (float, 0.0, None, False),
        "iters": (int, 0, None, True),
    },
    "synthetic": {
        "count": (int, 0, None, True),
        "size": (int, 4, 4096, True),
        "seed": (int, 0, 2 ** 64 - 1, True),
    },
}

_OTHER_FIELDS = {
    "model": {"activation", "slim"},
    "training": {"lambdas"},
    "draq": {"clip_activations", "regularize_weights"},
    "search": {"order"},
    "slimming": set(),
    "dataset": {"path", "synthetic", "eval_images"},
}

# Fields that may be null
_NULLABLE = {("draq", "recalib_period"), ("draq", "k_override"), ("search", "budget")}


def _is_number(value: Any, kind: type) -> bool:
    if isinstance(value, bool):
        return False
    if kind is int:
        return isinstance(value, int)
    return isinstance(value, (int, float)) and math.isfinite(value)


def validate_number(section: str, key: str, value: Any) -> str | None:
    """
    Check one numeric field against its type and range.

    :return: A reason naming the field, or None when the value is acceptable.
    :rtype: str | None
    """
    kind, lo, hi, inclusive = _NUMERIC_FIELDS[section][key]
    if value is None and (section, key) in _NULLABLE:
        return None
    if not _is_number(value, kind):
        return f"{section}.{key} must be {'an integer' if kind is int else 'a finite number'}, got {value!r}"
    if lo is not None and (value < lo or (value == lo and not inclusive)):
        return f"{section}.{key} must be {'>=' if inclusive else '>'} {lo}, got {value}"
    if hi is not None and (value > hi or (value == hi and not inclusive)):
        return f"{section}.{key} must be {'<=' if inclusive else '<'} {hi}, got {value}"
    return None


def _check_keys(section: str, data: dict[str, Any], reasons: list[str]) -> None:
    allowed = set(_NUMERIC_FIELDS.get(section, {})) | _OTHER_FIELDS.get(section, set())
    for key in data:
        if key not in allowed:
            reasons.append(f"unknown key {section}.{key}")


def _check_numbers(section: str, data: dict[str, Any], reasons: list[str]) -> None:
    for key in _NUMERIC_FIELDS[section]:
        if key in data:
            reason = validate_number(section, key, data[key])
            if reason:
                reasons.append(reason)


def _check_bool(section: str, data: dict[str, Any], key: str, reasons: list[str]) -> None:
    if key in data and not isinstance(data[key], bool):
        reasons.append(f"{section}.{key} must be a boolean, got {data[key]!r}")


def _validate_model(data: dict[str, Any], reasons: list[str]) -> None:
    if "activation" in data and data["activation"] not in ACTIVATIONS:
        reasons.append(f"model.activation must be one of {list(ACTIVATIONS)}, got {data['activation']!r}")
    _check_bool("model", data, "slim", reasons)
    if data.get("slim") is True and data.get("activation", "relu") != "gdn":
        reasons.append("model.slim requires model.activation 'gdn'")


def _validate_training(data: dict[str, Any], reasons: list[str]) -> None:
    lambdas = data.get("lambdas")
    if lambdas is None:
        reasons.append("training.lambdas is required")
    elif not isinstance(lambdas, list) or not lambdas:
        reasons.append(f"training.lambdas must be a non-empty list, got {lambdas!r}")
    else:
        for i, value in enumerate(lambdas):
            if not _is_number(value, float) or value <= 0:
                reasons.append(f"training.lambdas[{i}] must be a positive number, got {value!r}")
        numeric = [value for value in lambdas if _is_number(value, float)]
        if len(set(numeric)) != len(numeric):
            reasons.append("training.lambdas must not repeat a value")


def _validate_search(data: dict[str, Any], reasons: list[str]) -> None:
    if "order" in data and data["order"] not in SEARCH_ORDERS:
        reasons.append(f"search.order must be one of {list(SEARCH_ORDERS)}, got {data['order']!r}")
    floor, start = data.get("floor_bits"), data.get("start_bits")
    if _is_number(floor, int) and _is_number(start, int) and floor > start:
        reasons.append(f"search.floor_bits ({floor}) must not exceed search.start_bits ({start})")
    budget = data.get("budget")
    if _is_number(budget, float) and _is_number(floor, int) and budget < floor:
        reasons.append(f"search.budget ({budget}) is below search.floor_bits and cannot be met")


def _validate_dataset(data: dict[str, Any], reasons: list[str]) -> None:
    path, synthetic = data.get("path"), data.get("synthetic")
    if (path is None) == (synthetic is None):
        reasons.append("dataset needs exactly one of 'path' or 'synthetic'")
    if path is not None and (not isinstance(path, str) or not path):
        reasons.append(f"dataset.path must be a non-empty string, got {path!r}")
    if synthetic is not None:
        if not isinstance(synthetic, dict):
            reasons.append(f"dataset.synthetic must be an object, got {synthetic!r}")
        else:
            _check_keys("synthetic", synthetic, reasons)
            _check_numbers("synthetic", synthetic, reasons)
            for key in _NUMERIC_FIELDS["synthetic"]:
                if key not in synthetic:
                    reasons.append(f"dataset.synthetic.{key} is required")
    eval_images = data.get("eval_images", 0)
    if not _is_number(eval_images, int) or eval_images < 0:
        reasons.append(f"dataset.eval_images must be a non-negative integer, got {eval_images!r}")


def validate_run_config(data: Any) -> tuple[bool, list[str]]:
    """
    Validate a run configuration parsed from JSON.

    Unknown keys are rejected at every level; missing sections fall back to their
    defaults except ``training.lambdas`` and ``dataset``, which are required.

    :param data: The parsed configuration.
    :return: True and an empty list if valid, otherwise False and every reason found.
    :rtype: tuple[bool, list[str]]
    """
    if not isinstance(data, dict):
        return False, [f"configuration must be a JSON object, got {type(data).__name__}"]
    reasons: list[str] = []
    for key in data:
        if key not in SECTIONS:
            reasons.append(f"unknown key {key}")
    for section in ("model", "training", "draq", "search", "slimming", "dataset"):
        if section not in data:
            if section in ("training", "dataset"):
                reasons.append(f"section '{section}' is required")
            continue
        body = data[section]
        if not isinstance(body, dict):
            reasons.append(f"section '{section}' must be an object")
            continue
        _check_keys(section, body, reasons)
        if section in _NUMERIC_FIELDS:
            _check_numbers(section, body, reasons)
        match section:
            case "model":
                _validate_model(body, reasons)
            case "training":
                _validate_training(body, reasons)
            case "draq":
                _check_bool("draq", body, "clip_activations", reasons)
                _check_bool("draq", body, "regularize_weights", reasons)
            case "search":
                _validate_search(body, reasons)
            case "dataset":
                _validate_dataset(body, reasons)
    if "output_dir" in data and (not isinstance(data["output_dir"], str) or not data["output_dir"]):
        reasons.append(f"output_dir must be a non-empty string, got {data['output_dir']!r}")
    return not reasons, reasons
