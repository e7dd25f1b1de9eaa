"""Pipeline configuration: flat ``section.key = value`` files with overrides.

Precedence, lowest first: built-in defaults, the config file, environment
variables ``POISID__SECTION__KEY``, then ``--set section.key=value`` flags.
"""

import hashlib
import os

ENV_PREFIX = "POISID__"

DEFAULTS = {
    "data.checkins": "",
    "data.delimiter": "tab",
    "data.header": False,
    "data.time_format": "",
    "data.col_user": 0,
    "data.col_poi": 1,
    "data.col_category": 3,
    "data.col_lat": 4,
    "data.col_lon": 5,
    "data.col_time": 7,
    "filter.min_poi_interactions": 10,
    "filter.min_user_checkins": 10,
    "filter.train_ratio": 0.8,
    "filter.validation_ratio": 0.1,
    "filter.test_ratio": 0.1,
    "features.precision": 8,
    "features.top_k_slots": 10,
    "features.top_k_visitors": 10,
    "rqvae.num_layers": 3,
    "rqvae.codebook_size": 32,
    "rqvae.code_dim": 64,
    "rqvae.encoder_hidden": "512,128",
    "rqvae.commitment_beta": 0.25,
    "rqvae.quant_weight": 1.0,
    "rqvae.diversity_weight": 0.25,
    "rqvae.batch_size": 256,
    "rqvae.max_epochs": 200,
    "rqvae.patience": 10,
    "rqvae.learning_rate": 1e-3,
    "rqvae.kmeans_iters": 10,
    "rqvae.compactness_operand": "assigned",
    "rqvae.utilization_tau": 0.02,
    "rqvae.validation_fraction": 0.0,
    "prompts.max_history": 50,
    "prompts.blank_rate": 5,
    "prompts.variants": "full,no_sid,no_time",
    "eval.history_len": 50,
    "eval.smoothing": 0.01,
    "eval.n_pairs": 500,
    "eval.n_boot": 1000,
    "eval.prefix_depths": "1,2",
    "run.seed": 0,
    "run.out_dir": "out",
}

# Keys left out of the manifest echo: where outputs go does not change them.
NOT_ECHOED = ("run.out_dir",)
DELIMITERS = {"tab": "\t", "comma": ",", "semicolon": ";", "pipe": "|", "space": " "}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


def _coerce(key, raw, errors):
    kind = type(DEFAULTS[key])
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        errors.append(f"{key}: expected {kind.__name__}, got {raw!r}")
        return DEFAULTS[key]


def parse_assignments(lines, source, errors):
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            errors.append(f"{source}:{n}: expected 'section.key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            errors.append(f"{source}:{n}: unknown key {key!r}")
            continue
        out[key] = value
    return out


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            parts = name[len(ENV_PREFIX) :].lower().split("__")
            out[(".".join(parts), name)] = value
    return out


def _int_list(key, text, errors):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        errors.append(f"{key}: expected comma-separated integers, got {text!r}")
        return []
    return vals


def validate(cfg):
    """Every problem at once, as a list of messages."""
    errors = []

    def need(cond, msg):
        if not cond:
            errors.append(msg)

    need(cfg["data.delimiter"] in DELIMITERS or len(cfg["data.delimiter"]) == 1, "data.delimiter must be a name in "
         f"{sorted(DELIMITERS)} or a single character")
    for k in ("data.col_user", "data.col_poi", "data.col_category", "data.col_lat", "data.col_lon", "data.col_time"):
        need(cfg[k] >= 0, f"{k} must be >= 0")
    need(cfg["filter.min_poi_interactions"] >= 1, "filter.min_poi_interactions must be >= 1")
    need(cfg["filter.min_user_checkins"] >= 1, "filter.min_user_checkins must be >= 1")
    ratios = [cfg["filter.train_ratio"], cfg["filter.validation_ratio"], cfg["filter.test_ratio"]]
    need(min(ratios) >= 0 and abs(sum(ratios) - 1.0) < 1e-9, "filter ratios must be non-negative and sum to 1")
    need(cfg["features.precision"] in (2, 4, 6, 8, 10), "features.precision must be one of 2, 4, 6, 8, 10")
    need(cfg["features.top_k_slots"] >= 1, "features.top_k_slots must be >= 1")
    need(cfg["features.top_k_visitors"] >= 1, "features.top_k_visitors must be >= 1")
    need(cfg["rqvae.num_layers"] >= 1, "rqvae.num_layers must be >= 1")
    need(cfg["rqvae.codebook_size"] >= 2, "rqvae.codebook_size must be >= 2")
    need(cfg["rqvae.code_dim"] >= 1, "rqvae.code_dim must be >= 1")
    hidden = _int_list("rqvae.encoder_hidden", cfg["rqvae.encoder_hidden"], errors)
    need(all(h >= 1 for h in hidden), "rqvae.encoder_hidden sizes must be >= 1")
    need(0 <= cfg["rqvae.quant_weight"] <= 1, "rqvae.quant_weight must lie in [0, 1]")
    need(0 <= cfg["rqvae.diversity_weight"] <= 1, "rqvae.diversity_weight must lie in [0, 1]")
    need(cfg["rqvae.commitment_beta"] >= 0, "rqvae.commitment_beta must be >= 0")
    need(cfg["rqvae.batch_size"] >= 1, "rqvae.batch_size must be >= 1")
    need(cfg["rqvae.max_epochs"] >= 1, "rqvae.max_epochs must be >= 1")
    need(cfg["rqvae.patience"] >= 1, "rqvae.patience must be >= 1")
    need(cfg["rqvae.learning_rate"] > 0, "rqvae.learning_rate must be > 0")
    need(cfg["rqvae.kmeans_iters"] >= 1, "rqvae.kmeans_iters must be >= 1")
    need(cfg["rqvae.compactness_operand"] in ("assigned", "codewords"), "rqvae.compactness_operand must be assigned or codewords")
    need(cfg["rqvae.utilization_tau"] >= 0, "rqvae.utilization_tau must be >= 0 (0 disables the soft-count gradient)")
    need(0 <= cfg["rqvae.validation_fraction"] < 1, "rqvae.validation_fraction must lie in [0, 1)")
    need(cfg["prompts.max_history"] >= 2, "prompts.max_history must be >= 2")
    need(cfg["prompts.blank_rate"] >= 1, "prompts.blank_rate must be >= 1")
    variants = [v.strip() for v in cfg["prompts.variants"].split(",") if v.strip()]
    need(variants and all(v in ("full", "no_sid", "no_time") for v in variants),
         "prompts.variants must list full, no_sid and/or no_time")
    need(cfg["eval.history_len"] >= 1, "eval.history_len must be >= 1")
    need(cfg["eval.smoothing"] >= 0, "eval.smoothing must be >= 0")
    need(cfg["eval.n_pairs"] >= 1, "eval.n_pairs must be >= 1")
    need(cfg["eval.n_boot"] >= 1, "eval.n_boot must be >= 1")
    depths = _int_list("eval.prefix_depths", cfg["eval.prefix_depths"], errors)
    need(all(1 <= d <= cfg["rqvae.num_layers"] for d in depths), "eval.prefix_depths must lie in [1, rqvae.num_layers]")
    need(cfg["run.seed"] >= 0, "run.seed must be >= 0")
    need(bool(cfg["run.out_dir"]), "run.out_dir must be set")
    return errors


def load_config(path=None, overrides=(), environ=None):
    """Resolve the configuration; raises :class:`ConfigError` listing every problem."""
    errors = []
    raw = {}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                raw.update(parse_assignments(f.read().splitlines(), path, errors))
        except OSError as exc:
            errors.append(f"cannot read config file {path}: {exc.strerror}")
    for (key, name), value in sorted(env_overrides(environ).items()):
        if key in DEFAULTS:
            raw[key] = value
        else:
            errors.append(f"environment variable {name}: unknown key {key!r}")
    raw.update(parse_assignments(overrides, "--set", errors))
    cfg = dict(DEFAULTS)
    for key, value in raw.items():
        cfg[key] = _coerce(key, value, errors)
    errors.extend(validate(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def echo(cfg):
    return {k: v for k, v in sorted(cfg.items()) if k not in NOT_ECHOED}


def dump(cfg):
    """Text form that :func:`load_config` reads back to the same values."""
    return "".join(f"{k} = {v}\n" for k, v in sorted(cfg.items()))


def stage_seed(master, stage):
    """Per-stage seed derived from the master seed and the stage name."""
    digest = hashlib.sha256(f"{master}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def delimiter(cfg):
    d = cfg["data.delimiter"]
    return DELIMITERS.get(d, d)


def int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]
