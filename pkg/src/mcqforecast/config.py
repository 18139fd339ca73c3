"""Run configuration: JSON loading, error-collecting validation and a semantic hash."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields
from importlib import resources
from pathlib import Path

from .corpus import SimulatorConfig
from .embeddings import FAMILIES, EmbedderConfig, config_from_id
from .exceptions import ConfigError
from .forecaster import STRATEGIES, TrainConfig

OUTPUT_DIR_ENV = "MCQFORECAST_OUTPUT_DIR"

_ENCODER_KEYS = ("hidden_size", "n_layers", "n_heads", "ffn_size", "max_positions",
                 "dropout_rate")

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs",
    "corpus": {"simulate": {}},
    "vocab": {"min_freq": 1},
    "encoder": {"hidden_size": 64, "n_layers": 2, "n_heads": 4, "ffn_size": 256,
                "max_positions": 128, "dropout_rate": 0.1},
    "decoder": {"hidden_size": 64, "n_layers": 2, "n_heads": 4, "ffn_size": 256,
                "max_positions": 512, "dropout_rate": 0.1},
    "mlm": {"epochs": 5, "lr": 1e-3, "batch_size": 32, "mask_prob": 0.15},
    "clm": {"epochs": 3, "lr": 1e-3, "batch_size": 8},
    "autoencoders": {"mlp": {"hidden_size": 256, "epochs": 20, "lr": 1e-3},
                     "lstm": {"epochs": 5, "lr": 3e-3, "max_examples": 4000}},
    "embedders": ["mlp_ae", "lstm_ae-L10-n1", "encoder_pool-L10", "clm_pool-L10"],
    "strategies": ["cat", "sum"],
    "split": {"ratios": [0.8, 0.1, 0.1], "keep_repeat_trials": True},
    "mcqbert": {"epochs": 1},
    "retention": {"epochs": 1},
    "forecaster": {"epochs": 3},
    "grid_seeds": [0],
}

# keys that never change results
_NON_SEMANTIC = ("output_dir",)


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "corpus":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class RunConfig:
    """A validated configuration tree plus the typed views each stage needs."""

    def __init__(self, data, source=None):
        self.data = data
        self.source = source

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self):
        return self.data["seed"]

    @property
    def hash(self):
        semantic = {k: v for k, v in self.data.items() if k not in _NON_SEMANTIC}
        blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stage_hash(self, *keys):
        """Hash of the subtrees ``keys`` (plus the seed); names a reusable stage artifact."""
        part = {k: self.data[k] for k in keys}
        part["seed"] = self.data["seed"]
        blob = json.dumps(part, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def simulator(self):
        return SimulatorConfig(**self.data["corpus"]["simulate"])

    def encoder_kwargs(self, which="encoder"):
        return dict(self.data[which])

    def train_config(self, stage, seed=None):
        cfg = dict(self.data[stage])
        cfg.setdefault("seed", self.seed if seed is None else seed)
        if seed is not None:
            cfg["seed"] = seed
        return TrainConfig(**cfg)

    def embedder_configs(self):
        return [_embedder_entry(c) for c in self.data["embedders"]]

    def to_json(self):
        return json.dumps(self.data, indent=2, sort_keys=True)


def _check_number(errors, path, value, kind=int, lo=None, hi=None, lo_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float) if kind is float else int):
        errors.append(f"{path}: expected {kind.__name__}, got {value!r}")
        return
    if lo is not None and (value <= lo if lo_open else value < lo):
        errors.append(f"{path}: must be {'>' if lo_open else '>='} {lo}, got {value}")
    if hi is not None and value > hi:
        errors.append(f"{path}: must be <= {hi}, got {value}")


def _check_lm(errors, name, section):
    unknown = set(section) - set(_ENCODER_KEYS)
    if unknown:
        errors.append(f"{name}: unknown keys {sorted(unknown)}")
    for key in ("hidden_size", "n_layers", "n_heads", "ffn_size", "max_positions"):
        if key in section:
            _check_number(errors, f"{name}.{key}", section[key], int, 1)
    if "dropout_rate" in section:
        _check_number(errors, f"{name}.dropout_rate", section["dropout_rate"], float, 0, 0.99)
    h, n = section.get("hidden_size"), section.get("n_heads")
    if isinstance(h, int) and isinstance(n, int) and n > 0 and h % n:
        errors.append(f"{name}.hidden_size: {h} is not divisible by n_heads={n}")


def _check_train(errors, name, section):
    valid = {f.name for f in fields(TrainConfig)}
    unknown = set(section) - valid
    if unknown:
        errors.append(f"{name}: unknown keys {sorted(unknown)}")
        return
    try:
        TrainConfig(**section).validate()
    except ConfigError as exc:
        errors.extend(f"{name}.{e}" for e in exc.errors)
    except TypeError as exc:
        errors.append(f"{name}: {exc}")


def _embedder_entry(entry):
    """An embedders[] item: a registry id string or a {family, sequence_length, ...} object."""
    if isinstance(entry, str):
        return config_from_id(entry)
    return EmbedderConfig(**entry).validate()


_VALID_FAMILIES = (f"valid families {list(FAMILIES)} (ids like mlp_ae, "
                   f"lstm_ae-L<10|20|30|40>-n<1..4>, encoder_pool-L10, clm_pool-L<10|20|30|40>)")


def _check_embedders(errors, entries):
    if not isinstance(entries, list) or not entries:
        errors.append("embedders: expected a non-empty list of embedder config ids")
        return
    for k, entry in enumerate(entries):
        path = f"embedders[{k}]"
        if isinstance(entry, str):
            try:
                config_from_id(entry)
            except ConfigError:
                errors.append(f"{path}: {entry!r} is not in the registry; {_VALID_FAMILIES}")
        elif isinstance(entry, dict):
            try:
                EmbedderConfig(**entry).validate()
            except ConfigError as exc:
                errors.extend(f"{path}.{e}" for e in exc.errors)
                if any(e.startswith("family") for e in exc.errors):
                    errors.append(f"{path}: {_VALID_FAMILIES}")
            except TypeError as exc:
                errors.append(f"{path}: {exc}")
        else:
            errors.append(f"{path}: expected an id string or an object")


def _check_corpus(errors, corpus, base_dir):
    if not isinstance(corpus, dict) or len(corpus) != 1 or \
            next(iter(corpus)) not in ("simulate", "files"):
        errors.append("corpus: expected exactly one of {'simulate': {...}} or {'files': {...}}")
        return
    kind, body = next(iter(corpus.items()))
    if kind == "simulate":
        try:
            SimulatorConfig(**body).validate()
        except ConfigError as exc:
            errors.extend(f"corpus.simulate.{e}" for e in exc.errors)
        except TypeError as exc:
            errors.append(f"corpus.simulate: {exc}")
        return
    for key in ("questions", "interactions"):
        if key not in body:
            errors.append(f"corpus.files.{key}: required")
    for key, rel in body.items():
        if key not in ("questions", "interactions", "topics"):
            errors.append(f"corpus.files.{key}: unknown key")
        elif not (base_dir / rel).is_file():
            errors.append(f"corpus.files.{key}: {rel} does not exist")


def collect_errors(data, base_dir=Path(".")):
    """Every problem in ``data`` as ``"key.path: reason"`` strings."""
    errors = []
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        errors.append(f"<root>: unknown keys {sorted(unknown)}")
    shape = [f"{k}: expected an object" for k, v in DEFAULTS.items()
             if isinstance(v, dict) and not isinstance(data.get(k), dict)]
    shape += [f"autoencoders.{k}: expected an object" for k in ("mlp", "lstm")
              if isinstance(data.get("autoencoders"), dict)
              and not isinstance(data["autoencoders"].get(k), dict)]
    if shape:
        return errors + shape
    _check_number(errors, "seed", data.get("seed"), int, 0)
    if not isinstance(data.get("output_dir"), str):
        errors.append("output_dir: expected a path string")
    _check_corpus(errors, data.get("corpus"), base_dir)
    _check_number(errors, "vocab.min_freq", data["vocab"].get("min_freq"), int, 1)
    _check_lm(errors, "encoder", data["encoder"])
    _check_lm(errors, "decoder", data["decoder"])
    mlm = data["mlm"]
    _check_number(errors, "mlm.epochs", mlm.get("epochs"), int, 1)
    _check_number(errors, "mlm.lr", mlm.get("lr"), float, 0, lo_open=True)
    _check_number(errors, "mlm.batch_size", mlm.get("batch_size"), int, 1)
    _check_number(errors, "mlm.mask_prob", mlm.get("mask_prob"), float, 0, 0.99, lo_open=True)
    clm = data["clm"]
    _check_number(errors, "clm.epochs", clm.get("epochs"), int, 1)
    _check_number(errors, "clm.lr", clm.get("lr"), float, 0, lo_open=True)
    _check_number(errors, "clm.batch_size", clm.get("batch_size"), int, 1)
    mlp, lstm = data["autoencoders"]["mlp"], data["autoencoders"]["lstm"]
    _check_number(errors, "autoencoders.mlp.hidden_size", mlp.get("hidden_size"), int, 1)
    for name, sec in (("mlp", mlp), ("lstm", lstm)):
        _check_number(errors, f"autoencoders.{name}.epochs", sec.get("epochs"), int, 1)
        _check_number(errors, f"autoencoders.{name}.lr", sec.get("lr"), float, 0, lo_open=True)
    if lstm.get("max_examples") is not None:
        _check_number(errors, "autoencoders.lstm.max_examples", lstm["max_examples"], int, 1)
    _check_embedders(errors, data.get("embedders"))
    strategies = data.get("strategies")
    if not isinstance(strategies, list) or not strategies or \
            any(s not in STRATEGIES for s in strategies):
        errors.append(f"strategies: expected a non-empty subset of {list(STRATEGIES)}")
    ratios = data["split"].get("ratios")
    if not (isinstance(ratios, list) and len(ratios) == 3
            and all(isinstance(r, (int, float)) and r > 0 for r in ratios)
            and abs(sum(ratios) - 1.0) < 1e-9):
        errors.append("split.ratios: expected three positive fractions summing to 1")
    if not isinstance(data["split"].get("keep_repeat_trials"), bool):
        errors.append("split.keep_repeat_trials: expected true or false")
    for stage in ("mcqbert", "retention", "forecaster"):
        _check_train(errors, stage, data[stage])
    seeds = data.get("grid_seeds")
    if not isinstance(seeds, list) or not seeds:
        errors.append("grid_seeds: expected a non-empty list of integers")
    else:
        for k, s in enumerate(seeds):
            _check_number(errors, f"grid_seeds[{k}]", s, int, 0)
    return errors


def _resolve_paths(data, base_dir):
    files = data["corpus"].get("files") if isinstance(data.get("corpus"), dict) else None
    if isinstance(files, dict):
        data["corpus"]["files"] = {k: str((base_dir / v).resolve()) for k, v in files.items()}


def parse_config(data, base_dir=Path("."), source=None):
    if not isinstance(data, dict):
        raise ConfigError("<root>: expected a JSON object")
    merged = _merge(DEFAULTS, data)
    errors = collect_errors(merged, Path(base_dir))
    if errors:
        raise ConfigError(errors)
    _resolve_paths(merged, Path(base_dir))
    return RunConfig(merged, source)


def validate_config(path):
    """Load and check a JSON config file; raises ConfigError carrying every problem found."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"<file>: cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<parse>: {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") \
            from None
    return parse_config(data, path.parent, str(path))


def bundled_config(name="demo.config"):
    """Path of a config file shipped with the package."""
    return Path(str(resources.files("mcqforecast").joinpath(name)))
