"""Experiment configuration files.

Plain ``key = value`` lines grouped under ``[section]`` headers, ``#`` comments.
Every key is validated against :data:`SCHEMA` before anything runs; unknown
sections or keys are rejected.
"""

import configparser
import hashlib
import os
from pathlib import Path
from types import SimpleNamespace

from .errors import ConfigError


def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _str(v):
    return str(v).strip()


def _ints(v):
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    s = str(v).strip()
    return tuple(int(x) for x in s.split(",") if x.strip()) if s else ()


def _floats(v):
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    s = str(v).strip()
    return tuple(float(x) for x in s.split(",") if x.strip()) if s else ()


def _choice(*options):
    def parse(v):
        s = str(v).strip()
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return s

    return parse


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# section -> key -> (parser, default)
SCHEMA = {
    "experiment": {
        "kind": (_choice("toy", "mnist", "nica"), "toy"),
        "name": (_str, ""),
    },
    "model": {
        "latent_dim": (_int, 2),
        "likelihood": (_choice("auto", "bernoulli", "gaussian"), "auto"),
        "l_prior": (_int, 0),
        "prior_kind": (_choice("nvp", "made"), "nvp"),
        "prior_hidden": (_ints, (100,)),
        "mask_kind": (_choice("random_half", "checkerboard"), "random_half"),
        "l_post": (_int, 0),
        "post_kind": (_choice("made", "nvp"), "made"),
        "post_hidden": (_ints, (512, 512)),
        "enc_hidden": (_ints, (200, 200)),
        "dec_hidden": (_ints, (200, 200)),
        "activation": (_choice("relu", "elu", "tanh"), "relu"),
    },
    "training": {
        "epochs": (_int, 10),
        "batch_size": (_int, 100),
        "lr": (_float, 1e-3),
        "beta1": (_float, 0.9),
        "beta2": (_float, 0.999),
        "seed": (_int, 0),
        "checkpoint_every": (_int, 0),
        "prior_only_steps": (_int, 0),
        "prior_only_batch": (_int, 1000),
        "prior_only_lr": (_float, 2e-4),
        "prior_only_every": (_int, 50),
        "select_best": (_bool, False),
        "patience": (_int, 0),
    },
    "evaluation": {
        "k_importance": (_int, 128),
        "eval_every": (_int, 1),
        "eval_batch": (_int, 100),
    },
    "data": {
        "data_dir": (_str, ""),
        "full": (_bool, False),
        "train_subset": (_int, 5000),
        "valid_subset": (_int, 1000),
        "check_counts": (_bool, True),
    },
    "toy": {
        "n_train": (_int, 5000),
        "n_valid": (_int, 1000),
        "n_test": (_int, 1000),
        "data_seed": (_int, 0),
        "components": (_int, 4),
        "radius": (_float, 2.0),
        "std": (_float, 0.35),
        "means": (_floats, ()),
        "stds": (_floats, ()),
        "weights": (_floats, ()),
    },
    "nica": {
        "layers": (_ints, (2, 8)),
        "seeds": (_ints, (0, 1, 2)),
        "hidden": (_ints, (64, 64)),
        "n_samples": (_int, 20000),
        "epochs": (_int, 40),
        "batch_size": (_int, 256),
        "lr": (_float, 1e-3),
        "box": (_floats, (-4.0, 4.0)),
        "resolution": (_int, 100),
        "means": (_floats, (-1.0, -0.5, 1.0, 0.5)),
        "std": (_float, 0.5),
    },
    "paths": {
        "output_dir": (_str, "runs/default"),
    },
}

POSITIVE = {
    ("model", "latent_dim"), ("training", "batch_size"), ("evaluation", "k_importance"),
    ("evaluation", "eval_batch"), ("training", "prior_only_batch"), ("training", "prior_only_every"),
    ("toy", "n_train"), ("toy", "n_valid"), ("toy", "n_test"), ("toy", "components"), ("nica", "n_samples"), ("nica", "resolution"),
}
NON_NEGATIVE = {
    ("model", "l_prior"), ("model", "l_post"), ("toy", "data_seed"), ("training", "epochs"), ("training", "seed"),
    ("training", "checkpoint_every"), ("training", "prior_only_steps"), ("evaluation", "eval_every"),
    ("training", "patience"),
}


class ExperimentConfig:
    """Validated configuration; sections are attributes, e.g. ``cfg.model.l_prior``."""

    def __init__(self, values):
        self._values = values
        for section, items in values.items():
            setattr(self, section, SimpleNamespace(**items))

    @classmethod
    def from_dict(cls, raw):
        values = {}
        for section, keys in SCHEMA.items():
            values[section] = {k: default for k, (_, default) in keys.items()}
        for section, items in raw.items():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in items.items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                parser = SCHEMA[section][key][0]
                try:
                    values[section][key] = parser(value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[{section}] {key} = {value!r}: {exc}") from None
        cfg = cls(values)
        cfg._validate()
        return cfg

    @classmethod
    def from_text(cls, text):
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                           inline_comment_prefixes=("#",))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        if parser.defaults():
            raise ConfigError("keys outside a [section] are not allowed")
        return cls.from_dict({s: dict(parser.items(s)) for s in parser.sections()})

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def _validate(self):
        v = self._values
        for section, key in POSITIVE:
            if v[section][key] <= 0:
                raise ConfigError(f"[{section}] {key} must be positive")
        for section, key in NON_NEGATIVE:
            if v[section][key] < 0:
                raise ConfigError(f"[{section}] {key} must be non-negative")
        if v["training"]["lr"] <= 0:
            raise ConfigError("[training] lr must be positive")
        toy = v["toy"]
        if toy["means"]:
            if len(toy["means"]) % 2:
                raise ConfigError("[toy] means must list x,y pairs")
            k = len(toy["means"]) // 2
            if toy["stds"] and len(toy["stds"]) != k:
                raise ConfigError("[toy] stds must have one entry per component")
            if toy["weights"] and len(toy["weights"]) != k:
                raise ConfigError("[toy] weights must have one entry per component")
        if toy["weights"]:
            w = toy["weights"]
            if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
                raise ConfigError(f"[toy] weights must be non-negative and sum to 1, got {w}")
        if len(v["nica"]["box"]) != 2 or v["nica"]["box"][0] >= v["nica"]["box"][1]:
            raise ConfigError("[nica] box must be 'low, high' with low < high")
        if len(v["nica"]["means"]) % 2:
            raise ConfigError("[nica] means must list x,y pairs")

    # -- derived values -------------------------------------------------
    @property
    def likelihood(self):
        if self.model.likelihood != "auto":
            return self.model.likelihood
        return "bernoulli" if self.experiment.kind == "mnist" else "gaussian"

    @property
    def data_dir(self):
        return self.data.data_dir or os.environ.get("LED_DATA_DIR", "")

    def override(self, **dotted):
        """Copy with ``section__key=value`` (or ``{"section.key": value}``) overrides."""
        raw = {s: dict(items) for s, items in self._values.items()}
        for name, value in dotted.items():
            section, _, key = name.replace("__", ".").partition(".")
            raw.setdefault(section, {})[key] = value
        return ExperimentConfig.from_dict(raw)

    def to_text(self):
        """Canonical text form: every section and key in schema order."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_fmt(self._values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def digest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def as_dict(self):
        return {s: dict(items) for s, items in self._values.items()}
