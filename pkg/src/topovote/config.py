"""Experiment configuration: a flat key = value file with a fixed schema.

Lines are ``key = value``; blank lines and ``#`` comments are skipped.
List values are comma-separated. Every key has a default, so an empty
file is a valid config; unknown keys are usage errors that list the
valid vocabulary. The same file drives every pipeline command, each
command reading the keys it needs.
"""
from __future__ import annotations

import hashlib

import numpy as np

from . import data as data_mod
from . import gradnet as gn
from .seeding import spawn_rng


class ConfigError(Exception):
    """Usage-class configuration problem (exit code 1 at the CLI)."""


def _int(text):
    return int(text, 10)


def _float(text):
    return float(text)


def _str(text):
    return text


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _floats(text):
    items = [t.strip() for t in text.split(",") if t.strip()]
    return tuple(float(t) for t in items)


def _ints(text):
    items = [t.strip() for t in text.split(",") if t.strip()]
    return tuple(int(t, 10) for t in items)


def _strs(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _choice(*allowed):
    def parse(text):
        if text not in allowed:
            raise ValueError(f"expected one of {allowed}, got {text!r}")
        return text
    return parse


# key -> (parser, default, help). This table is the schema; the CLI help
# and the unknown-key error both derive from it.
SCHEMA = {
    "dataset": (_choice("digits", "idx"), "digits",
                "data source: procedural digit images, or IDX files"),
    "dataset_seed": (_int, 0, "seed for synthetic data generation and splits"),
    "train_images": (_str, "", "IDX image file for the training split"),
    "train_labels": (_str, "", "IDX label file for the training split"),
    "test_images": (_str, "", "IDX image file for the test split"),
    "test_labels": (_str, "", "IDX label file for the test split"),
    "val_count": (_int, 5000, "items carved from the IDX train split for validation"),
    "train_per_class": (_int, 400, "digits: training samples per class"),
    "val_per_class": (_int, 50, "digits: validation samples per class"),
    "test_per_class": (_int, 100, "digits: test samples per class"),
    "digit_noise": (_float, 0.08, "digits: additive Gaussian noise level"),
    "digit_shift": (_int, 3, "digits: maximum glyph translation in pixels"),
    "arch": (_choice("mlp", "conv"), "mlp", "network architecture"),
    "hidden": (_int, 128, "mlp hidden width"),
    "epochs": (_int, 10, "training epochs"),
    "batch_size": (_int, 64, "training batch size"),
    "optimizer": (_choice("adam", "sgd"), "adam", "optimizer kind"),
    "lr": (_float, 1e-3, "learning rate"),
    "momentum": (_float, 0.9, "sgd momentum"),
    "lam": (_float, 2.0, "weight of the misdirection term in the joint loss"),
    "epsilons": (_floats, (0.1, 0.2, 0.3, 0.4),
                 "perturbation budget grid for building training advsets"),
    "advset_count": (_int, 0, "samples fed to advset building; 0 = whole split"),
    "attack_eps": (_float, 0.3, "perturbation budget for attack/eval"),
    "attack_norm": (_choice("linf", "l2"), "linf", "perturbation norm"),
    "attack_iters": (_int, 40, "attack iterations"),
    "attack_alpha": (_float, 0.0, "attack step size; 0 = 2.5*eps/iters"),
    "random_init": (_bool, True, "start attacks from a random point in the ball"),
    "transform_prob": (_float, 0.0, "per-iteration translation probability"),
    "max_translate": (_int, 0, "attack translation magnitude in pixels"),
    "scenario": (_choice("black", "grey", "white"), "black",
                 "adversary knowledge level for eval"),
    "sample_budget": (_int, 0, "eval subsample size; 0 = whole test split"),
    "seed": (_int, 0, "master seed; the --seed flag overrides it"),
    "out_dir": (_str, "runs", "directory for reports and sweep tables"),
    "net_in": (_str, "", "input checkpoint path"),
    "net_out": (_str, "", "output checkpoint path"),
    "advset_in": (_str, "", "input advset path"),
    "advset_out": (_str, "", "output advset path"),
    "surrogates": (_strs, (), "surrogate checkpoint paths, comma separated"),
    "members": (_strs, (), "defender member checkpoint paths, comma separated"),
    "manifest_in": (_str, "", "ensemble manifest path (alternative to members)"),
    "derangement": (_ints, (), "class remapping for train-topo, comma ints"),
    "lambdas": (_floats, (0.5, 1.0, 2.0, 4.0), "grid for sweep-lambda"),
}


def default_config():
    return {key: default for key, (_, default, _h) in SCHEMA.items()}


def parse_config(path):
    """Read and validate a config file, filling defaults for absent keys."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    cfg = default_config()
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(
                f"{path}:{lineno}: unknown config key {key!r}; valid keys: "
                + ", ".join(sorted(SCHEMA))
            )
        if key in seen:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        parser = SCHEMA[key][0]
        try:
            cfg[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return cfg


# keys that locate artifacts on disk; they never change what gets computed
PATH_KEYS = frozenset((
    "train_images", "train_labels", "test_images", "test_labels",
    "net_in", "net_out", "advset_in", "advset_out", "surrogates",
    "members", "manifest_in", "out_dir",
))


def config_digest(cfg):
    """Stable short fingerprint of the scientifically relevant settings.

    Path-like keys are excluded so reruns into different directories
    still produce byte-identical artifacts.
    """
    canon = "\n".join(f"{k}={cfg[k]!r}" for k in sorted(cfg)
                      if k not in PATH_KEYS)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def build_arch(name, input_shape, num_classes, hidden, rng):
    """Instantiate one of the named architectures for the given data shape."""
    if name == "mlp":
        features = 1
        for d in input_shape:
            features *= d
        layers = [gn.Flatten(), gn.Dense(features, hidden), gn.ReLU(),
                  gn.Dense(hidden, num_classes)]
    elif name == "conv":
        if len(input_shape) != 3:
            raise ConfigError("conv architecture needs (channels, h, w) inputs")
        channels, height, width = input_shape
        out_h = (height - 5) // 2 + 1
        out_w = (width - 5) // 2 + 1
        layers = [gn.Conv2D(channels, 8, 5, stride=2), gn.ReLU(), gn.Flatten(),
                  gn.Dense(8 * out_h * out_w, num_classes)]
    else:
        raise ConfigError(f"unknown architecture {name!r}")
    return gn.build_network(layers, input_shape, num_classes, rng)


def load_dataset(cfg):
    """Materialize the configured dataset.

    Synthetic data depends only on dataset_seed, so pipeline stages run
    with different master seeds still see identical splits.
    """
    if cfg["dataset"] == "digits":
        return data_mod.synth_digits(
            train_per_class=cfg["train_per_class"],
            val_per_class=cfg["val_per_class"],
            test_per_class=cfg["test_per_class"],
            seed=cfg["dataset_seed"],
            noise=cfg["digit_noise"],
            max_shift=cfg["digit_shift"],
        )
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        if not cfg[key]:
            raise ConfigError(f"dataset = idx requires the {key} key")
    full_train = data_mod.load_idx(cfg["train_images"], cfg["train_labels"])
    test = data_mod.load_idx(cfg["test_images"], cfg["test_labels"])
    n = full_train.inputs.shape[0]
    n_val = cfg["val_count"]
    if not 1 <= n_val < n:
        raise ConfigError(f"val_count must be in [1, {n - 1}] for this data")
    order = spawn_rng(cfg["dataset_seed"], "idx-val-split").permutation(n)
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    classes = int(max(full_train.labels.max(), test.labels.max())) + 1
    return data_mod.Dataset(
        "idx",
        gn.Batch(full_train.inputs[train_idx], full_train.labels[train_idx]),
        gn.Batch(full_train.inputs[val_idx], full_train.labels[val_idx]),
        test, classes, full_train.inputs.shape[1:],
    )
