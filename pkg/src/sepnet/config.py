"""Plain-text run configuration.

Files are ``key = value`` lines with ``#`` comments. Keys are namespaced
(``model.cardinality``, ``search.meta_iterations``, ``cluster.flops``,
``data.noise``, plus top-level ``seed`` and ``out_dir``). Unknown keys are
rejected. Command-line ``--set key=value`` overrides file values, and the
``SEPNET_OUT_DIR`` environment variable overrides ``out_dir``, so every
run can be reproduced from its logged resolved configuration.
"""

from __future__ import annotations

import os

from .data import DataSpec
from .errors import ConfigError
from .models import ModelSpec
from .perf import ClusterSpec
from .search import SearchConfig

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}

SCHEMA: dict[str, tuple[type, object]] = {
    "model.stages": (int, 3),
    "model.blocks_per_stage": (int, 6),
    "model.cardinality": (int, 8),
    "model.bottleneck_width": (int, 16),
    "model.filter_size": (int, 3),
    "model.partitions": (int, 1),
    "model.num_classes": (int, 100),
    "model.alpha": (int, 2),
    "model.in_channels": (int, 3),
    "model.in_h": (int, 32),
    "model.in_w": (int, 32),
    "data.num_classes": (int, 8),
    "data.channels": (int, 3),
    "data.h": (int, 16),
    "data.w": (int, 16),
    "data.train_pool": (int, 2000),
    "data.test_n": (int, 512),
    "data.val_fraction": (float, 0.1),
    "data.noise": (float, 0.8),
    "search.meta_iterations": (int, 10),
    "search.shared_steps": (int, 50),
    "search.controller_steps": (int, 50),
    "search.candidates": (int, 20),
    "search.monte_carlo_m": (int, 1),
    "search.shared_lr": (float, 0.05),
    "search.controller_lr": (float, 0.3),
    "search.controller_hidden": (int, 100),
    "search.baseline_decay": (float, 0.95),
    "search.entropy_coef": (float, 0.0),
    "search.finetune_lr": (float, 1e-4),
    "search.finetune_epochs": (int, 5),
    "search.batch_size": (int, 32),
    "search.reward_batch": (int, 64),
    "search.levels": (int, 9),
    "search.p_min": (int, 50),
    "cluster.nodes": (int, 4),
    "cluster.flops": (float, 1.7e8),
    "cluster.bandwidth_bps": (float, 300e6),
    "cluster.overhead_s": (float, 0.0),
    "seed": (int, 0),
    "out_dir": (str, "runs/out"),
}


def _parse_value(key: str, text: str):
    want, _ = SCHEMA[key]
    text = text.strip()
    try:
        if want is bool:
            return _BOOL[text.lower()]
        return want(text)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value {text!r} for {key} (expected {want.__name__})") from exc


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown configuration key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def resolve(config_path: str | None = None, overrides: list[str] | None = None) -> dict:
    """File values + overrides + environment, on top of schema defaults."""
    cfg = {key: default for key, (_, default) in SCHEMA.items()}
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            cfg.update(parse_config_text(fh.read()))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        cfg[key] = _parse_value(key, value)
    env_out = os.environ.get("SEPNET_OUT_DIR")
    if env_out:
        cfg["out_dir"] = env_out
    return cfg


def format_resolved(cfg: dict) -> str:
    return "\n".join(f"{key} = {cfg[key]}" for key in sorted(cfg)) + "\n"


def model_spec(cfg: dict) -> ModelSpec:
    spec = ModelSpec(
        stages=cfg["model.stages"], blocks_per_stage=cfg["model.blocks_per_stage"],
        cardinality=cfg["model.cardinality"], bottleneck_width=cfg["model.bottleneck_width"],
        filter_size=cfg["model.filter_size"], partitions=cfg["model.partitions"],
        num_classes=cfg["model.num_classes"], alpha=cfg["model.alpha"],
        in_channels=cfg["model.in_channels"], in_hw=(cfg["model.in_h"], cfg["model.in_w"]),
    )
    spec.validate()
    return spec


def data_spec(cfg: dict) -> DataSpec:
    spec = DataSpec(
        num_classes=cfg["data.num_classes"], channels=cfg["data.channels"],
        hw=(cfg["data.h"], cfg["data.w"]), train_pool=cfg["data.train_pool"],
        test_n=cfg["data.test_n"], val_fraction=cfg["data.val_fraction"],
        noise=cfg["data.noise"], seed=cfg["seed"],
    )
    spec.validate()
    return spec


def search_config(cfg: dict) -> SearchConfig:
    sc = SearchConfig(
        meta_iterations=cfg["search.meta_iterations"], shared_steps=cfg["search.shared_steps"],
        controller_steps=cfg["search.controller_steps"], candidates=cfg["search.candidates"],
        monte_carlo_m=cfg["search.monte_carlo_m"], shared_lr=cfg["search.shared_lr"],
        controller_lr=cfg["search.controller_lr"], controller_hidden=cfg["search.controller_hidden"],
        baseline_decay=cfg["search.baseline_decay"], entropy_coef=cfg["search.entropy_coef"],
        finetune_lr=cfg["search.finetune_lr"], finetune_epochs=cfg["search.finetune_epochs"],
        batch_size=cfg["search.batch_size"], reward_batch=cfg["search.reward_batch"],
        levels=cfg["search.levels"], p_min=cfg["search.p_min"], seed=cfg["seed"],
    )
    sc.validate()
    return sc


def cluster_spec(cfg: dict) -> ClusterSpec:
    spec = ClusterSpec(
        num_nodes=cfg["cluster.nodes"], flops_per_sec=cfg["cluster.flops"],
        bandwidth_bps=cfg["cluster.bandwidth_bps"], overhead_s=cfg["cluster.overhead_s"],
    )
    spec.validate()
    return spec
