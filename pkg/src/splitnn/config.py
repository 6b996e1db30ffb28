"""Experiment config: INI-style sections of flat ``key = value`` pairs.

Example::

    [experiment]
    method = splitnn          # splitnn | federated | largebatch
    topology = vanilla        # vanilla | ushaped | vertical | extended_vanilla | multitask | multihop
    cut_points = 2
    seed = 7
    output_dir = runs

    [network]
    layers =
        dense 784 64
        relu
        dense 64 2
        softmax_ce 2

    [dataset]
    source = synthetic
    n = 200
    dims = 10
    classes = 2

    [partition]
    kind = horizontal
    num_clients = 2

    [hyperparams]
    batch = 32
    lr = 0.05
    epochs = 10

Vertical and MultiTask plans read per-client ``[tower.N]`` sections; MultiTask
also reads ``[head.N]`` sections, each with ``layers`` and a ``target``
(``label`` or ``mod K``) deriving the task labels from the class id.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import nn_core as nn
from .errors import ConfigError, SplitNNError
from .topology import TopologyKind

METHODS = ("splitnn", "federated", "largebatch")
SOURCES = {"synthetic": (), "mnist_idx": ("images", "labels"), "csv": ("path",), "cifar_bin": ("path",)}
OUTPUT_ENV = "SPLITNN_OUTPUT_DIR"

DEFAULT_BATCH = 32
DEFAULT_LR = 0.05
DEFAULT_EPOCHS = 10


@dataclass
class ExperimentConfig:
    method: str = "splitnn"
    topology: Optional[str] = "vanilla"
    cut_points: list = field(default_factory=list)
    network: list = field(default_factory=list)
    input_shape: Optional[tuple] = None
    towers: list = field(default_factory=list)
    heads: list = field(default_factory=list)
    head_targets: list = field(default_factory=list)
    dataset: dict = field(default_factory=dict)
    partition: dict = field(default_factory=lambda: {"kind": "horizontal", "num_clients": 1, "strategy": "equal"})
    batch: int = DEFAULT_BATCH
    lr: float = DEFAULT_LR
    epochs: int = DEFAULT_EPOCHS
    local_epochs: int = 1
    batches_per_turn: int = 1
    weight_sync: Optional[str] = "server"
    merge: str = "sum"
    transport: str = "inprocess"
    addresses: list = field(default_factory=list)
    seed: int = 0
    output_dir: str = "runs"
    name: Optional[str] = None

    @property
    def run_id(self):
        if self.name:
            return self.name
        if self.method == "splitnn":
            return f"splitnn-{self.topology}-seed{self.seed}"
        return f"{self.method}-seed{self.seed}"


def parse_layer(text, default_name=None):
    tokens = text.split()
    name = None
    rest = []
    for tok in tokens:
        if tok.startswith("name="):
            name = tok[5:]
        else:
            rest.append(tok)
    if not rest:
        raise SplitNNError(f"empty layer line {text!r}")
    kind, args = rest[0].lower(), rest[1:]
    try:
        nums = [int(a) for a in args if a.lower() != "nobias"]
    except ValueError:
        raise SplitNNError(f"layer {text!r}: arguments must be integers") from None
    extra = {"name": name} if name else {}
    if kind == "dense":
        if len(nums) != 2:
            raise SplitNNError(f"layer {text!r}: dense IN OUT [nobias]")
        return nn.Dense(nums[0], nums[1], has_bias="nobias" not in [a.lower() for a in args], **extra)
    if kind == "relu":
        return nn.ReLU(**extra)
    if kind in ("conv2d", "conv"):
        if len(nums) not in (4, 5):
            raise SplitNNError(f"layer {text!r}: conv2d CIN COUT KH KW [STRIDE]")
        return nn.Conv2D(*nums, **extra)
    if kind in ("maxpool", "maxpool2d"):
        if len(nums) != 2:
            raise SplitNNError(f"layer {text!r}: maxpool WINDOW STRIDE")
        return nn.MaxPool2D(*nums, **extra)
    if kind == "flatten":
        return nn.Flatten(**extra)
    if kind == "concat":
        if len(nums) != 1:
            raise SplitNNError(f"layer {text!r}: concat ARITY")
        return nn.Concat(nums[0], **extra)
    if kind in ("softmax_ce", "softmaxcrossentropy", "loss"):
        if len(nums) != 1:
            raise SplitNNError(f"layer {text!r}: softmax_ce CLASSES")
        return nn.SoftmaxCrossEntropy(nums[0], **extra)
    raise SplitNNError(f"unknown layer kind {kind!r} in {text!r}")


def _layers(section, where, errors):
    text = section.get("layers", "")
    out = []
    for line in text.splitlines():
        line = line.split("#")[0].strip()
        if not line:
            continue
        try:
            out.append(parse_layer(line))
        except SplitNNError as exc:
            errors.append(f"[{where}] {exc}")
    return out


def _ints(text):
    return [int(t) for t in str(text).replace(",", " ").split()]


def _bool(text):
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def parse_config(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse and validate. Raises ConfigError listing every violation found."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    errors = []
    cfg = ExperimentConfig()
    get = lambda sec, key, default=None: parser.get(sec, key, fallback=default) if parser.has_section(sec) else default

    def number(sec, key, conv, default):
        raw = get(sec, key)
        if raw is None:
            return default
        try:
            return conv(raw)
        except ValueError:
            errors.append(f"[{sec}] {key} = {raw!r} is not a valid {conv.__name__}")
            return default

    cfg.method = (get("experiment", "method", "splitnn") or "").strip().lower()
    topology = get("experiment", "topology")
    cfg.topology = topology.strip().lower() if topology else None
    try:
        cfg.cut_points = _ints(get("experiment", "cut_points", ""))
    except ValueError:
        errors.append("[experiment] cut_points must be integers")
    cfg.seed = number("experiment", "seed", int, 0)
    cfg.output_dir = get("experiment", "output_dir", "runs")
    cfg.name = get("experiment", "name")
    sync = (get("experiment", "weight_sync", "server") or "server").strip().lower()
    cfg.weight_sync = None if sync in ("none", "off", "disabled") else sync
    cfg.merge = (get("experiment", "merge", "sum") or "sum").strip().lower()
    cfg.batches_per_turn = number("experiment", "batches_per_turn", int, 1)

    if parser.has_section("network"):
        cfg.network = _layers(parser["network"], "network", errors)
        shape = get("network", "input_shape")
        if shape:
            cfg.input_shape = tuple(_ints(shape))
    towers = sorted((s for s in parser.sections() if s.startswith("tower.")), key=lambda s: int(s.split(".")[1]))
    cfg.towers = [_layers(parser[s], s, errors) for s in towers]
    heads = sorted((s for s in parser.sections() if s.startswith("head.")), key=lambda s: int(s.split(".")[1]))
    cfg.heads = [_layers(parser[s], s, errors) for s in heads]
    cfg.head_targets = [parser.get(s, "target", fallback="label").strip().lower() for s in heads]

    if parser.has_section("dataset"):
        ds = dict(parser["dataset"])
        source = ds.pop("source", None)
        cfg.dataset = {"kind": source, **ds}
        if "keep_classes" in ds:
            cfg.dataset["keep_classes"] = _ints(ds["keep_classes"])
        if "flatten" in ds:
            cfg.dataset["flatten"] = _bool(ds["flatten"])
    if parser.has_section("partition"):
        part = dict(parser["partition"])
        part.setdefault("kind", "horizontal")
        if "num_clients" in part:
            part["num_clients"] = number("partition", "num_clients", int, 1)
        if "feature_widths" in part:
            part["feature_widths"] = _ints(part["feature_widths"])
        part.setdefault("strategy", "equal")
        cfg.partition = part

    cfg.batch = number("hyperparams", "batch", int, DEFAULT_BATCH)
    cfg.lr = number("hyperparams", "lr", float, DEFAULT_LR)
    cfg.epochs = number("hyperparams", "epochs", int, DEFAULT_EPOCHS)
    cfg.local_epochs = number("hyperparams", "local_epochs", int, 1)
    cfg.transport = (get("transport", "kind", "inprocess") or "inprocess").strip().lower()
    addresses = get("transport", "addresses", "")
    cfg.addresses = [a.strip() for a in addresses.replace(",", " ").split() if a.strip()]

    env_dir = os.environ.get(OUTPUT_ENV)
    if env_dir:
        cfg.output_dir = env_dir
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    errors += validate_config(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path, overrides=None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such config file")
    return parse_config(path.read_text(), overrides)


def validate_config(cfg: ExperimentConfig) -> list:
    v = []
    if cfg.method not in METHODS:
        v.append(f"method must be one of {METHODS}, got {cfg.method!r}")
    kind = None
    if cfg.method == "splitnn":
        try:
            kind = TopologyKind.parse(cfg.topology)
        except SplitNNError as exc:
            v.append(str(exc))
    part_kind = cfg.partition.get("kind", "horizontal")
    if part_kind not in ("horizontal", "vertical"):
        v.append(f"partition kind must be horizontal or vertical, got {part_kind!r}")
    joint = kind in (TopologyKind.VERTICAL, TopologyKind.MULTITASK)
    if part_kind == "vertical" and not joint:
        v.append("vertical partition is only valid with the vertical (or multitask) topology")
    if joint and part_kind != "vertical":
        v.append(f"{kind.value} topology needs a vertical partition with feature_widths")
    if part_kind == "vertical":
        widths = cfg.partition.get("feature_widths") or []
        if not widths:
            v.append("vertical partition needs feature_widths")
        if cfg.towers and len(widths) != len(cfg.towers):
            v.append(f"{len(widths)} feature_widths but {len(cfg.towers)} [tower.N] sections")
        if cfg.dataset.get("kind") == "synthetic" and "dims" in cfg.dataset:
            if sum(widths) != int(cfg.dataset["dims"]):
                v.append(f"feature_widths sum to {sum(widths)} but the dataset has {cfg.dataset['dims']} features")
    elif part_kind == "horizontal":
        if cfg.partition.get("strategy", "equal") not in ("equal", "dirichlet"):
            v.append("partition strategy must be equal or dirichlet")
        if int(cfg.partition.get("num_clients", 1)) < 1:
            v.append("num_clients must be >= 1")
    if joint and len(cfg.towers) < 2:
        v.append(f"{kind.value} topology needs >= 2 [tower.N] sections")
    if kind == TopologyKind.MULTITASK:
        if len(cfg.heads) < 2:
            v.append("multitask topology needs >= 2 [head.N] sections")
        for t in cfg.head_targets:
            if t != "label" and not (t.startswith("mod ") and t[4:].strip().isdigit()):
                v.append(f"head target must be 'label' or 'mod K', got {t!r}")
    if not cfg.network and kind != TopologyKind.MULTITASK:
        v.append("[network] layers is empty")

    ds = cfg.dataset
    if not ds or not ds.get("kind"):
        v.append("exactly one dataset source is required ([dataset] source = ...)")
    elif ds["kind"] not in SOURCES:
        v.append(f"unknown dataset source {ds['kind']!r}; choose from {sorted(SOURCES)}")
    else:
        for key in SOURCES[ds["kind"]]:
            if not ds.get(key):
                v.append(f"dataset source {ds['kind']} needs '{key}'")
        if ds["kind"] == "synthetic":
            for key in ("n", "dims", "classes"):
                if key not in ds:
                    v.append(f"synthetic dataset needs '{key}'")
        stray = [k for kind_, keys in SOURCES.items() if kind_ != ds["kind"] for k in keys
                 if k in ds and k not in SOURCES[ds["kind"]]]
        if stray:
            v.append(f"dataset names keys of another source ({', '.join(sorted(set(stray)))}); "
                     "exactly one source is allowed")
    for key, val in (("batch", cfg.batch), ("epochs", cfg.epochs), ("local_epochs", cfg.local_epochs),
                     ("batches_per_turn", cfg.batches_per_turn)):
        if val < 1:
            v.append(f"{key} must be >= 1")
    if cfg.lr < 0:
        v.append("lr must be >= 0")
    if cfg.transport not in ("inprocess", "tcp"):
        v.append(f"transport must be inprocess or tcp, got {cfg.transport!r}")
    if cfg.weight_sync not in ("server", "p2p", None):
        v.append(f"weight_sync must be server, p2p or none, got {cfg.weight_sync!r}")
    if cfg.merge not in ("sum", "mean"):
        v.append(f"merge must be sum or mean, got {cfg.merge!r}")
    if not 0 <= cfg.seed < 2 ** 64:
        v.append("seed must be an unsigned 64-bit integer")
    return v
