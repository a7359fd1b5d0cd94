"""Flat ``key = value`` configuration with dotted, module-namespaced keys.

Every key, its type, default and accepted range lives in :data:`SCHEMA`;
``densecl inspect --defaults`` prints it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

from densecl.augment import AugmentConfig
from densecl.encoder import HeadConfig, ModelConfig
from densecl.errors import ConfigError
from densecl.loss import LossConfig
from densecl.matcher import MatchStrategy
from densecl.trainer import TrainConfig


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    default: Any
    doc: str
    lo: Optional[float] = None
    hi: Optional[float] = None
    choices: Optional[tuple] = None
    lo_open: bool = False

    def range_text(self) -> str:
        if self.choices:
            return "one of " + "|".join(self.choices)
        if self.lo is None and self.hi is None:
            return ""
        left = "(" if self.lo_open else "["
        lo = "-inf" if self.lo is None else f"{self.lo:g}"
        hi = "inf" if self.hi is None else f"{self.hi:g}"
        return f"{left}{lo}, {hi}]" if self.hi is not None else f"{left}{lo}, inf)"


def _k(*args, **kw):
    return Key(*args, **kw)


SCHEMA: dict[str, Key] = {k.name: k for k in [
    _k("seed", int, 0, "master seed for init, batch order and augmentation", 0),
    _k("data.dir", str, "", "image folder; empty selects the synthetic generator"),
    _k("data.synth.n_images", int, 2000, "synthetic dataset size", 1),
    _k("data.synth.image_size", int, 64, "synthetic image side in pixels", 8),
    _k("data.synth.n_classes", int, 4, "synthetic class count", 1),
    _k("data.synth.seed", int, 0, "synthetic generator seed", 0),
    _k("augment.out_size", int, 64, "view side in pixels (224 at full scale)", 1),
    _k("augment.scale_min", float, 0.2, "min crop area fraction", 0, 1, lo_open=True),
    _k("augment.scale_max", float, 1.0, "max crop area fraction", 0, 1, lo_open=True),
    _k("augment.flip_prob", float, 0.5, "horizontal flip probability", 0, 1),
    _k("augment.jitter_prob", float, 0.8, "color jitter probability", 0, 1),
    _k("augment.brightness", float, 0.4, "brightness factor half-range", 0, 1),
    _k("augment.contrast", float, 0.4, "contrast factor half-range", 0, 1),
    _k("augment.saturation", float, 0.4, "saturation factor half-range", 0, 1),
    _k("augment.gray_prob", float, 0.2, "grayscale probability", 0, 1),
    _k("augment.blur_prob", float, 0.5, "Gaussian blur probability", 0, 1),
    _k("augment.blur_sigma_min", float, 0.1, "min blur sigma (pixels)", 0, None, lo_open=True),
    _k("augment.blur_sigma_max", float, 2.0, "max blur sigma (pixels)", 0, None, lo_open=True),
    _k("model.channels", str, "32,64,128,256", "backbone stage widths; stride = 2^(n-1)"),
    _k("model.norm", str, "batch", "backbone normalization", choices=("batch", "none")),
    _k("model.residual", bool, False, "identity skip around each stage's stride-1 conv"),
    _k("model.hidden_dim", int, 256, "projection-head hidden width (2048 at full scale)", 1),
    _k("model.out_dim", int, 128, "embedding dimension E", 1),
    _k("model.grid_size", int, 7, "dense grid side S", 1),
    _k("loss.temperature", float, 0.2, "InfoNCE temperature", 0, None, lo_open=True),
    _k("loss.lambda", float, 0.5, "dense-loss weight", 0, 1),
    _k("loss.warmup_iters", int, 0, "iterations run at loss.warmup_lambda", 0),
    _k("loss.warmup_lambda", float, 0.0, "lambda during warm-up", 0, 1),
    _k("loss.literal_denominator", bool, False, "omit 1/tau on the positive denominator term"),
    _k("loss.symmetric", bool, False, "also score view b as query against view a"),
    _k("match.strategy", str, "max_sim_f", "correspondence rule",
       choices=tuple(s.value for s in MatchStrategy)),
    _k("dictionary.momentum", float, 0.999, "key-encoder momentum m", 0, 1),
    _k("dictionary.global_size", int, 4096, "global key queue capacity (65536 at full scale)", 1),
    _k("dictionary.dense_size", int, 4096, "dense key queue capacity (65536 at full scale)", 1),
    _k("dictionary.negative_mode", str, "pooled", "dense negative per image",
       choices=("pooled", "sampled")),
    _k("train.base_lr", float, 0.06, "initial learning rate (0.3 for COCO at batch 256)", 0,
       None, lo_open=True),
    _k("train.sgd_momentum", float, 0.9, "SGD momentum", 0, 1),
    _k("train.weight_decay", float, 1e-4, "L2 weight decay", 0),
    _k("train.batch_size", int, 64, "mini-batch size (256 at full scale)", 1),
    _k("train.epochs", int, 100, "epochs", 1),
    _k("train.dense_pathway", bool, True, "false = global-only build (requires lambda 0)"),
    _k("train.deterministic", bool, True, "fixed reduction order and seeded streams"),
    _k("train.checkpoint_every", int, 10, "epochs between checkpoints; 0 = final only", 0),
    _k("eval.n_pairs", int, 200, "view pairs for correspondence accuracy", 1),
    _k("eval.seed", int, 1234, "eval pair seed", 0),
    _k("eval.photometric", bool, False, "photometric augmentation on eval pairs"),
    _k("eval.knn_k", int, 10, "neighbours in the kNN probe", 1),
    _k("eval.test_images", int, 400, "held-out synthetic images for the kNN probe", 1),
    _k("eval.threshold", float, 0.9, "mutual-match similarity threshold", -1, None),
]}


def _convert(key: Key, raw: str):
    raw = raw.strip()
    try:
        if key.kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if key.kind is int:
            return int(raw)
        if key.kind is float:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
        return raw
    except ValueError:
        raise ConfigError(f"{key.name}: cannot parse {raw!r} as {key.kind.__name__}") from None


def _check(key: Key, value) -> None:
    bad = False
    if key.choices is not None:
        bad = value not in key.choices
    elif key.kind in (int, float):
        if key.lo is not None and (value < key.lo or (key.lo_open and value == key.lo)):
            bad = True
        if key.hi is not None and value > key.hi:
            bad = True
    if bad:
        raise ConfigError(f"{key.name}: {value!r} outside accepted range {key.range_text()}")


def _split_line(line: str, where: str) -> Optional[tuple[str, str]]:
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    if "=" not in line:
        raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
    name, raw = line.split("=", 1)
    return name.strip(), raw.strip()


def resolve(lines: Iterable[str] = (), overrides: Iterable[str] = (),
            source: str = "<config>") -> dict:
    """Defaults, then file lines, then overrides. Returns the full value dict."""
    values = {k: v.default for k, v in SCHEMA.items()}
    items = []
    for n, line in enumerate(lines, 1):
        kv = _split_line(line, f"{source}:{n}")
        if kv:
            items.append(kv)
    for ov in overrides:
        kv = _split_line(ov, "override")
        if kv:
            items.append(kv)
    for name, raw in items:
        key = SCHEMA.get(name)
        if key is None:
            raise ConfigError(f"unknown config key {name!r}")
        value = _convert(key, raw)
        _check(key, value)
        values[name] = value
    return values


@dataclass(frozen=True)
class DataConfig:
    dir: str = ""
    n_images: int = 2000
    image_size: int = 64
    n_classes: int = 4
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    n_pairs: int = 200
    seed: int = 1234
    photometric: bool = False
    knn_k: int = 10
    test_images: int = 400
    threshold: float = 0.9


@dataclass(frozen=True)
class Config:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    values: dict = field(default_factory=dict, compare=False, repr=False)

    def text(self) -> str:
        return to_text(self.values)


def _channels(text: str) -> tuple[int, ...]:
    try:
        ch = tuple(int(c) for c in text.split(",") if c.strip())
    except ValueError:
        raise ConfigError(f"model.channels: expected comma-separated ints, got {text!r}") from None
    if not ch or min(ch) < 1:
        raise ConfigError(f"model.channels: widths must be >= 1, got {text!r}")
    return ch


def build(values: dict) -> Config:
    v = values
    if v["augment.scale_min"] > v["augment.scale_max"]:
        raise ConfigError("augment.scale_min must not exceed augment.scale_max")
    if v["augment.blur_sigma_min"] > v["augment.blur_sigma_max"]:
        raise ConfigError("augment.blur_sigma_min must not exceed augment.blur_sigma_max")
    augment = AugmentConfig(
        out_size=v["augment.out_size"],
        scale=(v["augment.scale_min"], v["augment.scale_max"]),
        flip_prob=v["augment.flip_prob"], jitter_prob=v["augment.jitter_prob"],
        brightness=v["augment.brightness"], contrast=v["augment.contrast"],
        saturation=v["augment.saturation"], gray_prob=v["augment.gray_prob"],
        blur_prob=v["augment.blur_prob"],
        blur_sigma=(v["augment.blur_sigma_min"], v["augment.blur_sigma_max"]),
    )
    model = ModelConfig(
        channels=_channels(v["model.channels"]), norm=v["model.norm"],
        residual=v["model.residual"],
        head=HeadConfig(v["model.hidden_dim"], v["model.out_dim"], v["model.grid_size"]),
    )
    loss = LossConfig(
        temperature=v["loss.temperature"], lam=v["loss.lambda"],
        warmup_iters=v["loss.warmup_iters"], warmup_lambda=v["loss.warmup_lambda"],
        literal_denominator=v["loss.literal_denominator"], symmetric=v["loss.symmetric"],
    )
    train = TrainConfig(
        base_lr=v["train.base_lr"], sgd_momentum=v["train.sgd_momentum"],
        weight_decay=v["train.weight_decay"], batch_size=v["train.batch_size"],
        epochs=v["train.epochs"], seed=v["seed"], key_momentum=v["dictionary.momentum"],
        global_queue_size=v["dictionary.global_size"], dense_queue_size=v["dictionary.dense_size"],
        negative_mode=v["dictionary.negative_mode"], match=MatchStrategy(v["match.strategy"]),
        dense_pathway=v["train.dense_pathway"], deterministic=v["train.deterministic"],
        checkpoint_every=v["train.checkpoint_every"], loss=loss, model=model, augment=augment,
    )
    data = DataConfig(v["data.dir"], v["data.synth.n_images"], v["data.synth.image_size"],
                      v["data.synth.n_classes"], v["data.synth.seed"])
    ev = EvalConfig(v["eval.n_pairs"], v["eval.seed"], v["eval.photometric"], v["eval.knn_k"],
                    v["eval.test_images"], v["eval.threshold"])
    return Config(train, data, ev, dict(v))


def parse_config(path=None, overrides: Iterable[str] = ()) -> Config:
    """Read a config file (or none), apply ``key=value`` overrides, validate."""
    lines: list[str] = []
    source = "<defaults>"
    if path is not None:
        source = str(path)
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return build(resolve(lines, overrides, source))


def from_text(text: str) -> Config:
    return build(resolve(text.splitlines(), source="<embedded>"))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_text(values: dict) -> str:
    return "".join(f"{k} = {_fmt(values[k])}\n" for k in SCHEMA)


def describe_defaults() -> str:
    rows = []
    for k in SCHEMA.values():
        rng = k.range_text()
        rows.append(f"{k.name} = {_fmt(k.default)}    # {k.doc}" + (f"; {rng}" if rng else ""))
    return "\n".join(rows) + "\n"


def config_from_train(train: TrainConfig, **extra) -> Config:
    """Rebuild a full :class:`Config` (with its value dict) from a ``TrainConfig``."""
    v = {k: s.default for k, s in SCHEMA.items()}
    m, a, lo = train.model, train.augment, train.loss
    v.update({
        "seed": train.seed,
        "augment.out_size": a.out_size, "augment.scale_min": float(a.scale[0]),
        "augment.scale_max": float(a.scale[1]), "augment.flip_prob": a.flip_prob,
        "augment.jitter_prob": a.jitter_prob, "augment.brightness": a.brightness,
        "augment.contrast": a.contrast, "augment.saturation": a.saturation,
        "augment.gray_prob": a.gray_prob, "augment.blur_prob": a.blur_prob,
        "augment.blur_sigma_min": float(a.blur_sigma[0]),
        "augment.blur_sigma_max": float(a.blur_sigma[1]),
        "model.channels": ",".join(str(c) for c in m.channels), "model.norm": m.norm,
        "model.residual": m.residual, "model.hidden_dim": m.head.hidden_dim,
        "model.out_dim": m.head.out_dim, "model.grid_size": m.head.grid_size,
        "loss.temperature": lo.temperature, "loss.lambda": lo.lam,
        "loss.warmup_iters": lo.warmup_iters, "loss.warmup_lambda": lo.warmup_lambda,
        "loss.literal_denominator": lo.literal_denominator, "loss.symmetric": lo.symmetric,
        "match.strategy": MatchStrategy(train.match).value,
        "dictionary.momentum": train.key_momentum,
        "dictionary.global_size": train.global_queue_size,
        "dictionary.dense_size": train.dense_queue_size,
        "dictionary.negative_mode": train.negative_mode,
        "train.base_lr": train.base_lr, "train.sgd_momentum": train.sgd_momentum,
        "train.weight_decay": train.weight_decay, "train.batch_size": train.batch_size,
        "train.epochs": train.epochs, "train.dense_pathway": train.dense_pathway,
        "train.deterministic": train.deterministic,
        "train.checkpoint_every": train.checkpoint_every,
    })
    v.update(extra)
    for name, value in v.items():
        key = SCHEMA[name]
        if key.kind is float:
            v[name] = float(value)
    return build(v)
