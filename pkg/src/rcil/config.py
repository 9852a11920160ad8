"""Flat dotted key/value experiment configuration.

The on-disk form is diffable text, one ``section.key = value`` per line.
Parsing resolves method-flag defaults from the registry, so a written config
always round-trips to the same resolved state.  The run id combines the hash
of everything except seed/outdir with the seed.
"""

import hashlib
from pathlib import Path

import numpy as np

from .data import SynthSceneSpec
from .distill import DistillConfig, PoolSpec
from .losses import LossWeights
from .model import ArchSpec, StageSpec
from .protocol import build_domain_schedule, build_schedule, class_orders
from .trainer import METHODS, TrainHyper, method_from_name

CONFIG_FORMAT = 1


class ConfigError(ValueError):
    """Schema violation; the message names the offending key."""


def _bool(s):
    if isinstance(s, bool):
        return s
    low = str(s).strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s):
    if isinstance(s, (tuple, list)):
        return tuple(int(v) for v in s)
    s = str(s).strip()
    if not s:
        return ()
    return tuple(int(v) for v in s.split(","))


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


_METHOD_FLAGS = ("two_branch", "merge", "freeze", "drop_path", "unbiased", "logit_kd", "pcd")

SCHEMA = {
    "seed": (int, 1),
    "outdir": (str, "runs"),
    "schedule.notation": (str, "6-1"),
    "schedule.labeling": (str, "overlapped"),
    "schedule.mode": (str, "class"),
    "schedule.class_order": (str, "ascending"),
    "schedule.n_domains": (int, 1),
    "data.n_classes": (int, 10),
    "data.image_size": (int, 64),
    "data.n_train": (int, 200),
    "data.n_val": (int, 50),
    "data.shapes_min": (int, 1),
    "data.shapes_max": (int, 3),
    "data.cache": (_bool, True),
    "method.name": (str, "rc_pcd"),
    **{f"method.{f}": (_bool, None) for f in _METHOD_FLAGS},
    "loss.lambda": (float, 100.0),
    "loss.gamma": (float, 0.01),
    "loss.count_background": (_bool, False),
    "distill.variant": (str, "avg_cube"),
    "distill.spatial_kernels": (_int_list, (4, 8, 12, 16, 20, 24)),
    "distill.spatial_stride": (int, 1),
    "distill.channel_kernels": (_int_list, (3,)),
    "distill.channel_stride": (int, 1),
    "distill.layer_mask": (_int_list, ()),
    "pcd.cascade": (_bool, False),
    "model.stage_blocks": (_int_list, (2, 2, 2)),
    "model.stage_channels": (_int_list, (16, 32, 64)),
    "model.decoder_channels": (int, 32),
    "model.head_shift": (float, 0.1),
    "train.batch_size": (int, 8),
    "train.epochs": (int, 10),
    "train.lr_step0": (float, 0.02),
    "train.lr_later": (float, 0.001),
    "train.momentum": (float, 0.9),
    "train.poly_power": (float, 0.9),
    "train.flip": (_bool, True),
}

_HASH_EXEMPT = ("seed", "outdir")


class ExperimentConfig:
    def __init__(self, values=None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)
        self._resolve_method_flags()

    def _resolve_method_flags(self):
        name = self.values["method.name"]
        if name not in METHODS:
            raise ConfigError(f"method.name: unknown method {name!r}")
        base = METHODS[name]
        for flag in _METHOD_FLAGS:
            key = f"method.{flag}"
            if self.values[key] is None:
                self.values[key] = getattr(base, flag)

    def set(self, key, raw):
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown configuration key")
        caster, _ = SCHEMA[key]
        try:
            self.values[key] = caster(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc

    def get(self, key):
        return self.values[key]

    # -- serialization -------------------------------------------------------

    @classmethod
    def from_text(cls, text):
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, _, raw = stripped.partition("=")
            values[key.strip()] = raw.strip()
        return cls(values)

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text())

    def to_text(self):
        lines = [f"# rcil experiment configuration (format {CONFIG_FORMAT})"]
        lines += [f"{k} = {_fmt(self.values[k])}" for k in SCHEMA]
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_text())

    def apply_overrides(self, pairs):
        """CLI ``key=value`` overrides.  Changing method.name re-resolves the
        structural flags unless they are overridden explicitly too."""
        pairs = dict(pairs)
        if "method.name" in pairs:
            for flag in _METHOD_FLAGS:
                key = f"method.{flag}"
                if key not in pairs:
                    self.values[key] = None
        for k, v in pairs.items():
            self.set(k, v)
        self._resolve_method_flags()
        return self

    def config_hash(self):
        payload = "\n".join(
            f"{k}={_fmt(self.values[k])}" for k in SCHEMA if k not in _HASH_EXEMPT)
        return hashlib.sha256(payload.encode()).hexdigest()

    def run_id(self):
        return f"{self.config_hash()[:12]}-s{self.values['seed']}"

    # -- typed views ---------------------------------------------------------

    @property
    def seed(self):
        return self.values["seed"]

    def arch(self):
        blocks = self.values["model.stage_blocks"]
        channels = self.values["model.stage_channels"]
        if len(blocks) != len(channels):
            raise ConfigError("model.stage_blocks: length must match model.stage_channels")
        stages = tuple(StageSpec(b, c) for b, c in zip(blocks, channels))
        return ArchSpec(stages=stages, decoder_channels=self.values["model.decoder_channels"])

    def hyper(self):
        return TrainHyper(
            batch_size=self.values["train.batch_size"],
            epochs=self.values["train.epochs"],
            lr_step0=self.values["train.lr_step0"],
            lr_later=self.values["train.lr_later"],
            momentum=self.values["train.momentum"],
            poly_power=self.values["train.poly_power"],
            flip=self.values["train.flip"],
        )

    def weights(self):
        return LossWeights(lam=self.values["loss.lambda"], gamma=self.values["loss.gamma"])

    def distill_config(self):
        mask = self.values["distill.layer_mask"]
        return DistillConfig(
            variant=self.values["distill.variant"],
            pool=PoolSpec(
                spatial_kernels=self.values["distill.spatial_kernels"],
                spatial_stride=self.values["distill.spatial_stride"],
                channel_kernels=self.values["distill.channel_kernels"],
                channel_stride=self.values["distill.channel_stride"],
            ),
            layer_mask=mask if mask else None,
            cascade=self.values["pcd.cascade"],
        )

    def method(self):
        return method_from_name(
            self.values["method.name"],
            **{f: self.values[f"method.{f}"] for f in _METHOD_FLAGS},
        )

    def scene_spec(self):
        size = self.values["data.image_size"]
        return SynthSceneSpec(
            seed=self.seed,
            image_size=(size, size),
            n_classes=self.values["data.n_classes"],
            shapes_min=self.values["data.shapes_min"],
            shapes_max=self.values["data.shapes_max"],
        )

    def class_order(self):
        """None (ascending), a named published order, or an explicit list."""
        raw = self.values["schedule.class_order"]
        if raw == "ascending":
            return None
        if raw in class_orders():
            if self.values["data.n_classes"] != 20:
                raise ConfigError(
                    "schedule.class_order: named orders describe 20 object classes")
            return [c for grp in class_orders()[raw] for c in grp]
        if raw.startswith("random:"):
            salt = int(raw.split(":", 1)[1])
            rng = np.random.default_rng([0xC1A55, salt])
            return list(rng.permutation(np.arange(1, self.values["data.n_classes"] + 1)))
        try:
            return [int(c) for c in raw.split(",")]
        except ValueError:
            raise ConfigError(f"schedule.class_order: cannot parse {raw!r}") from None

    def schedule(self):
        mode = self.values["schedule.mode"]
        if mode == "class":
            return build_schedule(
                self.values["schedule.notation"],
                self.values["data.n_classes"],
                labeling=self.values["schedule.labeling"],
                order=self.class_order(),
            )
        if mode == "domain":
            return build_domain_schedule(
                self.values["schedule.notation"],
                self.values["schedule.n_domains"],
                n_classes=self.values["data.n_classes"],
            )
        raise ConfigError(f"schedule.mode: unknown mode {mode!r}")
