"""Plain ``key = value`` run configuration and seed derivation."""
from dataclasses import dataclass, field
import zlib

import numpy as np

from . import net, transforms

DEFAULTS = {
    "seed": "0",
    "data.images": "",
    "data.synthetic_images": "0",
    "data.image_size": "96",
    "data.n_classes": "64",
    "data.samples_per_class": "32",
    "data.patch_size": "32",
    "data.seed_scale": "0.7,1.4",
    "data.val_frac": "0.1",
    "train.arch": "16c5-16c5-32f",
    "train.lr0": "0.01",
    "train.momentum": "0.9",
    "train.lr_decay_factor": "3",
    "train.plateau_patience": "3",
    "train.max_decays": "4",
    "train.batch_size": "64",
    "train.max_rounds": "100",
    "sweep.grid": "",
    "sweep.layer": "0",
    "sweep.pooling": "none",
    "sweep.patches": "100",
    "sweep.families": ",".join(transforms.FAMILIES),
}

TRANSFORM_KEYS = {f"transform.{name}" for name in transforms.TransformRanges.__dataclass_fields__}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    transform: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text):
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value, lineno)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.parse(fh.read())

    def set(self, key, value, lineno=None):
        where = f"line {lineno}: " if lineno else ""
        if key in TRANSFORM_KEYS:
            self.transform[key[len("transform."):]] = value
        elif key in DEFAULTS:
            self.values[key] = value
        else:
            raise ConfigError(f"{where}unknown key {key!r}")

    def get(self, key):
        return self.values[key]

    def int(self, key):
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be an integer") from None

    def float(self, key):
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be a number") from None

    def floats(self, key):
        text = self.values[key]
        try:
            return tuple(float(t) for t in text.split(",") if t.strip())
        except ValueError:
            raise ConfigError(f"{key} must be a comma-separated list of numbers") from None

    def ranges(self):
        try:
            return transforms.TransformRanges.from_config(self.transform)
        except (KeyError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def schedule(self):
        return net.TrainSchedule(
            lr0=self.float("train.lr0"), momentum=self.float("train.momentum"),
            lr_decay_factor=self.float("train.lr_decay_factor"),
            plateau_patience=self.int("train.plateau_patience"),
            max_decays=self.int("train.max_decays"), batch_size=self.int("train.batch_size"),
            max_rounds=self.int("train.max_rounds"), seed=stage_seed(self.int("seed"), "train"))

    def to_text(self):
        lines = [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        lines += self.ranges().to_config()
        return "\n".join(lines) + "\n"


def stage_seed(root, label):
    """Child seed for one pipeline stage, derived from the root seed and a fixed label."""
    return int(np.random.SeedSequence([int(root), zlib.crc32(label.encode())]).generate_state(1)[0])


def stage_rng(root, label):
    return np.random.default_rng(stage_seed(root, label))
