"""Run configuration: INI file plus ``--set section.key=value`` overrides.

Schema (all keys optional, defaults shown by ``python -m tokinpaint config``)::

    [codec]     sample_rate frame_length hop_length vocab_size iterations
    [schedule]  kind sigma_min terminal_survival eps
    [model]     dim depth heads context_length mlp_ratio time_freq_dim
    [trainer]   profile batch_size sequence_length learning_rate weight_decay
                beta1 beta2 total_steps warmup_steps checkpoint_interval
                log_interval grad_clip time_samples loop_padding span_corruption
    [inpaint]   steps context crossfade_ms
    [metrics]   window hop gaps_ms
    [run]       seed

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, fields, replace

from .diffusion_core import EPS_TIME, TERMINAL_SURVIVAL, NoiseSchedule
from .errors import UsageError
from .score_net import ModelConfig
from .trainer import PROFILES, TrainConfig

DEFAULTS = {
    "codec": {"sample_rate": 16000, "frame_length": 1024, "hop_length": 256, "vocab_size": 256, "iterations": 50},
    "schedule": {"kind": "log-linear", "sigma_min": 0.1, "terminal_survival": TERMINAL_SURVIVAL, "eps": EPS_TIME},
    "model": {"dim": 128, "depth": 4, "heads": 4, "context_length": 256, "mlp_ratio": 4, "time_freq_dim": 128},
    "trainer": {"profile": "desk", **{f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig) if f.name != "seed"}},
    "inpaint": {"steps": 128, "context": 256, "crossfade_ms": 10.0},
    "metrics": {"window": 2048, "hop": 512, "gaps_ms": "50,100,200,300"},
    "run": {"seed": 0},
}


def _coerce(value, default, where):
    if isinstance(default, bool):
        low = str(value).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{where}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as e:
        raise UsageError(f"{where}: {e}") from e
    return str(value).strip()


class RunConfig:
    def __init__(self):
        self.values = {s: dict(v) for s, v in DEFAULTS.items()}
        self.explicit = set()

    def set(self, section, key, value):
        if section not in DEFAULTS:
            raise UsageError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise UsageError(f"unknown config key {section}.{key}")
        self.values[section][key] = _coerce(value, DEFAULTS[section][key], f"{section}.{key}")
        self.explicit.add((section, key))

    @classmethod
    def load(cls, path=None, overrides=()):
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except configparser.Error as e:
                raise UsageError(f"{path}: {e}") from e
            for section in parser.sections():
                for key, value in parser.items(section):
                    cfg.set(section, key, value)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise UsageError(f"--set expects section.key=value, got {item!r}")
            lhs, value = item.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            cfg.set(section, key, value)
        if cfg.values["trainer"]["profile"] not in PROFILES:
            raise UsageError(f"unknown trainer profile {cfg.values['trainer']['profile']!r}")
        return cfg

    def __getitem__(self, section):
        return self.values[section]

    def schedule(self):
        s = self.values["schedule"]
        if s["kind"] == "constant":
            return NoiseSchedule.constant(s["sigma_min"], eps=s["eps"])
        if s["kind"] != "log-linear":
            raise UsageError(f"unknown schedule kind {s['kind']!r}")
        return NoiseSchedule.log_linear(s["sigma_min"], s["terminal_survival"], eps=s["eps"])

    def model_config(self, vocab_size):
        return ModelConfig(vocab_size=vocab_size, **self.values["model"]).validate()

    @property
    def seed(self):
        return self.values["run"]["seed"]

    def gaps_ms(self):
        try:
            return [int(g) for g in str(self.values["metrics"]["gaps_ms"]).split(",") if g.strip()]
        except ValueError as e:
            raise UsageError(f"metrics.gaps_ms: {e}") from e

    def train_config(self):
        t = self.values["trainer"]
        base = PROFILES[t["profile"]]
        chosen = {k: v for k, v in t.items() if k != "profile" and ("trainer", k) in self.explicit}
        return replace(base, seed=self.seed, **chosen)

    def resolved(self):
        """Fully resolved config as INI text (trainer values reflect the profile)."""
        parser = configparser.ConfigParser(interpolation=None)
        for section, values in self.values.items():
            parser[section] = {k: str(v) for k, v in values.items()}
        train = asdict(self.train_config())
        parser["trainer"] = {"profile": self.values["trainer"]["profile"],
                             **{k: str(v) for k, v in train.items() if k != "seed"}}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()
