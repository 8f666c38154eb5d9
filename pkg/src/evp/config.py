"""Flat ``key = value`` run configuration files.

Lines are ``key = value``; ``#`` starts a comment and ``[section]``
headers are accepted purely for grouping.  Keys are global and unknown
keys are rejected.  ``tau`` is written as a percentage (``25`` means a
mask ratio of 0.25).
"""

from __future__ import annotations

from .backbone import BackboneConfig
from .errors import ConfigError
from .prompting import EvpConfig, Strategy
from .synthdata import SynthSpec
from .training import TrainConfig


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text.strip() in ("", "default") else float(text)


def _str(text):
    return text.strip()


# key: (section, parser, default text)
SCHEMA = {
    "dims": ("model", _ints, "16,32,64,96"),
    "depths": ("model", _ints, "2,2,2,2"),
    "heads": ("model", _ints, "1,2,2,4"),
    "strides": ("model", _ints, "4,2,2,2"),
    "patches": ("model", _ints, "7,3,3,3"),
    "mlp_ratio": ("model", int, "4"),
    "decoder_dim": ("model", int, "32"),
    "dtype": ("model", _str, "float32"),
    "pretrain_steps": ("model", int, "0"),
    "strategy": ("strategy", _str, "evp"),
    "r": ("strategy", int, "4"),
    "tau": ("strategy", float, "25"),
    "prompt_source": ("strategy", _str, "hfc"),
    "blur_sigma": ("strategy", float, "1.0"),
    "stages": ("strategy", _ints, "1,2,3,4"),
    "share_mlp_tune": ("strategy", _bool, "false"),
    "share_mlp_up": ("strategy", _bool, "true"),
    "use_fpe": ("strategy", _bool, "true"),
    "use_fhfc": ("strategy", _bool, "true"),
    "vpt_tokens": ("strategy", int, "10"),
    "adapt_mid": ("strategy", int, "2"),
    "lr": ("training", float, "2e-4"),
    "epochs": ("training", int, "30"),
    "batch": ("training", int, "4"),
    "loss": ("training", _str, "bce"),
    "seed": ("training", int, "0"),
    "flip_augment": ("training", _bool, "true"),
    "weight_decay": ("training", float, "0.01"),
    "beta1": ("training", float, "0.9"),
    "beta2": ("training", float, "0.999"),
    "eps": ("training", float, "1e-8"),
    "threshold": ("training", float, "0.5"),
    "aggregate": ("training", _str, "per_image"),
    "task": ("data", _str, "blur"),
    "train_dir": ("data", _str, ""),
    "test_dir": ("data", _str, ""),
    "train_count": ("data", int, "200"),
    "test_count": ("data", int, "50"),
    "size": ("data", int, "64"),
    "severity": ("data", _opt_float, ""),
    "data_seed": ("data", int, "0"),
}
SECTIONS = ("model", "strategy", "training", "data")


class RunConfig:
    """Validated run settings; ``raw`` holds the text form of every key."""

    def __init__(self, overrides=None):
        self.raw = {k: default for k, (_, _, default) in SCHEMA.items()}
        self.values = {}
        for k, v in (overrides or {}).items():
            self.set(k, v)
        self._reparse()

    def set(self, key, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.raw[key] = str(value).strip()

    def _reparse(self):
        for key, (_, parser, _) in SCHEMA.items():
            try:
                self.values[key] = parser(self.raw[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {self.raw[key]!r} ({exc})") from None

    def update(self, pairs):
        for k, v in pairs.items():
            self.set(k, v)
        self._reparse()
        return self

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text, source="<config>"):
        pairs = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                if line[1:-1].strip() not in SECTIONS:
                    raise ConfigError(f"{source}:{lineno}: unknown section {line}")
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            pairs[key] = value
        return cls(pairs)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text, path)

    def to_text(self):
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            lines += [f"{k} = {self.raw[k]}" for k, (sec, _, _) in SCHEMA.items() if sec == section]
        return "\n".join(lines) + "\n"

    # typed views ---------------------------------------------------------

    def backbone_config(self):
        v = self.values
        try:
            return BackboneConfig(
                dims=v["dims"], depths=v["depths"], heads=v["heads"], strides=v["strides"],
                patches=v["patches"], mlp_ratio=v["mlp_ratio"], decoder_dim=v["decoder_dim"], dtype=v["dtype"],
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from None

    def evp_config(self):
        v = self.values
        tau = v["tau"]
        if not 0.0 <= tau <= 100.0:
            raise ConfigError(f"tau is a percentage in [0, 100], got {tau}")
        return EvpConfig(
            r=v["r"], tau=tau / 100.0, prompt_source=v["prompt_source"], blur_sigma=v["blur_sigma"],
            stages=v["stages"], share_mlp_tune=v["share_mlp_tune"], share_mlp_up=v["share_mlp_up"],
            use_fpe=v["use_fpe"], use_fhfc=v["use_fhfc"],
        )

    def strategy(self, kind=None):
        v = self.values
        evp = self.evp_config()
        kind = kind or v["strategy"]
        if kind == "evp":
            evp.validate()
        return Strategy(kind=kind, n_tokens=v["vpt_tokens"], mid_dim=v["adapt_mid"], evp=evp)

    def train_config(self):
        v = self.values
        return TrainConfig(
            lr=v["lr"], epochs=v["epochs"], batch=v["batch"], loss=v["loss"], seed=v["seed"],
            flip_augment=v["flip_augment"], weight_decay=v["weight_decay"], beta1=v["beta1"],
            beta2=v["beta2"], eps=v["eps"], threshold=v["threshold"],
        )

    def synth_spec(self, split):
        v = self.values
        count = v["train_count"] if split == "train" else v["test_count"]
        # train and test draw from disjoint seed streams
        seed = v["data_seed"] * 2 + (0 if split == "train" else 1)
        return SynthSpec(task=v["task"], count=count, size=v["size"], seed=seed, severity=v["severity"])
