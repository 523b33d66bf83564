"""Flat key-value run configuration.

Grammar: one ``key = value`` pair per line; blank lines and lines starting
with ``#`` are ignored; whitespace around keys and values is trimmed.
Values resolve in three layers, later layers winning: built-in defaults,
then the ``--config`` file, then explicit command-line flags. Every run
echoes its fully resolved configuration into the output directory, and
re-running with that echoed file reproduces the run.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import SynthConfig
from .errors import ParameterError
from .train import TrainConfig


def parse_kv_file(path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not key:
                raise ParameterError(f"{path}:{lineno}: empty key")
            pairs[key] = value
    return pairs


def format_kv(pairs: dict, header: str = "") -> str:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    lines.extend(f"{k} = {v}" for k, v in pairs.items())
    return "\n".join(lines) + "\n"


# Schema: key -> (converter-name, default). The converter names keep the
# schema printable; _CONVERT maps them to callables.
_SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "threshold": ("float", TrainConfig.threshold),
    "folds": ("int", 5),
    # synthetic generator
    "n_total": ("int", SynthConfig.n_total),
    "n_fraud": ("int", SynthConfig.n_fraud),
    "weight_video": ("float", SynthConfig.a),
    "weight_audio": ("float", SynthConfig.b),
    "weight_bimodal": ("float", SynthConfig.c),
    "noise_sigma": ("float", SynthConfig.sigma),
    "d_sig": ("int", SynthConfig.d_sig),
    "amplitude": ("float", SynthConfig.amplitude),
    # optimizer / training
    "lr_max": ("float", TrainConfig.lr_max),
    "lr_min": ("float", TrainConfig.lr_min),
    "batch_size": ("int", TrainConfig.batch_size),
    "max_epochs": ("int", TrainConfig.max_epochs),
    "t_max": ("opt_int", None),
    "weight_decay": ("float", TrainConfig.weight_decay),
    "beta1": ("float", TrainConfig.beta1),
    "beta2": ("float", TrainConfig.beta2),
    "eps": ("float", TrainConfig.eps),
    "dropout_p": ("float", TrainConfig.dropout_p),
    "patience": ("int", TrainConfig.patience),
    # paths and selections
    "data": ("str", None),
    "format": ("str", "binary"),
    "variant": ("str", None),
    "variants": ("str", "all"),
    "out_dir": ("str", None),
    "out": ("str", None),
    "checkpoint": ("str", None),
    "transport": ("str", "stdio"),
}


def _convert(kind: str, key: str, text: str):
    try:
        if kind == "int":
            return int(text)
        if kind == "opt_int":
            return None if text.lower() in ("", "none") else int(text)
        if kind == "float":
            return float(text)
        return text if text != "" else None  # unset values echo as empty
    except ValueError:
        raise ParameterError(f"config key {key!r}: cannot parse {text!r} as {kind}") from None


@dataclass
class AppConfig:
    """Resolved view of every configuration value for one run."""

    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(lr_max=v["lr_max"], lr_min=v["lr_min"], batch_size=v["batch_size"],
                           max_epochs=v["max_epochs"], t_max=v["t_max"],
                           weight_decay=v["weight_decay"], beta1=v["beta1"], beta2=v["beta2"],
                           eps=v["eps"], dropout_p=v["dropout_p"], patience=v["patience"],
                           threshold=v["threshold"], seed=v["seed"])

    def synth_config(self) -> SynthConfig:
        v = self.values
        return SynthConfig(n_total=v["n_total"], n_fraud=v["n_fraud"], a=v["weight_video"],
                           b=v["weight_audio"], c=v["weight_bimodal"], sigma=v["noise_sigma"],
                           d_sig=v["d_sig"], amplitude=v["amplitude"], seed=v["seed"])

    def echo(self, subcommand: str) -> str:
        shown = {k: ("" if v is None else v) for k, v in self.values.items()}
        return format_kv(shown, header=(
            f"resolved configuration for '{subcommand}'\n"
            "precedence: defaults <- config file <- command-line flags"))


def resolve(file_path: str | None, flag_values: dict) -> AppConfig:
    """Merge defaults, an optional config file, and explicit flags.

    ``flag_values`` holds only flags the user actually passed (None means
    unset). Unknown keys in the config file are rejected so typos fail
    loudly instead of silently using a default.
    """
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    if file_path is not None:
        for key, text in parse_kv_file(file_path).items():
            if key not in _SCHEMA:
                raise ParameterError(f"config file {file_path}: unknown key {key!r}")
            values[key] = _convert(_SCHEMA[key][0], key, text)
    for key, val in flag_values.items():
        if val is not None:
            if key not in _SCHEMA:
                raise ParameterError(f"internal flag {key!r} missing from schema")
            values[key] = val
    return AppConfig(values=values)
