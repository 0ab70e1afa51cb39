"""Flat key=value run configuration.

Every tunable default in the library has a key here; files are plain text
with one ``key=value`` per line and ``#`` comments. Unknown keys are
rejected so typos fail loudly. A fully-defaulted config is valid.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


# key -> (type, default)
CONFIG_SCHEMA: dict[str, tuple[type, Any]] = {
    "seed": (int, 0),
    "threads": (int, 0),

    "data.root": (str, ""),
    "data.batch_size": (int, 32),
    "data.image_size": (int, 224),
    "data.channel_means": (str, "0.485,0.456,0.406"),
    "data.channel_stds": (str, "0.229,0.224,0.225"),
    "data.split_ratios": (str, "0.6,0.2,0.2"),

    "aug.enabled": (bool, True),
    "aug.hflip": (bool, True),
    "aug.vflip": (bool, True),
    "aug.rotations": (str, "90,180,270"),
    "aug.zoom_max": (float, 1.1),
    "aug.jitter_px": (int, 4),
    "aug.brightness": (float, 0.1),
    "aug.contrast": (float, 0.1),
    "aug.warp_magnitude": (float, 0.08),
    "aug.blur_sigma_max": (float, 1.5),
    "aug.elastic_alpha": (float, 10.0),
    "aug.elastic_sigma": (float, 4.0),
    "aug.prob": (float, 0.5),

    "model.num_classes": (int, 8),
    "model.dropout1": (float, 0.25),
    "model.dropout2": (float, 0.5),
    "model.bn_eps": (float, 1e-5),
    "model.bn_momentum": (float, 0.1),

    "train.head_epochs": (int, 2),
    "train.full_epochs": (int, 12),
    "train.lr_max": (float, 0.01),
    "train.warmup_frac": (float, 0.3),
    "train.weight_decay": (float, 0.01),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.99),
    "train.eps": (float, 1e-8),
    "train.group_lrs": (str, ""),

    "lrfind.lr_lo": (float, 1e-7),
    "lrfind.lr_hi": (float, 10.0),
    "lrfind.iters": (int, 100),
    "lrfind.smooth_beta": (float, 0.98),
    "lrfind.divergence_factor": (float, 4.0),

    "stain.fit_lambda": (float, 0.1),
    "stain.density_lambda": (float, 0.01),
    "stain.background_beta": (float, 0.15),
    "stain.max_iters": (int, 200),
    "stain.tol": (float, 1e-6),
    "stain.percentile": (float, 99.0),
    "stain.max_pixels": (int, 50_000),

    "bench.batch_sizes": (str, "1,2,4,8,16,32,64"),
    "bench.repeats": (int, 5),
    "bench.warmup": (int, 2),
}


def _coerce(key: str, raw: Any) -> Any:
    kind, _ = CONFIG_SCHEMA[key]
    if isinstance(raw, kind) and not (kind is bool and isinstance(raw, int)):
        return raw
    text = str(raw).strip()
    if kind is bool:
        low = text.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"{key}: cannot parse {text!r} as a boolean")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}")


class RunConfig:
    """Typed view over the flat configuration dictionary."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values = {k: d for k, (_, d) in CONFIG_SCHEMA.items()}
        if values:
            self.merge(values)

    def merge(self, values: dict[str, Any]) -> "RunConfig":
        for key, raw in values.items():
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            self._values[key] = _coerce(key, raw)
        return self

    def __getitem__(self, key: str) -> Any:
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def floats(self, key: str) -> tuple[float, ...]:
        text = str(self[key]).strip()
        return tuple(float(v) for v in text.split(",")) if text else ()

    def ints(self, key: str) -> tuple[int, ...]:
        text = str(self[key]).strip()
        return tuple(int(v) for v in text.split(",")) if text else ()

    def to_text(self) -> str:
        lines = []
        for key in sorted(self._values):
            v = self._values[key]
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        values: dict[str, str] = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = stripped.partition("=")
            values[key.strip()] = value.strip()
        return cls(values)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())
