"""Flat key=value experiment configuration with strict round-tripping.

Keys use dotted section prefixes (``gmm.sigma0``), values are typed scalars.
Unknown keys are rejected; formatting a parsed config and re-parsing it is
the identity, which keeps generated grid configs verifiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

# key -> (type, default).  Sentinel -1.0 means "derive the default" for the
# float keys documented below.
KEY_SPECS: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "data.name": (str, ""),
    "data.train_images": (str, ""),
    "data.train_labels": (str, ""),
    "data.test_images": (str, ""),
    "data.test_labels": (str, ""),
    "model.arch": (str, ""),
    "train.eps": (float, 0.01),
    "train.eps_classifier": (float, -1.0),   # -1: same as train.eps
    "train.batch": (int, 100),
    "train.epochs": (int, 3),
    "train.warmup_fraction": (float, 0.5),
    "train.n_measure": (int, 10),
    "gmm.sigma0": (float, -1.0),              # -1: sqrt(K)
    "gmm.sigma_inf": (float, 0.01),
    "gmm.alpha": (float, -1.0),               # -1: equal to train.eps
    "gmm.delta": (float, 0.05),
    "gmm.d_max": (float, 20.0),
    "gmm.mu_range": (float, 0.1),
    "gmm.annealing": (bool, True),
    "sample.count": (int, 100),
    "sample.top_s": (int, 5),
    "sharpen.iters": (int, 0),
    "sharpen.eps": (float, 0.1),
    "outlier.c": (float, 0.0),
    "outlier.inlier_classes": (str, ""),
    "continual.slt": (str, "D10"),
    "continual.sigma_reset": (float, -1.0),
    "continual.samples_per_task": (int, 0),   # 0: proportional to task size
    "continual.epochs_t1": (int, 50),
    "continual.double_epochs": (bool, True),
    "continual.repetitions": (int, 1),
    "continual.replay": (bool, True),
    "continual.top_s": (int, 5),
}


def _parse_value(key: str, text: str):
    typ, _ = KEY_SPECS[key]
    text = text.strip()
    try:
        if typ is bool:
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    """Typed flat configuration; access values with ``cfg[key]``."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {k: default for k, (_, default) in KEY_SPECS.items()}
        for k, v in self.values.items():
            if k not in KEY_SPECS:
                raise ConfigError(f"unknown configuration key {k!r}")
            full[k] = v
        self.values = full

    def __getitem__(self, key: str):
        if key not in KEY_SPECS:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self.values[key]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        merged = dict(self.values)
        for k, v in overrides.items():
            if k not in KEY_SPECS:
                raise ConfigError(f"unknown configuration key {k!r}")
            merged[k] = v
        return ExperimentConfig(merged)

    # Derived defaults --------------------------------------------------

    @property
    def eps_classifier(self) -> float:
        v = self["train.eps_classifier"]
        return self["train.eps"] if v < 0 else v

    @property
    def sigma0(self) -> float | None:
        v = self["gmm.sigma0"]
        return None if v < 0 else v

    @property
    def alpha(self) -> float | None:
        v = self["gmm.alpha"]
        return None if v < 0 else v


def parse_config(text: str) -> ExperimentConfig:
    """Parse key=value lines; '#' starts a comment, blank lines are ignored."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in KEY_SPECS:
            raise ConfigError(f"line {lineno}: unknown configuration key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, val)
    return ExperimentConfig(values)


def format_config(cfg: ExperimentConfig) -> str:
    """Canonical text form listing every key in registry order."""
    lines = [f"{k} = {_format_value(cfg.values[k])}" for k in KEY_SPECS]
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_config(f.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


@dataclass
class GridSpec:
    """Cartesian grid over configuration keys plus a repetition count."""

    axes: dict[str, list]
    repetitions: int = 1


def parse_grid_spec(text: str) -> GridSpec:
    """Parse lines of ``key = v1, v2, ...`` plus optional ``repetitions = N``."""
    axes: dict[str, list] = {}
    reps = 1
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=v1,v2,..., got {raw!r}")
        key, _, vals = line.partition("=")
        key = key.strip()
        if key == "repetitions":
            reps = int(vals.strip())
            continue
        if key not in KEY_SPECS:
            raise ConfigError(f"line {lineno}: unknown grid parameter {key!r}")
        axes[key] = [_parse_value(key, v) for v in vals.split(",") if v.strip()]
        if not axes[key]:
            raise ConfigError(f"line {lineno}: no values for {key!r}")
    if not axes:
        raise ConfigError("grid spec lists no parameters")
    return GridSpec(axes=axes, repetitions=reps)


def grid_configs(base: ExperimentConfig, grid: GridSpec):
    """Yield (experiment_id, overrides, config) over the full product."""
    import itertools
    keys = sorted(grid.axes)
    for idx, combo in enumerate(itertools.product(*(grid.axes[k] for k in keys))):
        overrides = dict(zip(keys, combo))
        for rep in range(grid.repetitions):
            derived = dict(overrides)
            derived["seed"] = base["seed"] + rep
            yield (f"e{idx:04d}-r{rep:02d}", derived, base.with_overrides(derived))
