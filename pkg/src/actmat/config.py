"""INI-style run configuration with command-line overrides.

A config file has one section per subcommand (``[merge]``, ``[train-toy]`` ...)
plus an optional ``[common]`` section whose keys apply to every command.
Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

__all__ = ["ConfigError", "RunConfig", "load_run_config", "scenario_params", "scenario_to_ini",
           "SCENARIO_DEFAULTS"]

COMMON = "common"


class ConfigError(ValueError):
    """Missing file, missing key or unparseable value."""


@dataclass
class RunConfig:
    command: str
    values: dict[str, str] = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    def has(self, key: str) -> bool:
        return self.values.get(key) not in (None, "")

    def get(self, key: str, default: Any = None, conv: Callable[[str], Any] = str) -> Any:
        raw = self.values.get(key)
        if raw is None or raw == "":
            return default
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc

    def require(self, key: str, conv: Callable[[str], Any] = str) -> Any:
        if not self.has(key):
            raise ConfigError(f"missing required option {key!r}")
        return self.get(key, conv=conv)

    def path(self, key: str, must_exist: bool = True) -> Path:
        p = Path(self.require(key)).expanduser()
        if not p.is_absolute():
            p = self.base_dir / p
        p = p.resolve()
        if must_exist and not p.exists():
            raise ConfigError(f"{key}: no such file {p}")
        return p

    def paths(self, key: str, must_exist: bool = True) -> list[Path]:
        """Comma or newline separated list of paths."""
        items = [s.strip() for s in self.require(key).replace("\n", ",").split(",") if s.strip()]
        out = []
        for item in items:
            p = Path(item).expanduser()
            p = (p if p.is_absolute() else self.base_dir / p).resolve()
            if must_exist and not p.exists():
                raise ConfigError(f"{key}: no such file {p}")
            out.append(p)
        return out


def load_run_config(command: str, path: str | Path | None, overrides: Mapping[str, Any]) -> RunConfig:
    """Merge ``[common]`` and ``[command]`` from ``path`` with non-None ``overrides``.

    Override paths are relative to the working directory, file paths to the file.
    """
    values: dict[str, str] = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parser = configparser.ConfigParser(comment_prefixes=("#", ";"), inline_comment_prefixes=("#",),
                                           interpolation=None)
        try:
            with open(p, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}".replace("\n", " ")) from exc
        file_base = p.resolve().parent
        for section in (COMMON, command):
            if parser.has_section(section):
                for key, val in parser.items(section):
                    values[key.replace("-", "_")] = val
        # path-like file values are resolved against the file location now,
        # so that overrides can keep using the working directory
        values = {k: _anchor(v, file_base) if _looks_like_path_key(k) else v for k, v in values.items()}
    for key, val in overrides.items():
        if val is None:
            continue
        if isinstance(val, (list, tuple)):
            val = ",".join(str(v) for v in val)
        values[key] = str(val)
    return RunConfig(command, values, base)


_PATH_KEYS = ("pretrained", "experts", "covariances", "output", "output_dir", "traces", "kappa_output")


def _looks_like_path_key(key: str) -> bool:
    return key in _PATH_KEYS


def _anchor(value: str, base: Path) -> str:
    parts = [s.strip() for s in value.replace("\n", ",").split(",") if s.strip()]
    anchored = [str(p if Path(p).expanduser().is_absolute() else base / p) for p in parts]
    return ",".join(anchored)


SCENARIO_DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "tasks": 3,
    "widths": (8, 16, 16),
    "n_samples": 32,
    "activation": "tanh",
    "eta": 0.05,
    "iterations": 50,
    "loss": "mse",
    "bias": True,
    "noise_std": 0.01,
    "input_decay": 0.6,
    "teacher_shift": 0.3,
}


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _optional_float(s: str) -> float | None:
    return None if s.strip().lower() == "none" else float(s)


def _widths(s: str) -> tuple[int, ...]:
    return tuple(int(w) for w in s.replace("x", ",").split(",") if w.strip())


def scenario_params(cfg: RunConfig) -> dict[str, Any]:
    """Keyword arguments for ``toy.generate_scenario`` from a run config."""
    d = SCENARIO_DEFAULTS
    return {
        "seed": cfg.get("seed", d["seed"], int),
        "T": cfg.get("tasks", d["tasks"], int),
        "widths": cfg.get("widths", d["widths"], _widths),
        "n_samples": cfg.get("n_samples", d["n_samples"], int),
        "activation": cfg.get("activation", d["activation"]),
        "eta": cfg.get("eta", d["eta"], float),
        "K": cfg.get("iterations", d["iterations"], int),
        "loss": cfg.get("loss", d["loss"]),
        "bias": cfg.get("bias", d["bias"], _bool),
        "noise_std": cfg.get("noise_std", d["noise_std"], float),
        "input_decay": cfg.get("input_decay", d["input_decay"], float),
        "teacher_shift": cfg.get("teacher_shift", d["teacher_shift"], _optional_float),
    }


def scenario_to_ini(params: Mapping[str, Any], section: str = "train-toy") -> str:
    """Inverse of ``scenario_params``: a config section reproducing the scenario."""
    names = {"T": "tasks", "K": "iterations"}
    lines = [f"[{section}]"]
    for key, value in params.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{names.get(key, key)} = {value}")
    return "\n".join(lines) + "\n"
