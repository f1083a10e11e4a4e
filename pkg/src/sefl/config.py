"""Experiment configuration: a flat YAML mapping of documented keys.

Every :class:`~sefl.fedsim.SimConfig` field is accepted, plus
``output_dir`` and ``save_transcript``. Unknown keys and bad values are
reported together, each with its line number.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .fedsim import SimConfig, config_fields
from .protocol import NOISE_MODES

EXTRA_FIELDS = ("output_dir", "save_transcript")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig
    output_dir: str = "sefl-out"
    save_transcript: bool = False

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self.sim)
        if isinstance(d["samples_per_client"], tuple):
            d["samples_per_client"] = list(d["samples_per_client"])
        d["output_dir"] = self.output_dir
        d["save_transcript"] = self.save_transcript
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _coerce(name: str, value: Any, default: Any) -> Any:
    if name == "samples_per_client":
        if isinstance(value, list):
            return tuple(int(v) for v in value)
        return int(value)
    if name == "noise_mode":
        if value not in NOISE_MODES:
            raise ValueError(f"must be one of {', '.join(NOISE_MODES)}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError("must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError("must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "infinity"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError("must be a number")
        return float(value)
    if isinstance(default, str):
        return str(value)
    return value


def parse_config(text: str, source: str = "<config>", overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Parse YAML text into an :class:`ExperimentConfig`.

    ``overrides`` (e.g. from command-line flags) win over file values.
    """
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{source}: invalid YAML: {exc}"]) from exc
    if node is None:
        raw, lines = {}, {}
    elif not isinstance(node, yaml.MappingNode):
        raise ConfigError([f"{source}:{node.start_mark.line + 1}: top level must be a mapping"])
    else:
        raw = yaml.safe_load(text)
        lines = {k.value: k.start_mark.line + 1 for k, _ in node.value}

    defaults = {f.name: f.default for f in dataclasses.fields(SimConfig)}
    defaults.update(output_dir=ExperimentConfig.output_dir, save_transcript=ExperimentConfig.save_transcript)
    known = set(config_fields()) | set(EXTRA_FIELDS)

    problems: list[str] = []
    values: dict[str, Any] = {}
    merged = dict(raw)
    merged.update(overrides or {})
    for key, value in merged.items():
        where = f"{source}:{lines[key]}" if key in lines and key not in (overrides or {}) else f"{source}:<override>"
        if key not in known:
            problems.append(f"{where}: unknown key '{key}'")
            continue
        try:
            values[key] = _coerce(key, value, defaults[key])
        except (TypeError, ValueError) as exc:
            problems.append(f"{where}: bad value for '{key}' ({value!r}): {exc}")
    if problems:
        raise ConfigError(problems)

    extra = {k: values.pop(k) for k in EXTRA_FIELDS if k in values}
    try:
        sim = SimConfig(**values)
        sim.dp_params()
        sim.bhm_params()
        sim.fixed_point()
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"{source}: {exc}"]) from exc
    return ExperimentConfig(sim=sim, **extra)


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([f"{p}: cannot read config: {exc.strerror}"]) from exc
    return parse_config(text, str(p), overrides)
