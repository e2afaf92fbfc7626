"""Run configuration: defaults, JSON persistence and dotted overrides."""
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from logic.env import ScenarioConfig
from logic.model import ModelParams
from logic.trainer import TrainConfig

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PWM_OPTO_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


class ConfigError(ValueError):
    """Raised when a configuration file or override is invalid."""

    def __init__(self, message, field=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.field = field
        self.line = line


@dataclass(frozen=True)
class RunConfig:
    model: ModelParams = field(default_factory=ModelParams)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = ""
    label: str = "run"

    def __post_init__(self):
        if not str(self.label).strip():
            raise ConfigError("label must be non-empty", field="label")

    def resolved_output_dir(self):
        """The configured output directory, or <output root>/<label>."""
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / self.label

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "scenario": self.scenario.to_dict(),
            "train": self.train.to_dict(),
            "output_dir": self.output_dir,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, data):
        sections = {}
        for name, loader in (("model", ModelParams.from_dict),
                             ("scenario", ScenarioConfig.from_dict),
                             ("train", TrainConfig.from_dict)):
            try:
                sections[name] = loader(data.get(name, {}))
            except (ValueError, TypeError, KeyError) as e:
                raise ConfigError(str(e), field=name) from e
        return cls(output_dir=str(data.get("output_dir", "")), label=str(data.get("label", "run")), **sections)


def _merge(base, update, prefix=""):
    """Recursively update ``base`` with ``update``; unknown keys are rejected."""
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError("unknown setting", field=path)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError("expected an object", field=path)
            _merge(base[key], value, path + ".")
        else:
            base[key] = value
    return base


def load_run_config(path):
    """Load a run configuration, starting from the defaults."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror or e}") from e
    try:
        saved = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, line=e.lineno) from e
    if not isinstance(saved, dict):
        raise ConfigError("top level must be a JSON object", line=1)
    settings = _merge(RunConfig().to_dict(), saved)
    logger.debug("Loaded settings from %s", path)
    return RunConfig.from_dict(settings)


def save_run_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg, overrides):
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    settings = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        node = settings
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError("unknown setting", field=key)
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError("unknown setting", field=key)
        node[parts[-1]] = _parse_value(raw)
    return RunConfig.from_dict(settings)


def with_output_dir(cfg, output_dir):
    return replace(cfg, output_dir=str(output_dir))
