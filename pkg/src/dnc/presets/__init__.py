"""Bundled run configurations.

Presets are complete run configs checked into the package, loadable by name
from the CLI (``--config preset:micro``) or from code. They are sized for a
single CPU: ``micro`` finishes in seconds and exists for determinism checks,
the ``toy-*`` pair is large enough for the probe gap between pipeline
variants to be visible.
"""

from importlib import resources
import json

from ..config import RunConfig, config_from_dict
from ..errors import ConfigError


def preset_names() -> list:
    names = []
    for entry in resources.files(__name__).iterdir():
        if entry.name.endswith(".json"):
            names.append(entry.name[: -len(".json")])
    return sorted(names)


def load_preset(name: str) -> RunConfig:
    ref = resources.files(__name__).joinpath(f"{name}.json")
    if not ref.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    with ref.open("r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))
