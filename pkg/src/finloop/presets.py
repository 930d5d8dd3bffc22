"""Shipped prompt texts and other text assets."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .errors import ConfigError

# Seed prompts selectable by name in configs and on the command line.
PROMPT_PRESETS = {
    "base": "base_prompt.txt",
    "cot": "cot_prompt.txt",
    "pot": "pot_prompt.txt",
    "refined_short": "refined_short.txt",
    "refined_long": "refined_long.txt",
}

GENERATION_TEMPLATE = "generation_template.txt"


def load_asset(filename: str) -> str:
    return resources.files("finloop.assets").joinpath(filename).read_text("utf-8")


def prompt_text(spec: str) -> str:
    """Resolve a preset name or a filesystem path to prompt text."""
    if spec in PROMPT_PRESETS:
        return load_asset(PROMPT_PRESETS[spec]).strip()
    path = Path(spec)
    if path.is_file():
        return path.read_text(encoding="utf-8").strip()
    raise ConfigError(
        f"unknown prompt {spec!r}; use one of {sorted(PROMPT_PRESETS)} or a file path"
    )


def generation_template() -> tuple[str, str]:
    """(system text, user template) of the data-generation prompt.

    The user template keeps its substitution slots: {c}, {c_max},
    {history}, {exemplars}.
    """
    raw = load_asset(GENERATION_TEMPLATE)
    marker = "[User Input]:"
    head, _, tail = raw.partition(marker)
    if not tail:
        raise ConfigError("generation template is missing its user section")
    system = head.replace("[System Input]:", "", 1).strip()
    return system, tail.strip()
