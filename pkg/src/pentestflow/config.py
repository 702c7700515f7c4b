"""Provider configuration: built-in profiles and the JSON config file format.

A provider config file maps profile ids to endpoint descriptions:

    {
      "gpt-4o": {
        "endpoint": "https://api.openai.com/v1/chat/completions",
        "credential_env": "OPENAI_API_KEY",
        "model_name": "gpt-4o",
        "context_window": 128000,
        "input_price": 5.0,
        "output_price": 15.0
      }
    }

Prices are USD per million tokens. Credentials are looked up from the named
environment variable at call time; they never appear in config objects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .gateway import ProviderProfile

DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"

# Window/pricing for two widely used OpenAI models, current as of the 0125
# model generation; override with a config file when they drift.
BUILTIN_PROFILES: dict[str, "ProviderSpec"] = {}


@dataclass(frozen=True)
class ProviderSpec:
    """A profile plus where to reach it."""

    profile: ProviderProfile
    endpoint: str = DEFAULT_ENDPOINT
    credential_env: str = "OPENAI_API_KEY"


class ConfigError(Exception):
    """Malformed or incomplete provider/run configuration."""


def _builtin(
    provider_id: str,
    model_name: str,
    context_window: int,
    input_price: float,
    output_price: float,
) -> None:
    BUILTIN_PROFILES[provider_id] = ProviderSpec(
        profile=ProviderProfile(
            provider_id=provider_id,
            model_name=model_name,
            context_window=context_window,
            input_price=input_price,
            output_price=output_price,
        )
    )


_builtin("gpt-3.5-turbo", "gpt-3.5-turbo-0125", 16385, 0.50, 1.50)
_builtin("gpt-4o", "gpt-4o", 128000, 5.00, 15.00)
# Neutral profile for replayed runs: costs accrue at small-model rates.
_builtin("replay", "replay", 16385, 0.50, 1.50)


def load_provider_specs(path: Path | str) -> dict[str, ProviderSpec]:
    """Parse a provider config file into ProviderSpec entries."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"cannot read provider config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"provider config {path} is not valid JSON: {err}") from err
    if not isinstance(doc, dict):
        raise ConfigError("provider config must be a JSON object")
    specs: dict[str, ProviderSpec] = {}
    for provider_id, raw in doc.items():
        if not isinstance(raw, dict):
            raise ConfigError(f"provider {provider_id!r}: entry must be an object")
        try:
            profile = ProviderProfile(
                provider_id=provider_id,
                model_name=str(raw.get("model_name", provider_id)),
                context_window=int(raw["context_window"]),
                input_price=float(raw["input_price"]),
                output_price=float(raw["output_price"]),
                temperature=float(raw.get("temperature", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"provider {provider_id!r}: {err}") from err
        specs[provider_id] = ProviderSpec(
            profile=profile,
            endpoint=str(raw.get("endpoint", DEFAULT_ENDPOINT)),
            credential_env=str(raw.get("credential_env", "OPENAI_API_KEY")),
        )
    return specs


def resolve_provider(
    provider_id: str, config_path: Path | str | None = None
) -> ProviderSpec:
    """Find a provider spec by id in the config file, then the built-ins."""
    if config_path is not None:
        specs = load_provider_specs(config_path)
        if provider_id in specs:
            return specs[provider_id]
    spec = BUILTIN_PROFILES.get(provider_id)
    if spec is None:
        raise ConfigError(f"unknown provider profile {provider_id!r}")
    return spec
