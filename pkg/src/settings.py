"""
Reglages de l'application.
Lus depuis un demixbench.toml optionnel dans le repertoire courant; aucune
variable d'environnement n'est consultee.
"""

from functools import lru_cache
from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict, TomlConfigSettingsSource

PROJECT_ROOT = Path(__file__).resolve().parent.parent


class AppSettings(BaseSettings):
    """Reglages globaux du banc d'essai."""

    model_config = SettingsConfigDict(toml_file="demixbench.toml", extra="ignore")

    out_dir: str = "results"
    workers: int = Field(default=1, ge=1)
    presets_dir: str = str(PROJECT_ROOT / "data" / "presets")

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return init_settings, TomlConfigSettingsSource(settings_cls)


@lru_cache(maxsize=1)
def get_settings() -> AppSettings:
    return AppSettings()
