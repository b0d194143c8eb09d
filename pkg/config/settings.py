"""
Process-level settings for zdsynth.

Pipeline parameters live in the JSON config passed on the command line
(see app/schemas/config.py); this module only carries the knobs that are
naturally set from the environment.
"""
from typing import Optional

import psutil
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings


def _default_workers() -> int:
    return psutil.cpu_count(logical=False) or 1


class Settings(BaseSettings):
    """Application settings with environment variable support."""

    # Worker pool
    workers: int = Field(default_factory=_default_workers, alias="ZDSYNTH_WORKERS")

    # Logging
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")
    log_format: str = Field(default="text", alias="LOG_FORMAT")
    log_dir: str = Field(default="logs", alias="LOG_DIR")

    # Artifacts
    output_root: Optional[str] = Field(default=None, alias="ZDSYNTH_OUTPUT_ROOT")

    # Slow acceptance-scale tests
    run_slow: bool = Field(default=False, alias="ZDSYNTH_RUN_SLOW")

    @field_validator("workers")
    @classmethod
    def _at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("ZDSYNTH_WORKERS must be >= 1")
        return value

    @field_validator("log_format")
    @classmethod
    def _known_format(cls, value: str) -> str:
        if value not in ("json", "text"):
            raise ValueError(f"LOG_FORMAT must be 'json' or 'text', got {value!r}")
        return value

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = False
        populate_by_name = True


# Global settings instance
settings = Settings()
