"""Environment-level settings."""

import sys
from functools import lru_cache

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process settings loaded from the environment (prefix H2DILR_) or .env."""

    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str | None = None

    model_config = SettingsConfigDict(
        env_prefix="H2DILR_", env_file=".env", env_file_encoding="utf-8", extra="ignore"
    )


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    try:
        return Settings()
    except Exception as e:
        print(f"\n[ERROR] Environment settings invalid: {e}")
        print("\nCheck H2DILR_* variables and your .env file.")
        print("Example: H2DILR_LOG_LEVEL=DEBUG")
        sys.exit(1)
