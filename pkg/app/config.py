from typing import Optional
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # Logging
    log_level: str = "INFO"

    # Output directory override (takes precedence over the config file)
    output_dir: Optional[str] = None

    # Trial worker pool size used when the config does not set one
    default_workers: int = 1

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"

    def resolve_output_dir(self, configured: str) -> str:
        """Return the environment override if present, else the configured directory."""
        return self.output_dir or configured


settings = Settings()
