"""
Runtime settings for the multimodal diffusion toolkit
"""
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings"""

    # Paths and runtime
    output_dir: str = "outputs"
    experiment_config: Optional[str] = None
    log_level: str = "INFO"
    max_workers: int = 4

    # API Configuration
    api_title: str = "Multimodal Diffusion Reconstruction API"
    api_version: str = "1.0.0"
    api_description: str = "Joint-modality diffusion priors and SMC inpainting for black-box inverse problems"
    port: int = 8765
    host: str = "0.0.0.0"

    model_config = SettingsConfigDict(
        env_file=".env",
        case_sensitive=False,
        extra="allow",
    )


settings = Settings()
