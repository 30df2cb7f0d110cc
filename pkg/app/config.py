"""Configuration management for the application."""

import os
from typing import Dict

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


class Config:
    """Application configuration loaded from environment variables."""

    # Application settings
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    ENVIRONMENT: str = os.getenv("ENVIRONMENT", "development")

    # Logfire configuration
    LOGFIRE_TOKEN: str = os.getenv("LOGFIRE_TOKEN", "")
    LOGFIRE_SERVICE_NAME: str = os.getenv("LOGFIRE_SERVICE_NAME", "evoreserve")

    # Filter defaults
    DEFAULT_PARTICLES: int = int(os.getenv("DEFAULT_PARTICLES", "2000"))
    DEFAULT_XI: float = float(os.getenv("DEFAULT_XI", "0.98"))
    DEFAULT_DRAWS: int = int(os.getenv("DEFAULT_DRAWS", "100000"))
    DEFAULT_SEED: int = int(os.getenv("DEFAULT_SEED", "20240101"))
    ESS_WARNING_FRACTION: float = float(os.getenv("ESS_WARNING_FRACTION", "0.1"))
    ARTIFICIAL_NOISE: float = float(os.getenv("ARTIFICIAL_NOISE", "1e-6"))

    # Parallelism
    WORKERS: int = int(os.getenv("WORKERS", str(os.cpu_count() or 1)))
    PARTICLE_BLOCK_SIZE: int = int(os.getenv("PARTICLE_BLOCK_SIZE", "4096"))

    # Tweedie series controls
    TWEEDIE_DROP: float = float(os.getenv("TWEEDIE_DROP", "37.0"))
    TWEEDIE_MAX_TERMS: int = int(os.getenv("TWEEDIE_MAX_TERMS", "5000"))

    # Static GLM
    GLM_MAX_ITER: int = int(os.getenv("GLM_MAX_ITER", "200"))
    GLM_PRIOR_SCALE: float = float(os.getenv("GLM_PRIOR_SCALE", "4.0"))

    @classmethod
    def validate(cls) -> Dict[str, str]:
        """
        Validate that the configured values are usable.

        Returns:
            Dict[str, str]: Dictionary of invalid configuration variables and their descriptions
        """
        invalid_vars: Dict[str, str] = {}

        if cls.DEFAULT_PARTICLES < 1:
            invalid_vars["DEFAULT_PARTICLES"] = "Particle count must be positive"

        if not 0.0 < cls.DEFAULT_XI <= 1.0:
            invalid_vars["DEFAULT_XI"] = "Shrinkage coefficient must lie in (0, 1]"

        if cls.DEFAULT_DRAWS < 1:
            invalid_vars["DEFAULT_DRAWS"] = "Forecast draw count must be positive"

        if cls.WORKERS < 1:
            invalid_vars["WORKERS"] = "Worker count must be positive"

        if cls.PARTICLE_BLOCK_SIZE < 1:
            invalid_vars["PARTICLE_BLOCK_SIZE"] = "Particle block size must be positive"

        if cls.TWEEDIE_MAX_TERMS < 10:
            invalid_vars["TWEEDIE_MAX_TERMS"] = "Tweedie series needs at least 10 terms"

        if cls.ARTIFICIAL_NOISE < 0:
            invalid_vars["ARTIFICIAL_NOISE"] = "Artificial noise must be non-negative"

        # Logfire token is optional in development but required in production
        if cls.ENVIRONMENT == "production" and not cls.LOGFIRE_TOKEN:
            invalid_vars["LOGFIRE_TOKEN"] = "Logfire token is required in production"

        return invalid_vars
