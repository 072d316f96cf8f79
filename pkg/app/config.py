"""
Application configuration using Pydantic Settings.
All environment variables are loaded here.
"""
from pydantic_settings import BaseSettings
from typing import Optional


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""
    
    # Server
    ENVIRONMENT: str = "development"
    DEBUG: bool = True
    API_HOST: str = "0.0.0.0"
    API_PORT: int = 8000
    
    # Numerics
    NUMERIC_MODE: str = "float"  # float or int (exact 32-bit)
    FLOAT_RTOL: float = 1e-6
    
    # Analysis
    ENUMERATION_CAP: int = 10_000_000  # addresses per edge before symbolic-only verdicts
    
    # Transformations
    MAX_COARSE_ROUNDS: int = 8
    MAX_FINE_ROUNDS: int = 8
    
    # Buffers
    FIFO_DEFAULT_DEPTH: int = 2
    HBM_CHANNELS: int = 1
    
    # Design-space exploration
    N_THRESHOLD: float = 2.0
    MAX_PARALLEL: int = 64
    MAX_UP_ITERS: int = 10
    ENABLE_DOWNSCALE: bool = True
    
    # Device (Alveo U280 class)
    DEVICE_DSP: int = 9024
    DEVICE_BRAM18K: int = 4032
    DEVICE_LUT: int = 1_300_000
    DEVICE_FF: int = 2_600_000
    
    # Simulation
    SIM_MAX_CYCLES_FACTOR: int = 100
    
    # Optional JSON overrides
    COST_TABLE_PATH: Optional[str] = None
    DEVICE_PATH: Optional[str] = None
    
    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None
    
    class Config:
        env_file = ".env"
        case_sensitive = True
    
    @property
    def integer_mode(self) -> bool:
        """True when tensors use exact 32-bit integer arithmetic."""
        return self.NUMERIC_MODE.lower() == "int"


# Global settings instance
settings = Settings()
