from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="CHAIN_SURGEON_", extra="ignore")

    PROJECT_NAME: str = "chain-surgeon"
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s - %(levelname)s - %(message)s"
    JOBS: int = 1
    SEED: int = 0

    # dense solves
    MAX_DENSE_VERTICES: int = 8192

    # exact enumeration of integer heights
    ENUMERATION_MAX_VERTICES: int = 6
    ENUMERATION_MAX_TRUNCATION: int = 12
    QSOS_ENUMERATION_MAX_TRUNCATION: int = 48
    ENUMERATION_REL_TOL: float = 1e-8

    # numerical tolerances
    TAIL_REL_TOL: float = 1e-10
    STRUCTURAL_REL_TOL: float = 1e-10
    REPLAY_REL_TOL: float = 1e-12
    MAX_TRANSCRIPT_STEPS: int = 20000

    # pipelines
    EMBED2D_C1: float | None = None
    QSOS_TAIL_CUTOFF_FACTOR: int = 4

    # heat-bath defaults
    MCMC_BURN_IN_SWEEPS: int = 1000
    MCMC_MEASURE_SWEEPS: int = 20000
    MCMC_THINNING: int = 1
    MCMC_BATCH_COUNT: int = 16

    # scaling acceptance
    EXACT_EXPONENT_TOL: float = 0.05
    MCMC_EXPONENT_TOL: float = 0.15
    INTERIOR_EXPONENT_TOL: float = 0.10
    LOG_CORRECTED_MIN_N: int = 64
    BOUNDED_SPREAD_TOL: float = 1.2
    LOG_BAND_TOL: float = 0.25
    LOGLIN_BAND_TOL: float = 0.20
    QSOS_ENVELOPE_SLACK: float = 0.25

    # q-SOS annealing
    QSOS_DRAWS: int = 32


settings = Settings()
