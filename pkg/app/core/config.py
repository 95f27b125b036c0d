import os
from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict


BASE_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "../../"))
load_dotenv(os.path.join(BASE_DIR, ".env"))


class Settings(BaseSettings):
    PROJECT_NAME: str = "MORPHEUS OMICS"
    LOGGING_CONFIG_FILE: str = os.path.join(BASE_DIR, "logging.ini")
    DEFAULT_SEED: int = 0
    DEFAULT_THREADS: int = 1
    DEFAULT_OUTPUT_DIR: str = os.path.join(BASE_DIR, "runs")
    CHECKPOINT_NAME: str = "model.ckpt"
    EFFECTIVE_CONFIG_NAME: str = "effective_config.toml"
    TRAIN_LOG_NAME: str = "train_log.jsonl"

    model_config = SettingsConfigDict(env_file=os.path.join(BASE_DIR, ".env"), env_prefix="MORPHEUS_")


settings = Settings()
