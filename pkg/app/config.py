from pydantic import AliasChoices, Field
from pydantic_settings import BaseSettings
from typing import Optional

class Settings(BaseSettings):
    # Workspace
    WORKSPACE_DIR: str = "./workspace"
    DATABASE_URL: Optional[str] = None  # defaults to <workspace>/commits.db

    # Container
    BLOCK_BYTES: int = 262144  # nominal block size, 256 KiB
    VERIFY_INTEGRITY: bool = False

    # Planning
    SCORING_RULE: str = "utility-per-byte"

    # Execution
    REFERENCE_BASE: bool = False
    JOBS: int = 1

    # Seeds (generator and DARE)
    SEED: int = Field(0, validation_alias=AliasChoices("MERGEPIPE_SEED", "BLOCKMERGE_SEED"))

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: str = "blockmerge.log"

    class Config:
        env_file = ".env"
        env_prefix = "BLOCKMERGE_"
        extra = "ignore"

    def database_url(self, workspace: Optional[str] = None) -> str:
        """Ledger URL for a workspace, unless one is configured explicitly"""
        if self.DATABASE_URL:
            return self.DATABASE_URL
        return f"sqlite:///{workspace or self.WORKSPACE_DIR}/commits.db"

settings = Settings()
