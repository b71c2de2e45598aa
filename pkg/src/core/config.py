from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

from pydantic_settings import BaseSettings
from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base


class Settings(BaseSettings):
    DATA_DIR: str = "./data"
    PARTITIONS: int = 4
    MEMTABLE_BYTES: int = 8 * 1024 * 1024
    MERGE_MAX_BYTES: int = 64 * 1024 * 1024
    MERGE_TOLERABLE_COUNT: int = 5
    COMPRESSION: str = "off"
    PAGE_SIZE: int = 128 * 1024
    LAF_PAGE_SIZE: int = 128 * 1024
    LAF_CACHE_PAGES: int = 64
    PUSHDOWN: bool = True
    SEED: int = 42
    LOG_LEVEL: str = "INFO"
    WAL_FSYNC: bool = True
    EXCHANGE_QUEUE_SIZE: int = 1024
    CRASH_POINT: Optional[str] = None
    CRASH_MODE: str = "exit"

    class Config:
        env_file = ".env"
        env_prefix = "VBSTORE_"

    @property
    def codec_name(self) -> Optional[str]:
        """Codec used for component pages, or None when compression is off."""
        if not self.COMPRESSION or self.COMPRESSION.lower() in ("off", "none"):
            return None
        return self.COMPRESSION.lower()


settings = Settings()


def create_catalog_engine(data_dir: str) -> Engine:
    """Create the SQLAlchemy engine for the dataset catalog under ``data_dir``."""
    path = Path(data_dir)
    path.mkdir(parents=True, exist_ok=True)
    engine = create_engine(f"sqlite:///{path / 'catalog.db'}", future=True)

    # Registers the catalog tables on Base.metadata
    import src.models  # noqa: F401

    Base.metadata.create_all(engine)
    return engine


@contextmanager
def get_catalog_session(data_dir: str) -> Iterator[Session]:
    """Yield a catalog session with commit/rollback handling."""
    engine = create_catalog_engine(data_dir)
    with Session(engine, expire_on_commit=False) as session:
        try:
            yield session
            session.commit()
        except Exception:
            session.rollback()
            raise
        finally:
            engine.dispose()


Base = declarative_base()
