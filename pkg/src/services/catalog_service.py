import logging
from typing import List

from sqlalchemy import select
from sqlalchemy.exc import IntegrityError
from sqlalchemy.orm import Session

from src.core.exceptions import DatasetExistsError, DatasetNotFoundError
from src.models.dataset import Dataset
from src.schemas.dataset import DatasetConfig, DatasetListResponse

logger = logging.getLogger(__name__)


def save_dataset_to_db(config: DatasetConfig, db_session: Session) -> int:
    """
    Register a dataset definition in the catalog.

    Args:
        config (DatasetConfig): Validated dataset definition.
        db_session (Session): The active catalog session.

    Returns:
        int: The catalog id of the new dataset.
    """
    if db_session.scalar(select(Dataset).where(Dataset.name == config.name)) is not None:
        raise DatasetExistsError(f"dataset {config.name!r} already exists")
    try:
        row = Dataset(**config.model_dump(exclude={"created_at"}))
        db_session.add(row)
        db_session.flush()
        logger.info("Dataset %s registered with id %s", config.name, row.dataset_id)
        return row.dataset_id
    except IntegrityError as e:
        db_session.rollback()
        raise DatasetExistsError(f"dataset {config.name!r} already exists") from e
    except Exception as e:
        db_session.rollback()
        logger.error("Failed to register dataset %s: %s", config.name, e)
        raise


def get_dataset_from_db(name: str, db_session: Session) -> DatasetConfig:
    """
    Fetch one dataset definition.

    Args:
        name (str): Dataset name.
        db_session (Session): The active catalog session.

    Returns:
        DatasetConfig: The stored definition.
    """
    row = db_session.scalar(select(Dataset).where(Dataset.name == name))
    if row is None:
        raise DatasetNotFoundError(f"dataset {name!r} does not exist")
    return DatasetConfig.model_validate(row)


def list_datasets_from_db(db_session: Session) -> List[DatasetListResponse]:
    rows = db_session.scalars(select(Dataset).order_by(Dataset.name)).all()
    return [DatasetListResponse.model_validate(row) for row in rows]


def delete_dataset_from_db(name: str, db_session: Session) -> None:
    row = db_session.scalar(select(Dataset).where(Dataset.name == name))
    if row is None:
        raise DatasetNotFoundError(f"dataset {name!r} does not exist")
    db_session.delete(row)
    logger.info("Dataset %s removed from the catalog", name)
