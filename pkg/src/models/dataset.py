from sqlalchemy import JSON, TIMESTAMP, Boolean, Column, Integer, String, text

from src.core.config import Base


class Dataset(Base):
    __tablename__ = "datasets"

    dataset_id = Column(Integer, primary_key=True, autoincrement=True)
    name = Column(String(255), nullable=False, unique=True)
    primary_key = Column(String(255), nullable=False)
    declared_fields = Column(JSON, nullable=False, default=list)
    tuple_compactor_enabled = Column(Boolean, nullable=False, default=True)
    compression = Column(String(50))
    partitions = Column(Integer, nullable=False, default=4)
    memtable_bytes = Column(Integer, nullable=False)
    merge_max_bytes = Column(Integer, nullable=False)
    merge_tolerable_count = Column(Integer, nullable=False)
    created_at = Column(TIMESTAMP, nullable=False, server_default=text("CURRENT_TIMESTAMP"))

    def __repr__(self):
        return f"<Dataset(id={self.dataset_id}, name={self.name}, partitions={self.partitions})>"
