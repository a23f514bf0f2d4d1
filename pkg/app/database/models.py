# app/database/models.py

from typing import Any, Dict

from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Integer, JSON, String
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func

from app.database.base import Base


class RunRecord(Base):
    """
    One archived run: a solve, a sweep grid point, or a simulation.
    The metrics column holds the full table as JSON; MetricRecord rows
    make single metrics queryable.
    """
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True)
    timestamp = Column(DateTime, server_default=func.now(), nullable=False)
    command = Column(String(32), nullable=False, index=True)
    model_name = Column(String(255), nullable=False, index=True)
    parameter = Column(Float)
    pi_empty = Column(Float)
    min_delta = Column(Float)
    stable = Column(Boolean)
    metrics = Column(JSON)

    metric_rows = relationship("MetricRecord", back_populates="run", cascade="all, delete-orphan")

    def to_dict(self) -> Dict[str, Any]:
        """Convert the run to a dictionary."""
        return {
            'id': self.id,
            'timestamp': self.timestamp.isoformat() if self.timestamp else None,
            'command': self.command,
            'model_name': self.model_name,
            'parameter': self.parameter,
            'pi_empty': self.pi_empty,
            'min_delta': self.min_delta,
            'stable': self.stable,
            'metrics': self.metrics
        }


class MetricRecord(Base):
    __tablename__ = "run_metrics"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    metric = Column(String(64), nullable=False, index=True)
    class_name = Column(String(64), nullable=False, default="")
    value = Column(Float)
    stddev = Column(Float)

    run = relationship("RunRecord", back_populates="metric_rows")
