"""
Database connection and the experiment run registry model
"""
import logging
import os

from sqlalchemy import Column, DateTime, Float, Integer, String, Text, create_engine, func, text
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

# Get database connection string from environment variable
DATABASE_URL = os.environ.get("DATABASE_URL", "sqlite:///subspace_cl_runs.db")

connect_args = {"check_same_thread": False} if DATABASE_URL.startswith("sqlite") else {}
engine = create_engine(DATABASE_URL, connect_args=connect_args)

SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

Base = declarative_base()


class ExperimentRun(Base):
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    fingerprint = Column(String(64), nullable=False, index=True)
    preset = Column(String(64))
    seed = Column(Integer, nullable=False)
    output_dir = Column(Text, nullable=False)
    status = Column(String(16), nullable=False)
    started_at = Column(DateTime(timezone=True), server_default=func.now())
    ended_at = Column(DateTime(timezone=True))
    a_last = Column(Float)
    a_avg = Column(Float)
    duration_seconds = Column(Float)
    config_json = Column(Text)
    notes = Column(Text)


def init_db() -> None:
    """Create the registry tables if they do not exist"""
    Base.metadata.create_all(bind=engine)


def get_db():
    """
    Dependency to get a database session
    """
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


def test_connection() -> bool:
    """
    Test the database connection
    """
    try:
        with engine.connect() as conn:
            conn.execute(text("SELECT 1"))
        return True
    except Exception as e:
        logger.error(f"Error connecting to database: {e}")
        return False
