"""
Database models for the run ledger
"""
import json
from datetime import datetime
from typing import List, Optional

from sqlalchemy import Column, DateTime, Integer, String, Text

from mmnorm.database.connection import Base, get_db, init_db
from mmnorm.models.schemas import RunManifest


class RunRecord(Base):
    """One executed CLI command; rows are only ever inserted"""
    __tablename__ = "run_records"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String(32), index=True, nullable=False)
    seed = Column(Integer)
    tool_version = Column(String(32), nullable=False)
    config_json = Column(Text, nullable=False)
    input_hashes_json = Column(Text, nullable=False)
    output_paths_json = Column(Text, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow, index=True)

    @classmethod
    def from_manifest(cls, manifest: RunManifest) -> "RunRecord":
        return cls(
            command=manifest.command,
            seed=manifest.seed,
            tool_version=manifest.tool_version,
            config_json=json.dumps(manifest.config, sort_keys=True),
            input_hashes_json=json.dumps(manifest.input_hashes, sort_keys=True),
            output_paths_json=json.dumps(manifest.output_paths),
            created_at=manifest.created_at,
        )

    def to_manifest(self) -> RunManifest:
        return RunManifest(
            command=self.command,
            config=json.loads(self.config_json),
            seed=self.seed,
            input_hashes=json.loads(self.input_hashes_json),
            output_paths=json.loads(self.output_paths_json),
            tool_version=self.tool_version,
            created_at=self.created_at,
        )

    def __repr__(self):
        return f"<RunRecord(id={self.id}, command={self.command}, created_at={self.created_at})>"


def record_run(manifest: RunManifest, url: Optional[str] = None) -> int:
    """Append a manifest to the ledger and return its row id"""
    init_db(url)
    with get_db(url) as db:
        row = RunRecord.from_manifest(manifest)
        db.add(row)
        db.flush()
        return row.id


def list_runs(command: Optional[str] = None, url: Optional[str] = None) -> List[RunManifest]:
    init_db(url)
    with get_db(url) as db:
        query = db.query(RunRecord)
        if command:
            query = query.filter(RunRecord.command == command)
        return [row.to_manifest() for row in query.order_by(RunRecord.id).all()]
