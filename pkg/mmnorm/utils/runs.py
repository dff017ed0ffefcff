"""
Run bookkeeping shared by the CLI commands: config layering and manifests
"""
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Type, TypeVar

from pydantic import BaseModel

from mmnorm.config import settings
from mmnorm.models.models import record_run
from mmnorm.models.schemas import RunManifest
from mmnorm.utils.errors import UsageError
from mmnorm.utils.io import PathLike, atomic_write_text, sha256_file

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


def _merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, Mapping):
            base_value = merged.get(key)
            nested = _merge(base_value if isinstance(base_value, Mapping) else {}, value)
            if nested:
                merged[key] = nested
        else:
            merged[key] = value
    return merged


def load_config(model: Type[ModelT], path: Optional[PathLike], overrides: Mapping[str, Any]) -> ModelT:
    """
    Effective config: flag > config file > model default

    None-valued overrides are flags that were not given.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise UsageError("config file not found", path=str(path))
        data = json.loads(path.read_text(encoding="utf-8"))
    return model.model_validate(_merge(data, overrides))


def hash_inputs(paths: Iterable[PathLike]) -> Dict[str, str]:
    return {str(p): sha256_file(p) for p in sorted(Path(p) for p in paths) if Path(p).is_file()}


def manifest_path(primary: PathLike) -> Path:
    primary = Path(primary)
    return primary.with_name(primary.name + ".manifest.json")


def write_manifest(
    command: str,
    config: Mapping[str, Any],
    primary: PathLike,
    inputs: Iterable[PathLike],
    outputs: Iterable[PathLike],
    seed: Optional[int] = None,
) -> RunManifest:
    """Write the JSON sidecar next to the primary output and append it to the run ledger"""
    manifest = RunManifest(
        command=command,
        config=dict(config),
        seed=seed,
        input_hashes=hash_inputs(inputs),
        output_paths=[str(p) for p in outputs],
        tool_version=settings.VERSION,
        created_at=datetime.now(timezone.utc).replace(tzinfo=None),
    )
    atomic_write_text(manifest_path(primary), manifest.model_dump_json(indent=2) + "\n")
    run_id = record_run(manifest)
    logger.info("Recorded %s run #%d", command, run_id)
    return manifest
