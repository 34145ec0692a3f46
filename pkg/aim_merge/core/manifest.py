"""Run manifests written next to every CLI output."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from pydantic import ValidationError as PydanticValidationError

from aim_merge import __version__
from aim_merge.core.errors import InputError
from aim_merge.core.models import RunManifest

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_path(output: Path) -> Path:
    output = Path(output)
    return output.with_name(output.name + MANIFEST_SUFFIX)


def build_manifest(
    command: str,
    argv: List[str],
    config: Dict[str, Any],
    inputs: Iterable[Path],
    outputs: Iterable[Path],
    seed: Optional[int] = None,
) -> RunManifest:
    """Hash every input and output file; paths are stored as given on the command line."""
    return RunManifest(
        command=command,
        argv=list(argv),
        config=config,
        inputs={str(p): file_sha256(Path(p)) for p in inputs},
        outputs={str(p): file_sha256(Path(p)) for p in outputs},
        seed=seed,
        tool_version=__version__,
    )


def write_manifest(manifest: RunManifest, output: Path) -> Path:
    """Write ``<output>.manifest.json`` and return its path."""
    path = manifest_path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote manifest {path}")
    return path


def load_manifest(path: Path) -> RunManifest:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    try:
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except PydanticValidationError as e:
        raise InputError(f"{path}: malformed manifest: {e}") from e
