import os
import csv
import hashlib
import logging
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import orjson

# Configure logging
logger = logging.getLogger(__name__)

CODE_VERSION = "0.3.0"
MANIFEST_NAME = "manifest.json"


def dumps(data: Any) -> bytes:
    return orjson.dumps(data, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY)


def file_digest(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


class StorageService:
    """
    Owns one run's output directory and its manifest
    """

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.outputs: List[str] = []
        self.inputs: Dict[str, str] = {}
        try:
            os.makedirs(self.out_dir, exist_ok=True)
        except OSError as e:
            logger.error(f"Cannot create output directory {self.out_dir}: {str(e)}")
            raise
        if os.path.exists(os.path.join(self.out_dir, MANIFEST_NAME)):
            logger.warning(f"Overwriting existing manifest in {self.out_dir}")

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def _track(self, name: str) -> str:
        if name not in self.outputs:
            self.outputs.append(name)
        return self.path(name)

    def write_json(self, name: str, data: Any) -> str:
        target = self._track(name)
        with open(target, "wb") as f:
            f.write(dumps(data))
        logger.info(f"Wrote {target}")
        return target

    def write_csv(self, name: str, rows: Sequence[Dict], columns: Optional[Sequence[str]] = None) -> str:
        """Header row followed by one line per row; missing keys are left empty."""
        target = self._track(name)
        if columns is None:
            columns = list(rows[0].keys()) if rows else []
        with open(target, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _cell(v) for k, v in row.items()})
        logger.info(f"Wrote {len(rows)} rows to {target}")
        return target

    def write_npz(self, name: str, **arrays: np.ndarray) -> str:
        target = self._track(name)
        np.savez_compressed(target, **arrays)
        logger.info(f"Wrote {target}")
        return target

    def register_output(self, name: str) -> str:
        """Track a file written by another component into this directory."""
        return self._track(name)

    def add_input(self, path: Optional[str]) -> None:
        if path:
            self.inputs[os.path.abspath(path)] = file_digest(path)

    def output_names(self) -> List[str]:
        return [n for n in self.outputs if n != MANIFEST_NAME]

    def write_manifest(self, record: Dict[str, Any]) -> str:
        """The one manifest of this directory; a rerun replaces it."""
        target = self.path(MANIFEST_NAME)
        with open(target, "wb") as f:
            f.write(dumps(record))
        logger.info(f"Wrote manifest for '{record.get('command')}' to {target}")
        return target


def _cell(value: Any) -> Any:
    if isinstance(value, (list, tuple, np.ndarray)):
        return " ".join(f"{float(v):.12g}" for v in np.ravel(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.12g}"
    return value


def load_json(path: str) -> Any:
    with open(path, "rb") as f:
        return orjson.loads(f.read())
