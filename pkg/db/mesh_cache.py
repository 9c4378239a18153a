import os
import hashlib
import logging
import traceback
from typing import Dict, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class MeshCache:
    """Meshes keyed by configuration and mesh parameters, stored as npz files."""

    def __init__(self, cache_dir: Optional[str] = None):
        self.cache_dir = cache_dir if cache_dir is not None else os.environ.get("Z2EIG_CACHE_DIR")
        self.memory: Dict[str, Tuple[np.ndarray, np.ndarray, int]] = {}

        if self.cache_dir:
            try:
                os.makedirs(self.cache_dir, exist_ok=True)
                logger.info(f"Using persistent mesh cache at {self.cache_dir}")
            except (PermissionError, OSError) as e:
                logger.error(f"Cannot create mesh cache directory {self.cache_dir}: {str(e)}")
                # fall back to in-memory storage if persistent fails
                logger.warning("Falling back to in-memory mesh cache")
                self.cache_dir = None
        else:
            logger.info("Using in-memory mesh cache")

    @staticmethod
    def key(config, params, background=None) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(config.points, dtype=np.float64).tobytes())
        for name, value in sorted(params.to_dict().items()):
            digest.update(f"{name}={value};".encode())
        if background is not None:
            digest.update(np.ascontiguousarray(background, dtype=np.float64).tobytes())
        return digest.hexdigest()[:24]

    def _path(self, key: str) -> str:
        return os.path.join(self.cache_dir, f"mesh_{key}.npz")

    def get(self, config, params, background=None) -> Optional[Tuple[np.ndarray, np.ndarray, int]]:
        """Cached (vertices, triangles, n_flagged) or None."""
        key = self.key(config, params, background)
        if key in self.memory:
            return self.memory[key]
        if not self.cache_dir or not os.path.exists(self._path(key)):
            return None
        try:
            with np.load(self._path(key)) as data:
                entry = (data["vertices"], data["triangles"], int(data["n_flagged"]))
            self.memory[key] = entry
            logger.info(f"Loaded cached mesh {key}")
            return entry
        except Exception as e:
            # a corrupt cache file is rebuilt rather than fatal
            logger.warning(f"Ignoring unreadable cache entry {key}: {str(e)}")
            return None

    def put(self, config, params, background, mesh) -> str:
        key = self.key(config, params, background)
        entry = (mesh.vertices, mesh.triangles, mesh.n_flagged)
        self.memory[key] = entry
        if not self.cache_dir:
            return key
        try:
            np.savez_compressed(
                self._path(key),
                vertices=mesh.vertices,
                triangles=mesh.triangles,
                n_flagged=np.array(mesh.n_flagged),
            )
            logger.info(f"Cached mesh {key} ({mesh.n_vertices} vertices)")
        except Exception as e:
            error_msg = f"Error writing mesh cache entry {key}: {str(e)}"
            logger.error(error_msg)
            logger.error(traceback.format_exc())
            raise RuntimeError(error_msg)
        return key

    def clear(self) -> int:
        """Remove every cached mesh; returns the number of files deleted."""
        self.memory.clear()
        if not self.cache_dir:
            return 0
        removed = 0
        for name in os.listdir(self.cache_dir):
            if name.startswith("mesh_") and name.endswith(".npz"):
                os.remove(os.path.join(self.cache_dir, name))
                removed += 1
        logger.info(f"Cleared {removed} cached meshes")
        return removed
