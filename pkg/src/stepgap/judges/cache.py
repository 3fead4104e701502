"""Content-addressed, append-only response cache for judge backends."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
from pathlib import Path
from typing import Any, Protocol

from ..errors import CacheCorrupt

logger = logging.getLogger(__name__)


class Backend(Protocol):
    backend_id: str
    model_name: str

    def call(self, payload: dict[str, Any]) -> dict[str, Any]: ...


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def cache_key(backend_id: str, model_name: str, payload: dict[str, Any]) -> str:
    blob = canonical_json({"backend": backend_id, "model": model_name, "payload": payload})
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class JudgeCache:
    """Maps request keys to stored responses.

    With ``cache_dir`` set, each entry is one file ``<dir>/<k[:2]>/<k>.json``
    that is written once and never rewritten; without it the cache lives in
    memory for the lifetime of the object.
    """

    def __init__(self, cache_dir: str | Path | None = None):
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._memory: dict[str, str] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def _path(self, key: str) -> Path:
        assert self.cache_dir is not None
        return self.cache_dir / key[:2] / f"{key}.json"

    def _read(self, key: str) -> dict[str, Any] | None:
        if self.cache_dir is None:
            text = self._memory.get(key)
            return None if text is None else json.loads(text)
        path = self._path(key)
        if not path.exists():
            return None
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
            if not isinstance(obj, dict) or obj.get("key") != key or "response" not in obj:
                raise CacheCorrupt(f"bad cache entry {path}")
            return obj["response"]
        except (json.JSONDecodeError, UnicodeDecodeError, CacheCorrupt) as exc:
            raise CacheCorrupt(str(exc)) from None

    def get(self, key: str) -> dict[str, Any] | None:
        try:
            return self._read(key)
        except CacheCorrupt as exc:
            logger.warning("ignoring corrupt cache entry %s: %s", key, exc)
            path = self._path(key)
            # keep the damaged bytes for inspection, out of the lookup path
            path.replace(path.with_suffix(".corrupt"))
            return None

    def put(self, key: str, response: dict[str, Any]) -> None:
        text = canonical_json(response)
        if self.cache_dir is None:
            self._memory.setdefault(key, text)
            return
        path = self._path(key)
        if path.exists():
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        entry = canonical_json({"key": key, "response": response})
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(entry)
        os.replace(tmp, path)


class CachedBackend:
    """Wraps a backend so identical requests are answered from the cache."""

    def __init__(self, backend: Backend, cache: JudgeCache):
        self.backend = backend
        self.cache = cache
        self.backend_id = backend.backend_id
        self.model_name = backend.model_name
        self.hits = 0
        self.misses = 0

    def __getattr__(self, name: str) -> Any:
        return getattr(self.backend, name)

    def call(self, payload: dict[str, Any]) -> dict[str, Any]:
        key = cache_key(self.backend_id, self.model_name, payload)
        with self.cache.lock_for(key):
            stored = self.cache.get(key)
            if stored is not None:
                self.hits += 1
                return stored
            response = self.backend.call(payload)
            self.misses += 1
            self.cache.put(key, response)
            return json.loads(canonical_json(response))
