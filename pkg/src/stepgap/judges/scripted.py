"""Deterministic scripted backends used for tests, fixtures and replay.

A script is an ordered list of entries ``{"match": {...}, ...}``; the first
entry whose matcher accepts the request answers it.  A matcher is a mapping
of request field to expected value; a key ending in ``__contains`` checks for
a substring instead of equality.  Requests no entry matches raise
:class:`ScriptExhausted`.

LLM entries carry ``"response"`` (the wire object to return).  NLI entries
carry ``"scores"`` in the fixed order (entailment, neutral, contradiction),
which the backend permutes into its own emitted label order, or ``"raw"`` to
emit a vector verbatim.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ..errors import ScriptExhausted
from .schema import NliLabel

CANONICAL_ORDER = (NliLabel.ENTAILMENT, NliLabel.NEUTRAL, NliLabel.CONTRADICTION)

ENTAILMENT_PROBE = ("A cat is an animal.", "A cat is an animal.")
CONTRADICTION_PROBE = ("The cat is alive.", "The cat is dead.")


def load_script(path: str | Path) -> list[dict[str, Any]]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            entry = json.loads(line)
            if not isinstance(entry, dict) or "match" not in entry:
                raise ValueError(f"{path}:{lineno}: script entry needs a 'match' object")
            entries.append(entry)
    return entries


def write_script(path: str | Path, entries: Iterable[Mapping[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True, ensure_ascii=False) + "\n")


def matches(matcher: Mapping[str, Any], view: Mapping[str, Any]) -> bool:
    for key, expected in matcher.items():
        if key.endswith("__contains"):
            actual = view.get(key[: -len("__contains")])
            if actual is None or str(expected) not in str(actual):
                return False
        elif view.get(key) != expected:
            return False
    return True


class _ScriptedBase:
    def __init__(self, script: Sequence[Mapping[str, Any]] | str | Path, backend_id: str, model_name: str):
        self.script = load_script(script) if isinstance(script, (str, Path)) else [dict(e) for e in script]
        self.backend_id = backend_id
        self.model_name = model_name
        self.requests: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return len(self.requests)

    def _lookup(self, view: Mapping[str, Any]) -> Mapping[str, Any]:
        for entry in self.script:
            if matches(entry["match"], view):
                return entry
        shown = {k: v for k, v in view.items() if k not in ("messages", "evidence", "candidates")}
        raise ScriptExhausted(f"{self.backend_id}: no script entry matches {shown}")


class ScriptedLlmBackend(_ScriptedBase):
    def __init__(self, script: Sequence[Mapping[str, Any]] | str | Path, model_name: str = "scripted-llm"):
        super().__init__(script, "scripted-llm", model_name)

    def call(self, payload: dict[str, Any]) -> dict[str, Any]:
        view = {"kind": payload.get("kind"), **payload.get("fields", {})}
        with self._lock:
            self.requests.append(payload)
        entry = self._lookup(view)
        return json.loads(json.dumps(entry["response"]))


class ScriptedNliBackend(_ScriptedBase):
    """Three-class NLI stub with a configurable emitted label order.

    ``emits`` is ``"probs"`` (scores normalized by their sum) or ``"logits"``
    (softmaxed by the judge).  With ``answer_probes`` the backend knows the
    two calibration probes without needing script entries for them.
    """

    def __init__(
        self,
        script: Sequence[Mapping[str, Any]] | str | Path = (),
        label_order: Sequence[str | NliLabel] = CANONICAL_ORDER,
        emits: str = "probs",
        answer_probes: bool = True,
        model_name: str = "scripted-nli",
    ):
        super().__init__(script, "scripted-nli", model_name)
        self.label_order = tuple(NliLabel(l) for l in label_order)
        if sorted(l.value for l in self.label_order) != sorted(l.value for l in CANONICAL_ORDER):
            raise ValueError(f"label_order must be a permutation of the three labels: {label_order}")
        if emits not in ("probs", "logits"):
            raise ValueError("emits must be 'probs' or 'logits'")
        self.emits = emits
        self.answer_probes = answer_probes

    def _emit(self, canonical: Sequence[float]) -> list[float]:
        by_label = dict(zip(CANONICAL_ORDER, canonical))
        return [float(by_label[l]) for l in self.label_order]

    def call(self, payload: dict[str, Any]) -> dict[str, Any]:
        with self._lock:
            self.requests.append(payload)
        pair = (payload.get("premise"), payload.get("hypothesis"))
        if self.answer_probes and pair == ENTAILMENT_PROBE:
            return {"scores": self._emit((0.97, 0.02, 0.01)), "emits": self.emits}
        if self.answer_probes and pair == CONTRADICTION_PROBE:
            return {"scores": self._emit((0.01, 0.04, 0.95)), "emits": self.emits}
        entry = self._lookup(payload)
        if "raw" in entry:
            return {"scores": [float(x) for x in entry["raw"]], "emits": self.emits}
        return {"scores": self._emit(entry["scores"]), "emits": self.emits}
