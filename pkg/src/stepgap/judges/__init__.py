"""Judgment providers: LLM judge, NLI judge, scripted stubs and the response cache."""

from .cache import CachedBackend, JudgeCache, cache_key
from .llm import LlmJudge, OpenAICompatBackend, TraceContext
from .nli import HttpNliBackend, NliJudge
from .schema import (
    Abstention,
    Alignment,
    Entailment,
    JudgeConfig,
    LlmJudgeResponse,
    NliLabel,
    NliVerdict,
    QuoteSearch,
)
from .scripted import ScriptedLlmBackend, ScriptedNliBackend, load_script, write_script

__all__ = [
    "Abstention",
    "Alignment",
    "CachedBackend",
    "Entailment",
    "HttpNliBackend",
    "JudgeCache",
    "JudgeConfig",
    "LlmJudge",
    "LlmJudgeResponse",
    "NliJudge",
    "NliLabel",
    "NliVerdict",
    "OpenAICompatBackend",
    "QuoteSearch",
    "ScriptedLlmBackend",
    "ScriptedNliBackend",
    "TraceContext",
    "cache_key",
    "load_script",
    "write_script",
]
