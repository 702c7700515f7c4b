"""Staged penetration-testing orchestration for LLM agents.

The package wires a chat-model gateway, retrieval store, sandboxed command
executor, and a vulnerability knowledge tree into a three-stage pipeline:
intelligence gathering, vulnerability analysis, and exploitation.
"""

from .config import ConfigError
from .gateway import (
    BackendUnreachable,
    ChatSession,
    ContextOverflow,
    GatewayError,
    ProviderProfile,
    ReplayMismatch,
    StructuredResponse,
    TokenUsage,
    UsageLedger,
    cost_of,
    estimate_tokens,
)
from .knowledge import ExploitNode, KnowledgeTree, VulnerabilityNode
from .pipeline import PipelineRunner, RunConfig, StageIncomplete, run_pipeline
from .rag import RagStore
from .sandbox import CommandSpec, ExecutionResult, SandboxExecutor, ScopeSet
from .versions import Version, VersionConstraint, constraint_matches

__version__ = "0.1.0"

__all__ = [
    "BackendUnreachable",
    "ChatSession",
    "CommandSpec",
    "ConfigError",
    "ContextOverflow",
    "ExecutionResult",
    "ExploitNode",
    "GatewayError",
    "KnowledgeTree",
    "PipelineRunner",
    "ProviderProfile",
    "RagStore",
    "ReplayMismatch",
    "RunConfig",
    "SandboxExecutor",
    "ScopeSet",
    "StageIncomplete",
    "StructuredResponse",
    "TokenUsage",
    "UsageLedger",
    "Version",
    "VersionConstraint",
    "VulnerabilityNode",
    "constraint_matches",
    "cost_of",
    "estimate_tokens",
    "run_pipeline",
    "__version__",
]
