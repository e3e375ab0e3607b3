"""Memory-augmented LLM fault localization at method granularity."""

from memfl.model import (
    BugCase,
    ClassRecord,
    CoverageProfile,
    ExternalMemory,
    MethodRecord,
    MethodRef,
    PipelineStep,
    ProjectSnapshot,
    RankedSuspects,
    StaticMemory,
    parse_method_ref,
    resolve_ref,
)

__version__ = "0.1.0"

__all__ = [
    "BugCase",
    "ClassRecord",
    "CoverageProfile",
    "ExternalMemory",
    "MethodRecord",
    "MethodRef",
    "PipelineStep",
    "ProjectSnapshot",
    "RankedSuspects",
    "StaticMemory",
    "parse_method_ref",
    "resolve_ref",
]
