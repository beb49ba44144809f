"""Teacher-backed slot annotation, diversity transforms and corpus emission."""

from .audit import aggregate, audit_sample, format_aggregate, read_sheet, write_sheet
from .corpus import (
    CorpusResult,
    CorpusStats,
    GenerationConfig,
    ScenarioSpec,
    annotate,
    default_scenarios,
    format_stats,
    generate_corpus,
)
from .slots import (
    AnnotationError,
    InstructionInstance,
    NotReversible,
    SlotValue,
    SpecificIntentionUnavailable,
    apply_task_reversal,
    build_cot_instance,
    build_relatedness_pair,
    derive_implicit_preference,
    derive_specific_intention,
    extract_vague_intention,
    generate_explicit_preference,
)
from .teacher import (
    AnnotationCache,
    AnnotationClient,
    DeterministicTeacher,
    FixtureTeacher,
    HTTPTeacher,
    MemoryCache,
    PromptSet,
    TeacherError,
    TeacherRequest,
)

__all__ = [
    "AnnotationCache",
    "AnnotationClient",
    "AnnotationError",
    "CorpusResult",
    "CorpusStats",
    "DeterministicTeacher",
    "FixtureTeacher",
    "GenerationConfig",
    "HTTPTeacher",
    "InstructionInstance",
    "MemoryCache",
    "NotReversible",
    "PromptSet",
    "ScenarioSpec",
    "SlotValue",
    "SpecificIntentionUnavailable",
    "TeacherError",
    "TeacherRequest",
    "aggregate",
    "annotate",
    "apply_task_reversal",
    "audit_sample",
    "build_cot_instance",
    "build_relatedness_pair",
    "default_scenarios",
    "derive_implicit_preference",
    "derive_specific_intention",
    "extract_vague_intention",
    "format_aggregate",
    "format_stats",
    "generate_corpus",
    "generate_explicit_preference",
    "read_sheet",
    "write_sheet",
]
