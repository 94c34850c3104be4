from .core import (
    BundleParseError,
    ExamplePair,
    Grade,
    IntegrityError,
    InvalidInstructionError,
    Source,
    TaskRecord,
    TaskSet,
    Violation,
    bucket_categories,
    bucket_counts,
    derive_category,
    load_taskset,
    save_taskset,
    validate_task,
)

__all__ = [
    "BundleParseError", "ExamplePair", "Grade", "IntegrityError", "InvalidInstructionError", "Source",
    "TaskRecord", "TaskSet", "Violation", "bucket_categories", "bucket_counts", "derive_category",
    "load_taskset", "save_taskset", "validate_task",
]
