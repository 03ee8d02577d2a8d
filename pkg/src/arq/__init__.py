"""Stepping-stone pipeline: generate easier related problems, measure how
much their worked solutions help a solver on the real target, keep the
best, and export the winners as training data."""

from .backend import (
    AuthError,
    BackendConfig,
    BackendError,
    BackendUnavailable,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    HttpBackend,
    MockBackend,
    RoleSpec,
    SamplingParams,
    TransientError,
    mock_program,
)
from .pipeline import (
    STRATEGIES,
    Attempt,
    ContextPair,
    Pipeline,
    Problem,
    StoneRecord,
    StoneSolution,
    StrategyConfig,
    load_benchmark,
)
from .scoring import (
    SelectionReport,
    StoneScore,
    TransferResult,
    aggregate_dataset,
    evaluate_transfer,
    score_set,
    score_stone,
    select_best,
    split_half,
)
from .stages import Config, load_config, parse_config
from .store import CachedInvoker, CompletionCache, RunStore
from .verify import GroundTruth, extract_boxed, judge, reward

__version__ = "0.1.0"

__all__ = [
    "AuthError",
    "BackendConfig",
    "BackendError",
    "BackendUnavailable",
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "HttpBackend",
    "MockBackend",
    "RoleSpec",
    "SamplingParams",
    "TransientError",
    "mock_program",
    "STRATEGIES",
    "Attempt",
    "ContextPair",
    "Pipeline",
    "Problem",
    "StoneRecord",
    "StoneSolution",
    "StrategyConfig",
    "load_benchmark",
    "SelectionReport",
    "StoneScore",
    "TransferResult",
    "aggregate_dataset",
    "evaluate_transfer",
    "score_set",
    "score_stone",
    "select_best",
    "split_half",
    "Config",
    "load_config",
    "parse_config",
    "CachedInvoker",
    "CompletionCache",
    "RunStore",
    "GroundTruth",
    "extract_boxed",
    "judge",
    "reward",
    "__version__",
]
