"""Graph-based routing of queries to large language models.

Tasks, queries and LLMs form a heterogeneous graph; a message-passing network
scores query-LLM edges and the router picks the best-scoring LLM. New LLMs are
added from a description and a few recorded interactions, without retraining.
"""

from .datahub import (
    BALANCE,
    COST_FIRST,
    PERFORMANCE_FIRST,
    SCENARIOS,
    InteractionLog,
    InteractionRecord,
    LlmInfo,
    ScenarioWeights,
    TaskInfo,
    compute_reward,
)
from .errors import GraphRouterError, NumericError, ShapeError, ValidationError
from .router import RouteDecision, RouterSnapshot, add_llm_few_shot, route, serve
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BALANCE", "COST_FIRST", "PERFORMANCE_FIRST", "SCENARIOS",
    "InteractionLog", "InteractionRecord", "LlmInfo", "ScenarioWeights", "TaskInfo", "compute_reward",
    "GraphRouterError", "NumericError", "ShapeError", "ValidationError",
    "RouteDecision", "RouterSnapshot", "add_llm_few_shot", "route", "serve",
    "Checkpoint", "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
