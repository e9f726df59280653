"""Search-phase agent loop: prompts, tools, policies and rollouts."""

from .anonymize import anonymize_schema
from .policy import LlmPolicy, LlmProfile, PolicyMessage, ScriptedPolicy, ToolCall, load_profiles
from .prompts import PromptSet, TaskView, assemble_prompts
from .rollout import RolloutConfig, RolloutResult, TurnLog, run_rollout, task_view
from .tools import (
    ExecuteQuery,
    FinalText,
    GetTableInfo,
    GetTrialHistory,
    InvalidCall,
    Observation,
    QueryEvalWorkspace,
    ToolBox,
    ValidateProgram,
    parse_tool_call,
    tool_schemas,
)

__all__ = [
    "anonymize_schema", "LlmPolicy", "LlmProfile", "PolicyMessage", "ScriptedPolicy", "ToolCall",
    "load_profiles", "PromptSet", "TaskView", "assemble_prompts", "RolloutConfig", "RolloutResult",
    "TurnLog", "run_rollout", "task_view", "ExecuteQuery", "FinalText", "GetTableInfo", "GetTrialHistory",
    "InvalidCall", "Observation", "QueryEvalWorkspace", "ToolBox", "ValidateProgram", "parse_tool_call",
    "tool_schemas",
]
