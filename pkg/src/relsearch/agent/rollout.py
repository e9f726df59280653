"""One search rollout: a sequential turn loop between a policy and the tools."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import duckdb

from ..errors import PolicyTimeout, TransportError
from ..harness import Harness
from ..learner import MODEL_CHOICES
from ..relstore import ContextHandle, TaskManifest, open_context
from ..workspace import LogicalClock, Workspace, wall_clock
from .anonymize import anonymize_schema
from .policy import Policy, PolicyMessage, ScriptedPolicy
from .prompts import PromptSet, TaskView, assemble_prompts
from .tools import (
    VALIDATE_PROGRAM,
    FinalText,
    InvalidCall,
    Observation,
    ToolBox,
    ValidateProgram,
    parse_tool_call,
    tool_name,
    tool_schemas,
)

log = logging.getLogger(__name__)

ROLLOUT_FILE = "rollout.json"
TRANSCRIPT_FILE = "transcript.txt"
QUERY_LOG_FILE = "eval_queries.log"


@dataclass
class RolloutConfig:
    max_turns: int = 60
    max_validations: int | None = None
    per_turn_timeout_s: float = 900.0
    no_feedback: bool = False
    no_workspace: bool = False
    anonymize_schema: bool = False
    allowed_models: tuple[str, ...] | None = None
    seed: int = 0
    n_jobs: int = 1
    logical_clock: bool = False

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be at least 1")
        if self.max_validations is not None and self.max_validations < 1:
            raise ValueError("max_validations must be at least 1")
        if self.allowed_models is not None:
            self.allowed_models = tuple(self.allowed_models)
            bad = [m for m in self.allowed_models if m not in MODEL_CHOICES]
            if bad or not self.allowed_models:
                raise ValueError(f"unknown model choices: {bad}")


@dataclass
class TurnLog:
    turn: int
    actions: list[str]
    running_best: float | None
    tool_calls: int
    validations: int


@dataclass
class RolloutResult:
    index: int
    output_dir: str
    workspace_path: str
    trials: list[dict[str, Any]]
    best_trial_id: str | None
    best_score: float | None
    turns: list[TurnLog] = field(default_factory=list)
    status: str = "completed"
    stop_reason: str = ""
    error: str | None = None
    renaming: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["turns"] = [asdict(t) for t in self.turns]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RolloutResult":
        d = dict(d)
        d["turns"] = [TurnLog(**t) for t in d.get("turns", [])]
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RolloutResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


def task_view(ctx: ContextHandle, *, anonymized: bool = False) -> TaskView:
    m = ctx.manifest
    return TaskView(
        task_type=m.task_type,
        task_description="(withheld: schema anonymized)" if anonymized else (m.task_description or "(none)"),
        dataset_name="anonymized" if anonymized else (m.dataset_name or "(unnamed)"),
        entity_col=ctx.entity_col, timestamp_col=ctx.timestamp_col, target_col=ctx.target_col,
        n_val=ctx.n_rows("val"))


class _Transcript:
    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "w")

    def write(self, role: str, text: str) -> None:
        self._fh.write(f"=== {role} ===\n{text.rstrip()}\n\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


_JSON_BLOCK = re.compile(r"```(?:json)?\s*(.*?)```", re.S)


def parse_final_answer(text: str) -> ValidateProgram:
    """Read ``{"feature_queries": [...], "model_choice": ..., "model_config": {...}}`` from free text."""
    candidates = [m.group(1) for m in _JSON_BLOCK.finditer(text)]
    start, end = text.find("{"), text.rfind("}")
    if start != -1 and end > start:
        candidates.append(text[start:end + 1])
    for cand in candidates:
        try:
            doc = json.loads(cand)
        except json.JSONDecodeError:
            continue
        if not isinstance(doc, dict):
            continue
        program = doc.get("feature_queries", doc.get("program", doc.get("feature_queries_json")))
        if program is None:
            continue
        if not isinstance(program, str):
            program = json.dumps(program)
        config = doc.get("model_config", doc.get("model_config_json", {}))
        if not isinstance(config, str):
            config = json.dumps(config)
        return ValidateProgram(program, str(doc.get("model_choice", "gbdt")), config, "final_answer")
    raise ValueError("no JSON object with feature_queries found in the final answer")


def run_rollout(manifest: TaskManifest, policy: Policy, cfg: RolloutConfig, output_dir: str | Path,
                *, index: int = 0) -> RolloutResult:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ws_path = out / "workspace.db"
    if ws_path.exists():
        raise FileExistsError(f"{ws_path} already exists; rollouts need a fresh directory")
    result = RolloutResult(index, str(out), str(ws_path), [], None, None)
    ctx = ws = transcript = None
    try:
        ctx = open_context(manifest)
        if cfg.anonymize_schema:
            renaming = anonymize_schema(ctx, cfg.seed)
            ctx.apply_renaming(renaming)
            result.renaming = renaming.to_dict()
        ctx.bind_split("val")
        clock = LogicalClock() if cfg.logical_clock else wall_clock
        ws = Workspace(ws_path, context_db=ctx.database_path, clock=clock)
        harness = Harness(ctx, ws, seed=cfg.seed, n_jobs=cfg.n_jobs, program_dir=out / "programs")
        toolbox = ToolBox(ctx, ws, harness, allowed_models=cfg.allowed_models, no_workspace=cfg.no_workspace,
                          query_log=out / QUERY_LOG_FILE)
        (out / QUERY_LOG_FILE).touch()
        view = task_view(ctx, anonymized=cfg.anonymize_schema)
        schema_text = ctx.get_table_info().render() if cfg.no_feedback else None
        prompts = assemble_prompts(view, no_feedback=cfg.no_feedback, no_workspace=cfg.no_workspace,
                                   allowed_models=cfg.allowed_models, schema_text=schema_text)
        tools = tool_schemas(view.entity_col, view.timestamp_col, allowed_models=cfg.allowed_models,
                             no_feedback=cfg.no_feedback, no_workspace=cfg.no_workspace)
        transcript = _Transcript(out / TRANSCRIPT_FILE)
        _loop(policy, cfg, prompts, tools, toolbox, ws, harness, transcript, result)
    except (TransportError, PolicyTimeout) as e:
        result.status, result.error = "failed", f"{type(e).__name__}: {e}"
        log.error("rollout %d stopped: %s", index, result.error)
    except (OSError, duckdb.IOException) as e:
        result.status, result.error = "failed", f"{type(e).__name__}: {e}"
        log.error("rollout %d aborted on I/O error: %s", index, result.error)
    finally:
        if ws is not None:
            best = ws.best_trial()
            result.best_trial_id = best.trial_id if best else None
            result.best_score = best.primary_score if best else None
            result.trials = [{"trial_id": t.trial_id, "trial_name": t.trial_name, "model_choice": t.model_choice,
                              "primary_score": t.primary_score, "failure_kind": t.failure_kind,
                              "feature_block_names": t.feature_block_names} for t in ws.trials()]
            ws.close()
        if transcript is not None:
            transcript.close()
        if ctx is not None:
            ctx.close()
        result.save(out / ROLLOUT_FILE)
    return result


def _loop(policy: Policy, cfg: RolloutConfig, prompts: PromptSet, tools: list, toolbox: ToolBox, ws: Workspace,
          harness: Harness, transcript: _Transcript, result: RolloutResult) -> None:
    messages: list[dict[str, Any]] = [{"role": "system", "content": prompts.system},
                                      {"role": "user", "content": prompts.execute}]
    transcript.write("system", prompts.system)
    transcript.write("user", prompts.execute)
    n_calls = n_validations = 0
    turns = 1 if cfg.no_feedback else cfg.max_turns
    for turn in range(1, turns + 1):
        toolbox.turn = turn
        if turn > 1:
            prompt = prompts.wrapup if turn == turns else prompts.followup
            messages.append({"role": "user", "content": prompt})
            transcript.write("user", prompt)
        msg: PolicyMessage = policy.next_message(messages, tools)
        messages.append(msg.to_chat())
        transcript.write("assistant", msg.text or "(no text)")
        names = []
        for call in msg.tool_calls:
            action = parse_tool_call(call.name, call.arguments, tools)
            if isinstance(action, ValidateProgram) and cfg.max_validations is not None \
                    and n_validations >= cfg.max_validations:
                action = InvalidCall(VALIDATE_PROGRAM, f"validation budget of {cfg.max_validations} trials used up")
            obs: Observation = toolbox.dispatch(action)
            if isinstance(action, ValidateProgram):
                n_validations += 1
            n_calls += 1
            names.append(tool_name(action) + (" (error)" if obs.error else ""))
            transcript.write(f"tool {call.name} [{call.id}]", f"arguments: {call.arguments}\n\n{obs.payload}")
            messages.append({"role": "tool", "tool_call_id": call.id, "content": obs.payload})
        if cfg.no_feedback:
            names.append(_final_validation(msg, toolbox, transcript))
            n_validations = ws.n_trials()
        elif msg.text and not msg.tool_calls:
            toolbox.dispatch(FinalText(msg.text))
            names.append("final_text")
        best = ws.best_trial()
        result.turns.append(TurnLog(turn, names, best.primary_score if best else None, n_calls, n_validations))
        if cfg.max_validations is not None and n_validations >= cfg.max_validations:
            result.stop_reason = "validation budget reached"
            return
        if isinstance(policy, ScriptedPolicy) and policy.exhausted:
            result.stop_reason = "script finished"
            return
    result.stop_reason = "turn budget reached"


def _final_validation(msg: PolicyMessage, toolbox: ToolBox, transcript: _Transcript) -> str:
    """Run the single validation of a no-feedback rollout on the policy's behalf."""
    try:
        action = parse_final_answer(msg.text)
    except ValueError as e:
        transcript.write("harness", f"final answer rejected: {e}")
        # still record the attempt so the trial count reflects the rollout
        action = ValidateProgram("[]", "gbdt", "{}", "final_answer")
    obs = toolbox.dispatch(action)
    transcript.write("harness", obs.payload)
    return "validate_program (final answer)" + (" (error)" if obs.error else "")
