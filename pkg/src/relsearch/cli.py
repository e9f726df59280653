"""Command line entry points: search, deploy, bench, report.

Exit codes: 0 success, 1 operator error, 2 the search found no champion.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

from .agent import LlmPolicy, RolloutConfig, RolloutResult, ScriptedPolicy, load_profiles, run_rollout
from .errors import DeploymentError, NoSuccessfulTrial, RelSearchError
from .learner import MODEL_CHOICES
from .relstore import TaskManifest, open_context
from .selection import CHAMPION_FILE, MODEL_FILE, TEST_REPORT_FILE, Champion, cross_rollout_select, deploy_champion
from .synthbench import (
    CooccurrenceSpec,
    TriangleSpec,
    default_validation_budget,
    gen_cooccurrence_task,
    gen_triangle_task,
)

log = logging.getLogger("relsearch")

EXIT_OK, EXIT_ERROR, EXIT_NO_CHAMPION = 0, 1, 2
SUMMARY_FILE = "run_summary.json"
PROFILES_ENV = "RELSEARCH_PROFILES"
DEFAULT_PROFILES = Path("~/.config/relsearch/profiles.json")


class UsageError(Exception):
    """Operator mistake; reported on stderr with exit code 1."""


# --- helpers -----------------------------------------------------------------

def _fresh_dir(path: Path, overwrite: bool) -> None:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not overwrite:
            raise UsageError(f"{path} already exists and is not empty; pass --overwrite to replace it")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)


def _load_manifest(path: str) -> TaskManifest:
    try:
        return TaskManifest.load(path)
    except FileNotFoundError:
        raise UsageError(f"manifest not found: {path}") from None


def _parse_models(text: str | None) -> tuple[str, ...] | None:
    if not text:
        return None
    models = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in models if m not in MODEL_CHOICES]
    if bad or not models:
        raise UsageError(f"unknown model choices {bad}; choose from {', '.join(MODEL_CHOICES)}")
    return models


def _profiles_path(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    if os.environ.get(PROFILES_ENV):
        return Path(os.environ[PROFILES_ENV])
    return DEFAULT_PROFILES.expanduser()


def policy_factory(selector: str, *, profiles: str | None = None,
                   turn_timeout: float = 900.0) -> tuple[Callable[[], Any], bool]:
    """Build a zero-argument policy constructor from ``scripted:<path>`` or ``llm:<profile>``.

    Returns the constructor and whether the policy is scripted.
    """
    kind, _, target = selector.partition(":")
    if not target:
        raise UsageError(f"policy must look like scripted:<path> or llm:<profile>, got {selector!r}")
    if kind == "scripted":
        try:
            script = json.loads(Path(target).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read policy script {target}: {e}") from None
        ScriptedPolicy(script)  # shape check before any rollout starts
        return (lambda: ScriptedPolicy(copy.deepcopy(script))), True
    if kind == "llm":
        path = _profiles_path(profiles)
        try:
            table = load_profiles(path)
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise UsageError(f"cannot read LLM profiles from {path}: {e}") from None
        if target not in table:
            raise UsageError(f"profile {target!r} not in {path}; known: {', '.join(sorted(table)) or 'none'}")
        profile = table[target]
        return (lambda: LlmPolicy(profile, timeout_s=turn_timeout)), False
    raise UsageError(f"unknown policy kind {kind!r}; use scripted:<path> or llm:<profile>")


# --- search ------------------------------------------------------------------

def cmd_search(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.manifest)
    if args.rollouts < 1:
        raise UsageError("--rollouts must be at least 1")
    make_policy, scripted = policy_factory(args.policy, profiles=args.profiles, turn_timeout=args.turn_timeout)
    logical = scripted if args.clock == "auto" else args.clock == "logical"
    budget = args.max_validations if args.max_validations is not None else default_validation_budget(manifest)
    try:
        base = RolloutConfig(max_turns=args.max_turns, max_validations=budget,
                             per_turn_timeout_s=args.turn_timeout, no_feedback=args.no_feedback,
                             no_workspace=args.no_workspace, anonymize_schema=args.anonymize_schema,
                             allowed_models=_parse_models(args.models), seed=args.seed, n_jobs=args.threads,
                             logical_clock=logical)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    _fresh_dir(out, args.overwrite)

    def one(k: int) -> RolloutResult:
        cfg = dataclasses.replace(base, seed=base.seed + k)
        log.info("rollout %d starting", k)
        return run_rollout(manifest, make_policy(), cfg, out / f"rollout_{k}", index=k)

    with ThreadPoolExecutor(max_workers=args.rollouts) as pool:
        results = list(pool.map(one, range(args.rollouts)))

    summary: dict[str, Any] = {
        "manifest": str(Path(args.manifest).resolve()),
        "policy": args.policy,
        "seed": args.seed,
        "rollouts": [_rollout_summary(r) for r in results],
        "champion": None,
    }
    code = EXIT_OK
    try:
        champion = cross_rollout_select(results)
    except NoSuccessfulTrial as e:
        summary["error"] = str(e)
        code = EXIT_NO_CHAMPION
        print(f"no champion: {e}", file=sys.stderr)
    else:
        champion.save(out / CHAMPION_FILE)
        summary["champion"] = {"rollout": champion.rollout, "trial_id": champion.trial_id,
                               "program_hash": champion.program_hash, "model_choice": champion.model_choice,
                               "primary_metric": champion.primary_metric, "val_score": champion.val_score}
    summary["exit_code"] = code
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(render_summary(summary))
    return code


def _rollout_summary(r: RolloutResult) -> dict[str, Any]:
    ok = sum(1 for t in r.trials if t["primary_score"] is not None)
    return {"index": r.index, "dir": f"rollout_{r.index}", "status": r.status, "stop_reason": r.stop_reason,
            "error": r.error, "n_trials": len(r.trials), "n_ok": ok, "n_turns": len(r.turns),
            "best_trial_id": r.best_trial_id, "best_score": r.best_score}


def render_summary(summary: dict[str, Any]) -> str:
    lines = [f"run: {summary.get('policy', '?')} on {summary.get('manifest', '?')}"]
    for r in summary.get("rollouts", []):
        best = "none" if r["best_score"] is None else f"{r['best_trial_id']} score={r['best_score']:.6f}"
        extra = f"  error: {r['error']}" if r.get("error") else ""
        lines.append(f"  rollout_{r['index']}: {r['status']} ({r['stop_reason'] or '-'}), "
                     f"{r['n_trials']} trials ({r['n_ok']} ok), best {best}{extra}")
    c = summary.get("champion")
    if c:
        lines.append(f"champion: rollout_{c['rollout']}/{c['trial_id']} {c['model_choice']} "
                     f"{c['primary_metric']}-oriented val score {c['val_score']:.6f} program {c['program_hash'][:12]}")
    else:
        lines.append("champion: none")
    t = summary.get("test")
    if t:
        lines.append("test: " + ", ".join(f"{k}={v:.6f}" for k, v in t["metrics"].items()
                                          if isinstance(v, (int, float))))
    return "\n".join(lines)


# --- deploy ------------------------------------------------------------------

def cmd_deploy(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.manifest)
    try:
        champion = Champion.load(args.champion)
    except FileNotFoundError:
        raise UsageError(f"champion file not found: {args.champion}") from None
    except (KeyError, ValueError) as e:
        raise UsageError(f"invalid champion file {args.champion}: {e}") from None
    out = Path(args.out) if args.out else Path(args.champion).parent
    out.mkdir(parents=True, exist_ok=True)
    targets = [out / TEST_REPORT_FILE, out / MODEL_FILE]
    if any(p.exists() for p in targets) and not args.overwrite:
        raise UsageError(f"{out} already holds deployment output; pass --overwrite to replace it")
    ctx = open_context(manifest)
    try:
        report, model = deploy_champion(ctx, champion, n_jobs=args.threads, timeout=args.timeout)
    except DeploymentError as e:
        print(f"deployment failed: {e}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        ctx.close()
    report.save(out / TEST_REPORT_FILE)
    model.save(out / MODEL_FILE)
    print(report.render())
    return EXIT_OK


# --- bench -------------------------------------------------------------------

def cmd_bench(args: argparse.Namespace) -> int:
    out = Path(args.out)
    try:
        if args.kind == "triangle":
            spec = TriangleSpec(n=args.n, p=args.p, p_sl=args.p_sl, n_train_graphs=args.train_graphs,
                                n_val_graphs=args.val_graphs, n_test_graphs=args.test_graphs, seed=args.seed)
        else:
            spec = CooccurrenceSpec(n_entities=args.n_entities, rows_per_entity=args.rows_per_entity, seed=args.seed)
    except ValueError as e:
        raise UsageError(f"invalid {args.kind} spec: {e}") from None
    _fresh_dir(out, args.overwrite)
    if args.kind == "triangle":
        gen_triangle_task(spec, out)
    else:
        gen_cooccurrence_task(spec, out)
    fixtures = sorted(p.stem for p in (out / "fixtures").glob("*.json"))
    print(f"wrote {args.kind} task to {out}")
    print(f"  manifest: {out / 'manifest.json'}")
    print(f"  fixture programs: {', '.join(fixtures)}")
    return EXIT_OK


# --- report ------------------------------------------------------------------

def cmd_report(args: argparse.Namespace) -> int:
    run = Path(args.run_dir)
    path = run / SUMMARY_FILE
    if not path.exists():
        raise UsageError(f"no {SUMMARY_FILE} in {run}")
    summary = json.loads(path.read_text())
    test = run / TEST_REPORT_FILE
    if test.exists():
        doc = json.loads(test.read_text())
        summary["test"] = {"trial_id": doc["trial_id"], "metrics": doc["metrics"],
                           "audit_clean": doc["audit"]["clean"], "importance": doc["importance"]}
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        print(render_summary(summary))
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relsearch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run K search rollouts and select a champion")
    s.add_argument("manifest", help="task manifest JSON")
    s.add_argument("--policy", required=True, help="scripted:<script.json> or llm:<profile name>")
    s.add_argument("--profiles", help=f"LLM profiles JSON (default ${PROFILES_ENV} or {DEFAULT_PROFILES})")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("-K", "--rollouts", type=int, default=5)
    s.add_argument("--max-turns", type=int, default=60)
    s.add_argument("--max-validations", type=int, default=None,
                   help="trial budget per rollout (default: 30 on triangle tasks, otherwise unlimited)")
    s.add_argument("--turn-timeout", type=float, default=900.0, help="seconds per policy response")
    s.add_argument("--no-feedback", action="store_true", help="single turn, no validation tool")
    s.add_argument("--no-workspace", action="store_true", help="hide the evaluation workspace")
    s.add_argument("--anonymize-schema", action="store_true", help="rename tables and columns to opaque names")
    s.add_argument("--models", help="comma separated subset of " + ",".join(MODEL_CHOICES))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=1, help="learner threads per rollout")
    s.add_argument("--clock", choices=("auto", "logical", "wall"), default="auto",
                   help="trial timestamps; auto uses a logical clock for scripted policies")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_search)

    d = sub.add_parser("deploy", help="refit a champion on train+val and score the test split")
    d.add_argument("manifest")
    d.add_argument("champion", help="champion.json written by search")
    d.add_argument("--out", help="output directory (default: the champion's directory)")
    d.add_argument("--threads", type=int, default=1)
    d.add_argument("--timeout", type=float, default=None, help="seconds per feature query")
    d.add_argument("--overwrite", action="store_true")
    d.set_defaults(func=cmd_deploy)

    b = sub.add_parser("bench", help="generate a synthetic benchmark task")
    bsub = b.add_subparsers(dest="kind", required=True)
    t = bsub.add_parser("triangle", help="directed 3-cycle membership on random graphs")
    t.add_argument("--out", required=True)
    t.add_argument("--n", type=int, default=300, help="nodes per graph")
    t.add_argument("--p", type=float, default=0.02, help="edge probability")
    t.add_argument("--p-sl", type=float, default=0.0, help="self-loop probability")
    t.add_argument("--train-graphs", type=int, default=5)
    t.add_argument("--val-graphs", type=int, default=2)
    t.add_argument("--test-graphs", type=int, default=2)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--overwrite", action="store_true")
    c = bsub.add_parser("cooccurrence", help="label depends on two attributes co-occurring in one child row")
    c.add_argument("--out", required=True)
    c.add_argument("--n-entities", type=int, default=200, help="entities per split (even)")
    c.add_argument("--rows-per-entity", type=int, default=2)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--overwrite", action="store_true")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="render a run summary")
    r.add_argument("run_dir")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
    except (RelSearchError, OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
