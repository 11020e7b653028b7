"""
Walk infrastructure/statemachines/pipeline.asl.json locally.

Supports the subset of the States Language the pipeline uses: Task (Resource = stage name),
Succeed and Fail, with a Catch on States.ALL. A Task whose handler returns a non-200 status
is treated as a failed state.

    python backend/scripts/run_pipeline.py --out runs/smoke --config infrastructure/smoke.yaml
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

ROOT = Path(__file__).resolve().parents[2]
sys.path[:0] = [str(ROOT / "backend" / "shared" / "python"), str(ROOT / "backend")]

from functions.router import _handlers  # noqa: E402

logger = logging.getLogger("run_pipeline")

DEFAULT_DEFINITION = ROOT / "infrastructure" / "statemachines" / "pipeline.asl.json"
MAX_TRANSITIONS = 64


class StageFailed(Exception):
    def __init__(self, state: str, status: int, body: Dict[str, Any]):
        super().__init__(f"{state} returned {status}: {body.get('error', body)}")
        self.state, self.status, self.body = state, status, body


def _set_path(data: Dict[str, Any], path: Optional[str], value: Any) -> Dict[str, Any]:
    if not path or path == "$":
        return value if isinstance(value, dict) else data
    node = data
    keys = path[2:].split(".")
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value
    return data


def run_state_machine(
    definition: Dict[str, Any],
    event: Dict[str, Any],
    handlers: Optional[Dict[str, Callable]] = None,
) -> Dict[str, Any]:
    """
    Execute the state machine. Returns {"status": "SUCCEEDED" | "FAILED", "state": ..., "trace": [...], "data": ...}.
    """
    handlers = handlers or _handlers()
    states = definition["States"]
    name = definition["StartAt"]
    data: Dict[str, Any] = {}
    trace: List[Dict[str, Any]] = []

    for _ in range(MAX_TRANSITIONS):
        state = states[name]
        kind = state["Type"]
        if kind == "Succeed":
            return {"status": "SUCCEEDED", "state": name, "trace": trace, "data": data}
        if kind == "Fail":
            return {"status": "FAILED", "state": name, "trace": trace, "data": data, "error": state.get("Error")}
        if kind != "Task":
            raise ValueError(f"Unsupported state type '{kind}' in '{name}'")

        resource = state["Resource"]
        if resource not in handlers:
            raise ValueError(f"State '{name}' names unknown stage '{resource}'")
        logger.info(f"🚀 {name} ({resource})")
        start = time.perf_counter()
        try:
            result = handlers[resource](dict(event), None)
            body = json.loads(result["body"])
            if result["statusCode"] != 200:
                raise StageFailed(name, result["statusCode"], body)
        except Exception as e:
            trace.append({"state": name, "ok": False, "seconds": time.perf_counter() - start, "error": str(e)})
            catcher = next((c for c in state.get("Catch", []) if "States.ALL" in c["ErrorEquals"]), None)
            if catcher is None:
                raise
            logger.error(f"{name} failed: {e}")
            data = _set_path(data, catcher.get("ResultPath"), {"error": str(e)})
            name = catcher["Next"]
            continue
        trace.append({"state": name, "ok": True, "seconds": time.perf_counter() - start})
        data = _set_path(data, state.get("ResultPath"), body)
        if state.get("End"):
            return {"status": "SUCCEEDED", "state": name, "trace": trace, "data": data}
        name = state["Next"]
    raise RuntimeError(f"State machine did not terminate within {MAX_TRANSITIONS} transitions")


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Run the latent bridge pipeline end to end")
    parser.add_argument("--out", required=True, help="run directory")
    parser.add_argument("--config", default=None, help="YAML/TOML config")
    parser.add_argument("--definition", default=str(DEFAULT_DEFINITION))
    args = parser.parse_args(argv)

    definition = json.loads(Path(args.definition).read_text())
    event: Dict[str, Any] = {"out": args.out}
    if args.config:
        event["config"] = args.config
    outcome = run_state_machine(definition, event)
    for step in outcome["trace"]:
        print(f"{'✅' if step['ok'] else '❌'} {step['state']:<24} {step['seconds']:8.1f}s")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "pipeline_result.json").write_text(json.dumps(outcome, indent=2, sort_keys=True, default=str))
    return 0 if outcome["status"] == "SUCCEEDED" else 1


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    sys.exit(main())
