import json
import logging
from typing import Any, Dict, List, Sequence

from latent_bridge.harness import (
    VARIANTS,
    Budget,
    compare_variants,
    sweep_decoding_steps,
    sweep_token_count,
    trend_summary,
)
from latent_bridge.reports import read_report, update_report
from latent_bridge.rundir import RunDir, event_config, run_stage

# --- CONFIGURATION ---
logger = logging.getLogger()
logger.setLevel(logging.INFO)

SWEEP_KINDS = ("variants", "token-count", "decode-steps")
DEFAULT_STEPS = (1, 8, 64)
DEFAULT_COUNTS = (4, 16, 64)
DEFAULT_SEEDS = (0,)


def _int_list(value: Any, default: Sequence[int], name: str) -> List[int]:
    if value is None:
        return list(default)
    items = value.split(",") if isinstance(value, str) else list(value)
    try:
        out = [int(v) for v in items if str(v).strip()]
    except ValueError:
        raise ValueError(f"'{name}' must be a comma-separated list of integers, got {value!r}")
    if not out:
        raise ValueError(f"'{name}' must not be empty")
    return out


def _sweep(event: Dict[str, Any]) -> Dict[str, Any]:
    # 1. PARSE INPUT
    kind = event.get("kind")
    if kind not in SWEEP_KINDS:
        raise ValueError(f"Unknown sweep kind {kind!r}. Known: {', '.join(SWEEP_KINDS)}")
    config = event_config(event)
    seeds = _int_list(event.get("seeds"), DEFAULT_SEEDS, "seeds")
    budget = Budget.from_config(config)
    run = RunDir.from_event(event)

    # 2. LOAD DATA + FROZEN STACK
    context = run.bench_context(config)

    # 3. RUN
    if kind == "variants":
        variants = event.get("variants") or VARIANTS
        if isinstance(variants, str):
            variants = [v.strip() for v in variants.split(",") if v.strip()]
        rows = compare_variants(variants, budget, seeds, context)
    elif kind == "token-count":
        rows = sweep_token_count(_int_list(event.get("counts"), DEFAULT_COUNTS, "counts"), budget, seeds, context)
    else:
        rows = sweep_decoding_steps(_int_list(event.get("steps"), DEFAULT_STEPS, "steps"), budget, seeds, context)

    # 4. REPORT (single-writer merge keyed by config hash) + trends over every sweep so far
    name = f"sweep_{kind.replace('-', '_')}"
    path = update_report(rows, run.reports, name)
    every = []
    for other in SWEEP_KINDS:
        report = run.reports / f"sweep_{other.replace('-', '_')}.csv"
        if report.exists():
            every.extend(read_report(report))
    trends = trend_summary(every)
    (run.reports / "trends.json").write_text(json.dumps(trends, indent=2, sort_keys=True))
    return {"kind": kind, "rows": len(rows), "report": str(path), "trends": trends}


def handler(event: Dict[str, Any], context: Any) -> Dict[str, Any]:
    return run_stage("sweep", event, _sweep)
