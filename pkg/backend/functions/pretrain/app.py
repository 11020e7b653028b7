import logging
from typing import Any, Dict

from latent_bridge.rundir import PRETRAIN_CKPT, RunDir, event_config, run_stage
from latent_bridge.training import pretrain_toy_backbone

# --- CONFIGURATION ---
logger = logging.getLogger()
logger.setLevel(logging.INFO)


def _pretrain(event: Dict[str, Any]) -> Dict[str, Any]:
    # 1. PARSE INPUT
    config = event_config(event).with_overrides({"phase": "pretrain-backbone"})
    steps = event.get("steps")
    if steps is not None:
        config = config.with_overrides({"pretrain_steps": int(steps)})
    run = RunDir.from_event(event)

    # 2. TRAIN (encoder + base MLLM + diffusion backbone), then freeze
    train, _ = run.datasets()
    _, result = pretrain_toy_backbone(config, train, log_dir=run.logs)

    # 3. PERSIST
    path = run.save(result.checkpoint, PRETRAIN_CKPT)
    run.snapshot(config)
    history = result.history
    return {
        "steps": config.pretrain_steps,
        "initial_loss": history[0] if history else None,
        "final_loss": history[-1] if history else None,
        "final_flow_loss": result.extras["flow"][-1] if history else None,
        "checkpoint": str(path),
        "frozen_checksum": result.checkpoint.frozen_checksum(),
    }


def handler(event: Dict[str, Any], context: Any) -> Dict[str, Any]:
    return run_stage("pretrain", event, _pretrain)
