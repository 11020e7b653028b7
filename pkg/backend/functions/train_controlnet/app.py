import logging
from typing import Any, Dict

from latent_bridge.harness import check_token_count
from latent_bridge.rundir import CONTROLNET_CKPT, RunDir, event_config, run_stage
from latent_bridge.training import train_latent_controlnet

# --- CONFIGURATION ---
logger = logging.getLogger()
logger.setLevel(logging.INFO)


def _train_controlnet(event: Dict[str, Any]) -> Dict[str, Any]:
    # 1. PARSE INPUT
    config = event_config(event).with_overrides({"phase": "train-controlnet"})
    if event.get("steps") is not None:
        config = config.with_overrides({"controlnet_steps": int(event["steps"])})
    if event.get("token_count") is not None:
        config = config.with_overrides({"token_count": int(event["token_count"])})
    check_token_count(config.bridge_tokens, config.dims.grid_side)
    run = RunDir.from_event(event)

    # 2. LOAD FROZEN BACKBONE + ENCODER (independent of the generation branch)
    train, _ = run.datasets()
    stack = run.stack(config)
    resume = run.checkpoint(CONTROLNET_CKPT) if event.get("resume") else None

    # 3. TRAIN ControlNet on ground-truth encoder grids
    result = train_latent_controlnet(config, train, stack, resume=resume, log_dir=run.logs)

    # 4. PERSIST
    path = run.save(result.checkpoint, CONTROLNET_CKPT)
    run.snapshot(config)
    return {
        "steps": result.checkpoint.step,
        "token_count": config.bridge_tokens,
        "initial_loss": result.history[0] if result.history else None,
        "final_loss": result.history[-1] if result.history else None,
        "checkpoint": str(path),
    }


def handler(event: Dict[str, Any], context: Any) -> Dict[str, Any]:
    return run_stage("train-controlnet", event, _train_controlnet)
