import logging
from typing import Any, Dict

from latent_bridge.rundir import BRANCH_CKPT, RunDir, event_config, run_stage
from latent_bridge.training import branch_validation_loss, train_generation_branch

# --- CONFIGURATION ---
logger = logging.getLogger()
logger.setLevel(logging.INFO)


def _train_branch(event: Dict[str, Any]) -> Dict[str, Any]:
    # 1. PARSE INPUT
    config = event_config(event).with_overrides({"phase": "train-branch"})
    if event.get("steps") is not None:
        config = config.with_overrides({"branch_steps": int(event["steps"])})
    run = RunDir.from_event(event)

    # 2. LOAD FROZEN STACK (and the branch checkpoint when resuming)
    train, val = run.datasets()
    stack = run.stack(config)
    resume = run.checkpoint(BRANCH_CKPT) if event.get("resume") else None
    if resume is not None:
        logger.info(f"Resuming generation branch from step {resume.step}")
    val_before = branch_validation_loss(stack, val, seed=config.seed)

    # 3. TRAIN generation branch only
    result = train_generation_branch(config, train, stack, resume=resume, log_dir=run.logs)
    val_after = branch_validation_loss(stack, val, seed=config.seed)

    # 4. PERSIST
    path = run.save(result.checkpoint, BRANCH_CKPT)
    run.snapshot(config)
    return {
        "steps": result.checkpoint.step,
        "initial_loss": result.history[0] if result.history else None,
        "final_loss": result.history[-1] if result.history else None,
        "val_masked_mse_before": val_before,
        "val_masked_mse_after": val_after,
        "checkpoint": str(path),
    }


def handler(event: Dict[str, Any], context: Any) -> Dict[str, Any]:
    return run_stage("train-branch", event, _train_branch)
