import logging
from typing import Any, Dict

from latent_bridge.data import generate_splits, save_dataset, verify_caption
from latent_bridge.rundir import RunDir, event_config, run_stage
from latent_bridge.utils import tensor_checksum

# --- CONFIGURATION ---
logger = logging.getLogger()
logger.setLevel(logging.INFO)


def _gen_data(event: Dict[str, Any]) -> Dict[str, Any]:
    # 1. PARSE INPUT
    config = event_config(event)
    seed = int(event.get("seed", config.seed))
    n = int(event.get("n", config.dataset_size))
    n_val = int(event.get("n_val", config.val_size))
    if n <= 0 or n_val <= 0:
        raise ValueError(f"Dataset sizes must be positive (n={n}, n_val={n_val})")
    config = config.with_overrides({"seed": seed, "dataset_size": n, "val_size": n_val})
    run = RunDir.from_event(event)

    # 2. RENDER SPLITS
    train, val = generate_splits(seed, n, n_val, config.dims.image_size, config.dims.max_text_len)

    # 3. SPOT-CHECK CAPTIONS
    checked = min(len(train), 100)
    faithful = sum(verify_caption(train.images[i], train.captions[i]) for i in range(checked))
    if faithful != checked:
        logger.warning(f"Only {faithful}/{checked} captions matched their rendering")

    # 4. WRITE
    save_dataset(train, run.data, "train")
    save_dataset(val, run.data, "val")
    run.snapshot(config)
    return {
        "seed": seed,
        "train": len(train),
        "val": len(val),
        "captions_verified": f"{faithful}/{checked}",
        "checksum": tensor_checksum([("train", train.images), ("val", val.images)]),
        "out": str(run.root),
    }


def handler(event: Dict[str, Any], context: Any) -> Dict[str, Any]:
    return run_stage("gen-data", event, _gen_data)
