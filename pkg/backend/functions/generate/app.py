import logging
from typing import Any, Dict

import numpy as np

from latent_bridge.gridio import write_grids, write_ppm
from latent_bridge.harness import generate_images
from latent_bridge.rundir import RunDir, event_config, run_stage
from latent_bridge.utils import tensor_checksum

# --- CONFIGURATION ---
logger = logging.getLogger()
logger.setLevel(logging.INFO)


def _generate(event: Dict[str, Any]) -> Dict[str, Any]:
    # 1. PARSE INPUT
    config = event_config(event)
    sampler = config.sampler
    decode_steps = int(event.get("decode_steps", sampler.decode_steps))
    inference_steps = int(event.get("inference_steps", sampler.inference_steps))
    scale = float(event.get("scale", sampler.conditioning_scale))
    seed = int(event.get("seed", sampler.seed))
    if scale < 0:
        raise ValueError(f"Conditioning scale must be >= 0, got {scale}")
    run = RunDir.from_event(event)

    # 2. LOAD BRIDGE (trained branch + ControlNet) and the validation captions
    _, val = run.datasets()
    n = int(event.get("n", len(val)))
    if not 1 <= n <= len(val):
        raise ValueError(f"n must lie in [1, {len(val)}], got {n}")
    bridge = run.bridge(config)

    # 3. CAPTIONS -> GRIDS (masked autoregression) -> IMAGES (ControlNet-guided flow)
    generation = generate_images(
        bridge, val.tokens[:n], decode_steps=decode_steps, inference_steps=inference_steps, scale=scale, seed=seed
    )

    # 4. WRITE ARTIFACTS
    out = run.generated
    out.mkdir(parents=True, exist_ok=True)
    run.write_json("generated/schedule.json", generation.schedule)
    run.write_json("generated/captions.json", val.captions[:n])
    write_grids(out / "grids.lbg", generation.grids)
    np.save(out / "images.npy", generation.images.numpy())
    for i, image in enumerate(generation.images):
        write_ppm(out / "images" / f"{i:04d}.ppm", image)
    logger.info(f"Generated {n} images in {sum(generation.wall_clock.values()):.2f}s")
    return {
        "n": n,
        "decode_steps": decode_steps,
        "inference_steps": inference_steps,
        "scale": scale,
        "wall_clock": generation.wall_clock,
        "checksum": tensor_checksum([("images", generation.images)]),
        "out": str(out),
    }


def handler(event: Dict[str, Any], context: Any) -> Dict[str, Any]:
    return run_stage("generate", event, _generate)
