import logging
from typing import Any, Dict

import numpy as np
import torch

from latent_bridge.config import config_hash
from latent_bridge.flow import latents_to_images
from latent_bridge.harness import reconstruct_images
from latent_bridge.metrics import compute_metrics
from latent_bridge.reports import ReportRow, update_report
from latent_bridge.rundir import RunDir, event_config, run_stage
from latent_bridge.sampling import sample_unconditional

# --- CONFIGURATION ---
logger = logging.getLogger()
logger.setLevel(logging.INFO)


def _evaluate(event: Dict[str, Any]) -> Dict[str, Any]:
    # 1. PARSE INPUT
    config = event_config(event)
    seed = int(event.get("seed", config.sampler.seed))
    run = RunDir.from_event(event)

    # 2. LOAD GENERATED IMAGES + REFERENCES
    images_path = run.generated / "images.npy"
    if not images_path.exists():
        raise FileNotFoundError(f"No generated images at {images_path} (run generate first)")
    generated = torch.from_numpy(np.load(images_path))
    _, val = run.datasets()
    reference = val.subset(range(generated.shape[0]))
    bridge = run.bridge(config)
    encoder = bridge.stack.encoder

    # 3. METRICS: generation, ground-truth-grid reconstruction, unconditional baseline
    reports = {"generate": compute_metrics(generated, reference.images, encoder)}
    recon = reconstruct_images(bridge, reference.images, reference.tokens, seed=seed)
    reports["reconstruct"] = compute_metrics(recon.images, reference.images, encoder, wall_clock=recon.wall_clock)
    with torch.no_grad():
        latents = sample_unconditional(
            bridge.stack.backbone, reference.tokens, steps=config.sampler.inference_steps, seed=seed
        )
    baseline = latents_to_images(latents, config.dims.patch_size)
    reports["unconditional"] = compute_metrics(baseline, reference.images, encoder)

    # 4. REPORT
    chash = config_hash(config, exclude=("seed",))
    rows = [
        ReportRow.from_metrics(
            "eval", key, seed, bridge.variant, bridge.token_count, config.sampler.decode_steps, report, chash, "-"
        )
        for key, report in reports.items()
    ]
    path = update_report(rows, run.reports, "eval")
    gain = reports["reconstruct"].psnr - reports["unconditional"].psnr
    logger.info(f"Reconstruction beats unconditional sampling by {gain:.2f} dB PSNR")
    return {
        "metrics": {key: report.to_dict() for key, report in reports.items()},
        "reconstruction_psnr_gain": gain,
        "all_finite": all(r.is_finite() for r in reports.values()),
        "report": str(path),
    }


def handler(event: Dict[str, Any], context: Any) -> Dict[str, Any]:
    return run_stage("eval", event, _evaluate)
