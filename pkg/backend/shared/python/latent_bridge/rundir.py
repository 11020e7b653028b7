# Run directory layout and artifact loaders shared by the stage handlers
# Every stage reads its inputs from, and writes its outputs to, one output directory:
#
#   <out>/config.yaml                     config snapshot of the last stage run
#   <out>/data/{train,val}_*              synthetic splits
#   <out>/checkpoints/<stage>.pt          pretrain / branch / controlnet
#   <out>/logs/<phase>_metrics.csv        per-step losses
#   <out>/generated/                      schedule.json, grids.lbg, images.npy, images/*.ppm
#   <out>/reports/                        csv / jsonl / long.csv reports, trends.json
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from .checkpoint import Checkpoint, load_checkpoint, restore_module, save_checkpoint
from .config import DEFAULT_CONFIG_PATH, DEFAULT_OUTPUT_DIR, TrainConfig, config_from_dict, dump_config, load_config
from .data import SyntheticDataset, load_dataset
from .errors import ConfigError
from .harness import BenchContext, BridgeModel
from .training import PretrainedStack, build_controlnet, stack_from_checkpoint
from .utils import sanitize_for_json

logger = logging.getLogger(__name__)

PRETRAIN_CKPT = "pretrain"
BRANCH_CKPT = "branch"
CONTROLNET_CKPT = "controlnet"


@dataclass
class RunDir:
    root: Path

    @classmethod
    def from_event(cls, event: Dict[str, Any]) -> "RunDir":
        return cls(Path(event.get("out") or DEFAULT_OUTPUT_DIR))

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def generated(self) -> Path:
        return self.root / "generated"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def checkpoint_path(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.pt"

    # --- READ ---

    def datasets(self) -> Tuple[SyntheticDataset, SyntheticDataset]:
        return load_dataset(self.data, "train"), load_dataset(self.data, "val")

    def checkpoint(self, name: str) -> Checkpoint:
        path = self.checkpoint_path(name)
        if not path.exists():
            raise FileNotFoundError(f"Missing '{name}' checkpoint at {path}")
        return load_checkpoint(path)

    def stack(self, config: TrainConfig, name: str = PRETRAIN_CKPT) -> PretrainedStack:
        """Frozen stack restored from a checkpoint (pretrain, or branch for a trained generation branch)."""
        return stack_from_checkpoint(self.checkpoint(name), config)

    def bridge(self, config: TrainConfig) -> BridgeModel:
        """Default bridge: trained generation branch plus trained latent ControlNet."""
        stack = self.stack(config, BRANCH_CKPT)
        cn_ckpt = self.checkpoint(CONTROLNET_CKPT)
        cn = restore_module(build_controlnet(stack), cn_ckpt, "controlnet")
        count = config_from_dict(cn_ckpt.config).bridge_tokens
        return BridgeModel("clip-latent", stack, stack.encoder, controlnet=cn, token_count=count)

    def bench_context(self, config: TrainConfig) -> BenchContext:
        train, val = self.datasets()
        return BenchContext(config, train, val, self.stack(config))

    # --- WRITE ---

    def save(self, ckpt: Checkpoint, name: str) -> Path:
        return save_checkpoint(ckpt, self.checkpoint_path(name))

    def snapshot(self, config: TrainConfig) -> Path:
        path = self.root / "config.yaml"
        dump_config(config, str(path))
        return path

    def write_json(self, relative: str, payload: Any) -> Path:
        path = self.root / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(sanitize_for_json(payload), indent=2, sort_keys=True))
        return path


def event_config(event: Dict[str, Any]) -> TrainConfig:
    """Config for a stage: file from the event (or LATENT_BRIDGE_CONFIG), then event overrides."""
    path: Optional[Union[str, Path]] = event.get("config")
    if path is None and Path(DEFAULT_CONFIG_PATH).exists():
        path = DEFAULT_CONFIG_PATH
    overrides = event.get("overrides") or {}
    if not isinstance(overrides, dict):
        raise ConfigError("Event field 'overrides' must be a mapping of dotted keys to values")
    return load_config(str(path) if path else None, overrides)


def response(status: int, body: Dict[str, Any]) -> Dict[str, Any]:
    return {"statusCode": status, "body": json.dumps(sanitize_for_json(body), sort_keys=True)}


def run_stage(name: str, event: Dict[str, Any], stage) -> Dict[str, Any]:
    """
    Run `stage(event)` and map failures onto status codes:
    ValueError (bad input, incl. library range/shape/config errors) -> 400,
    FileNotFoundError (missing upstream artifact) -> 404, anything else -> 500.
    """
    logger.info(f"{name.upper()} EVENT: {json.dumps(sanitize_for_json(event), sort_keys=True, default=str)}")
    try:
        body = stage(event)
    except ValueError as e:
        logger.warning(f"{name}: bad input: {e}")
        return response(400, {"error": str(e)})
    except FileNotFoundError as e:
        logger.warning(f"{name}: missing artifact: {e}")
        return response(404, {"error": str(e)})
    except Exception as e:
        logger.error(f"{name}: unhandled exception: {e}", exc_info=True)
        return response(500, {"error": str(e), "type": type(e).__name__})
    logger.info(f"✅ {name} complete")
    return response(200, body)
