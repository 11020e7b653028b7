"""
Sweep reports: a CSV with a fixed header, a JSON-lines mirror and a long-format CSV for plotting.
"""
import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

from .metrics import MetricReport

logger = logging.getLogger(__name__)

DISCLOSURE = (
    "# toy_frechet = Frechet distance over frozen toy-encoder features, stands in for FID; "
    "LPIPS, sFID and IS are not computed; raw-pixel-latent stands in for a VAE bridge"
)
METRIC_COLUMNS = ("masked_mse", "mse", "psnr", "ssim", "toy_frechet", "wall_clock_s")


@dataclass
class ReportRow:
    sweep: str
    key: str
    seed: int
    variant: str
    token_count: int
    decode_steps: int
    masked_mse: float
    mse: float
    psnr: float
    ssim: float
    toy_frechet: float
    wall_clock_s: float
    config_hash: str
    batch_hash: str

    @classmethod
    def from_metrics(
        cls,
        sweep: str,
        key: str,
        seed: int,
        variant: str,
        token_count: int,
        decode_steps: int,
        report: MetricReport,
        config_hash: str,
        batch_hash: str,
        wall_clock_s: Optional[float] = None,
    ) -> "ReportRow":
        if wall_clock_s is None:
            wall_clock_s = float(sum(report.wall_clock.values()))
        return cls(
            sweep, str(key), int(seed), variant, int(token_count), int(decode_steps),
            report.masked_mse, report.mse, report.psnr, report.ssim, report.toy_frechet,
            float(wall_clock_s), config_hash, batch_hash,
        )

    @property
    def merge_key(self):
        return (self.sweep, self.key, self.seed, self.config_hash)


HEADER = tuple(f.name for f in fields(ReportRow))


def merge_rows(existing: Iterable[ReportRow], new: Iterable[ReportRow]) -> List[ReportRow]:
    """New rows replace existing rows with the same (sweep, key, seed, config hash)."""
    merged: Dict[tuple, ReportRow] = {r.merge_key: r for r in existing}
    for row in new:
        merged[row.merge_key] = row
    return list(merged.values())


def write_report(rows: Sequence[ReportRow], directory: Union[str, Path], name: str) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    csv_path = d / f"{name}.csv"
    with open(csv_path, "w", newline="") as fh:
        fh.write(DISCLOSURE + "\n")
        writer = csv.DictWriter(fh, fieldnames=HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))
    with open(d / f"{name}.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(asdict(row), sort_keys=True) + "\n")
    with open(d / f"{name}.long.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sweep", "key", "seed", "metric", "value"])
        for row in rows:
            for metric in METRIC_COLUMNS:
                writer.writerow([row.sweep, row.key, row.seed, metric, getattr(row, metric)])
    logger.info(f"✅ Wrote report '{name}' ({len(rows)} rows) to {d}")
    return csv_path


def read_report(path: Union[str, Path]) -> List[ReportRow]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Report not found: {p}")
    lines = [line for line in p.read_text().splitlines() if not line.startswith("#")]
    rows = []
    types = {f.name: f.type for f in fields(ReportRow)}
    for record in csv.DictReader(lines):
        rows.append(ReportRow(**{k: _cast(types[k], v) for k, v in record.items()}))
    return rows


def _cast(kind, value: str):
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def update_report(rows: Sequence[ReportRow], directory: Union[str, Path], name: str) -> Path:
    """Merge rows into an existing report (if any) and rewrite it."""
    path = Path(directory) / f"{name}.csv"
    existing = read_report(path) if path.exists() else []
    return write_report(merge_rows(existing, rows), directory, name)
