# app/services/metrics_log.py
import json
import logging
import os
from datetime import datetime, timezone
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)

VALID_STAGES = ["pretrain", "dcd", "adversarial", "finetune", "uda"]


class MetricsLog:
    """Append-only JSON-lines stream of per-epoch stage metrics."""

    def __init__(self, path: str):
        """
        Args:
            path: target ``.jsonl`` file; parent directories are created
        """
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        logger.debug(f"MetricsLog writing to {path}")

    def reset(self) -> None:
        """Truncate the stream so a replayed run does not repeat its epochs."""
        with open(self.path, "w", encoding="utf-8"):
            pass

    def emit(self, stage: str, record: Dict) -> Dict:
        """
        Append one epoch record.

        Args:
            stage: one of VALID_STAGES
            record: epoch number plus loss/accuracy values

        Returns:
            The line written, as a dict
        """
        if stage not in VALID_STAGES:
            raise ValueError(f"stage must be one of: {VALID_STAGES}")
        line = {"stage": stage, "ts": datetime.now(timezone.utc).isoformat(), **record}
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(line, sort_keys=True) + "\n")
        return line

    def read(self, stage: Optional[str] = None, limit: Optional[int] = None) -> List[Dict]:
        return read_metrics(self.path, stage=stage, limit=limit)

    def stats(self) -> Dict:
        """Epoch counts per stage."""
        by_stage: Dict[str, int] = {}
        for line in self.read():
            by_stage[line["stage"]] = by_stage.get(line["stage"], 0) + 1
        return {"path": self.path, "total_epochs": sum(by_stage.values()), "by_stage": by_stage}


def read_metrics(path: str, stage: Optional[str] = None, limit: Optional[int] = None) -> List[Dict]:
    if not os.path.exists(path):
        return []
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                line = json.loads(raw)
            except json.JSONDecodeError as e:
                logger.warning(f"Skipping malformed metrics line {lineno} in {path}: {e}")
                continue
            if stage and line.get("stage") != stage:
                continue
            out.append(line)
    return out[-limit:] if limit else out
