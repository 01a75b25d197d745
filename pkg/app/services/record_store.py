# app/services/record_store.py
import json
import logging
import os
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)

RECORD_SUFFIX = ".json"


class RunRecordStore:
    """RunRecords as one JSON file each under a directory; the file stem is the record id."""

    def __init__(self, root: str):
        """
        Args:
            root: records directory (created on demand)
        """
        self.root = root
        os.makedirs(root, exist_ok=True)
        logger.info(f"✓ RunRecordStore at {os.path.abspath(root)}")

    def path_for(self, record_id: str) -> str:
        if not record_id or os.sep in record_id or record_id.startswith("."):
            raise ValueError(f"invalid record id {record_id!r}")
        return os.path.join(self.root, record_id + RECORD_SUFFIX)

    def exists(self, record_id: str) -> bool:
        return os.path.exists(self.path_for(record_id))

    def ids(self) -> List[str]:
        return sorted(
            name[: -len(RECORD_SUFFIX)]
            for name in os.listdir(self.root)
            if name.endswith(RECORD_SUFFIX) and not name.startswith(".")
        )

    def save(self, record_id: str, record: Dict) -> str:
        """
        Write a record atomically (temp file + rename).

        Returns:
            Path of the written file
        """
        path = self.path_for(record_id)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(record, f, indent=2, sort_keys=True)
        os.replace(tmp, path)
        logger.debug(f"Saved record {record_id}")
        return path

    def get_by_id(self, record_id: str) -> Optional[Dict]:
        try:
            path = self.path_for(record_id)
        except ValueError:
            return None
        if not os.path.exists(path):
            return None
        try:
            with open(path, encoding="utf-8") as f:
                record = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Error reading record {record_id}: {e}")
            raise
        record["id"] = record_id
        return record

    def get_all(self, task: Optional[str] = None, method: Optional[str] = None,
                n_shot: Optional[int] = None) -> List[Dict]:
        """
        All records, optionally filtered.

        Args:
            task: e.g. "M->U"
            method: LB | FT | FADA | UDA-bin
            n_shot: labelled target samples per class
        """
        out = []
        for record_id in self.ids():
            record = self.get_by_id(record_id)
            spec = record.get("spec", {})
            if task and spec.get("task") != task:
                continue
            if method and spec.get("method") != method:
                continue
            if n_shot is not None and spec.get("n_shot") != n_shot:
                continue
            out.append(record)
        logger.debug(f"Retrieved {len(out)} records from {self.root}")
        return out

    def get_paginated(self, page: int = 1, page_size: int = 50, **filters) -> Dict:
        if page < 1 or page_size < 1:
            raise ValueError("page and page_size must be >= 1")
        records = self.get_all(**filters)
        total = len(records)
        start = (page - 1) * page_size
        return {
            "records": records[start:start + page_size],
            "page": page,
            "page_size": page_size,
            "total": total,
            "total_pages": (total + page_size - 1) // page_size,
        }
