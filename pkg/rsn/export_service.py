# rsn/export_service.py
"""
Export service for pipeline outputs
Handles detections as JSON lines, evaluation reports and benchmark tables
"""
from __future__ import annotations

from collections import OrderedDict
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import pandas as pd
from tabulate import tabulate

from .core import Detection

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ExportService:
    """Service for writing and reading run artifacts"""

    # Detection record layout - order matters for the JSON lines output
    DETECTION_FIELDS = ["cx", "cy", "cz", "l", "w", "h", "theta", "score", "class_id"]

    # Header / column pairs for the terminal summary of a run
    SUMMARY_COLUMNS = [
        ("SCENE", "scene_id"),
        ("POINTS", "selected_points"),
        ("VOXELS", "voxels"),
        ("PAIRS", "spfe_pairs"),
        ("DETECTIONS", "detections"),
        ("TOTAL MS", "total_ms"),
    ]

    REPORT_COLUMNS = [
        ("CLASS", "class"),
        ("AP", "ap"),
        ("APH", "aph"),
        ("MODE", "mode"),
        ("IOU", "iou_threshold"),
        ("GT", "num_gt"),
        ("DET", "num_det"),
    ]

    @classmethod
    def detection_record(cls, detection: Detection, scene_id: str) -> Dict:
        record = detection.to_dict()
        ordered = {key: record[key] for key in cls.DETECTION_FIELDS}
        ordered["scene_id"] = scene_id
        return ordered

    @classmethod
    def detections_to_jsonl(cls, results: Iterable[Tuple[str, Sequence[Detection]]]) -> str:
        lines = []
        for scene_id, detections in results:
            lines.extend(json.dumps(cls.detection_record(d, scene_id)) for d in detections)
        return "".join(line + "\n" for line in lines)

    @classmethod
    def write_detections(cls, path: PathLike, results: Iterable[Tuple[str, Sequence[Detection]]]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(cls.detections_to_jsonl(results))
        logger.info("Wrote detections to %s", path)
        return path

    @classmethod
    def read_detections(cls, path: PathLike) -> "OrderedDict[str, List[Detection]]":
        """Detections grouped by scene id, in file order."""
        grouped: "OrderedDict[str, List[Detection]]" = OrderedDict()
        with open(path, "r", encoding="utf-8") as fh:
            for line_number, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    detection = Detection.from_dict(record)
                except (ValueError, KeyError) as exc:
                    raise ValueError(f"{path}:{line_number}: malformed detection record ({exc})") from exc
                grouped.setdefault(str(record.get("scene_id", "")), []).append(detection)
        return grouped

    @classmethod
    def write_report(cls, path: PathLike, report: Mapping) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=2, sort_keys=True))
        logger.info("Wrote evaluation report to %s", path)
        return path

    @classmethod
    def write_bench_csv(cls, path: PathLike, table: pd.DataFrame) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False)
        logger.info("Wrote %d benchmark rows to %s", len(table), path)
        return path

    @classmethod
    def format_table(cls, rows: Sequence[Mapping], columns: Sequence[Tuple[str, str]]) -> str:
        body = [[row.get(field, "") for _, field in columns] for row in rows]
        return tabulate(body, headers=[header for header, _ in columns], floatfmt=".4g")

    @classmethod
    def run_summary(cls, results) -> str:
        rows = []
        for result in results:
            row = dict(result.stats)
            row["scene_id"] = result.scene_id
            row["total_ms"] = sum(result.timings.values())
            rows.append(row)
        return cls.format_table(rows, cls.SUMMARY_COLUMNS)

    @classmethod
    def report_summary(cls, report: Mapping[str, Mapping]) -> str:
        rows = [dict(values, **{"class": name}) for name, values in report.items() if values]
        return cls.format_table(rows, cls.REPORT_COLUMNS)
