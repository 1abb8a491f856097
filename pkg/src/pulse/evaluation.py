"""HR@1, report records and report files."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from pulse.errors import InvalidArgument
from pulse.utils import canonical_json, read_jsonl, write_json, write_text

REPORT_VERSION = 1
CSV_COLUMNS = ("experiment", "dataset", "method", "hr_at_1", "n_users", "seed", "fingerprint")

# Full-scale reference numbers, kept as report metadata only.
REFERENCE = {
    "main": {"luxury_beauty": 0.9339, "prime_pantry": 0.8373, "video_games": 0.9170},
    "ablation_a": {"thought_space": 0.9339, "sbert": 0.8636, "distilbert": 0.7920},
    "ablation_b": {"none": 0.6111, "base_reason": 0.7186, "tot_loglik": 0.8559,
                   "tot_thought_space": 0.9339},
    "cross_domain": {"pulse": 0.6240, "backbone_only": 0.1030},
}


def hr_at_1(predictions: Sequence[tuple[int, int]]) -> float:
    """Fraction of (predicted_index, ground_truth_index) pairs that agree."""
    if len(predictions) == 0:
        raise InvalidArgument("no predictions to score")
    hits = sum(1 for p, g in predictions if int(p) == int(g))
    return hits / len(predictions)


def recount_hr_at_1(prediction_dump: str | Path) -> float:
    """Independent recount from a prediction dump: re-derive each top-1 from the logits."""
    hits = total = 0
    for row in read_jsonl(prediction_dump):
        logits = np.asarray(row["logits"], dtype=np.float64)
        top = int(np.flatnonzero(logits == logits.max())[0])
        hits += top == int(row["ground_truth_index"])
        total += 1
    if total == 0:
        raise InvalidArgument("prediction dump is empty")
    return hits / total


@dataclass
class MetricsReport:
    experiment: str
    dataset: str
    method: str
    hr_at_1: float
    n_users: int
    hits: int
    seed: int
    fingerprint: str
    input_hash: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_users <= 0:
            raise InvalidArgument("a report needs at least one user")
        if not 0 <= self.hits <= self.n_users or self.hr_at_1 != self.hits / self.n_users:
            raise InvalidArgument("hr_at_1 must equal hits / n_users")

    def to_json(self) -> dict:
        return asdict(self)


def make_report(experiment: str, dataset: str, method: str, predictions: Sequence[tuple[int, int]],
                seed: int, fingerprint: str, input_hash: str, metadata: dict | None = None) -> MetricsReport:
    hits = sum(1 for p, g in predictions if int(p) == int(g))
    return MetricsReport(experiment, dataset, method, hits / len(predictions), len(predictions), hits,
                         seed, fingerprint, input_hash, dict(metadata or {}))


def reports_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([r.experiment, r.dataset, r.method, f"{r.hr_at_1:.6f}", r.n_users, r.seed, r.fingerprint])
    return buf.getvalue()


def curve_csv(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([f"{x:.6f}" if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def emit_report(reports: Sequence[MetricsReport], out_dir: str | Path, name: str = "report",
                plots: dict[str, str] | None = None) -> list[Path]:
    """Write ``{name}.json`` and ``{name}.csv`` plus any plot-data CSV texts in ``plots``."""
    if not reports:
        raise InvalidArgument("emit_report needs at least one report")
    out = Path(out_dir)
    body = {"report_version": REPORT_VERSION, "reports": [r.to_json() for r in reports]}
    paths = [out / f"{name}.json", out / f"{name}.csv"]
    write_json(paths[0], json.loads(canonical_json(body)))
    write_text(paths[1], reports_csv(reports))
    for fname, text in sorted((plots or {}).items()):
        write_text(out / fname, text)
        paths.append(out / fname)
    return paths


def load_reports(path: str | Path) -> list[MetricsReport]:
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    if body.get("report_version") != REPORT_VERSION:
        raise InvalidArgument(f"unsupported report version {body.get('report_version')}")
    return [MetricsReport(**r) for r in body["reports"]]
