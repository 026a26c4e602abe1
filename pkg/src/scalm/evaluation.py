"""Per-SWC binary classification metrics for the pipeline or for external tools."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .audit import AuditReport
from .errors import EmptyMatrix, ManifestError, MissingPrediction, ScalmError
from .swc import SwcId, keywords, parse_swc_id

log = logging.getLogger(__name__)

DASH = "—"


@dataclass(frozen=True)
class LabeledContract:
    path: str
    positive_labels: frozenset[SwcId] = frozenset()


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class Metrics:
    acc: float
    recall: float
    precision: float
    f1: float


@dataclass(frozen=True)
class MetricsRow:
    swc_id: SwcId
    tool_name: str
    matrix: ConfusionMatrix
    acc: float
    recall: float
    precision: float
    f1: float

    def to_dict(self) -> dict:
        return {
            "swc_id": str(self.swc_id),
            "tool_name": self.tool_name,
            **asdict(self.matrix),
            "acc": self.acc,
            "recall": self.recall,
            "precision": self.precision,
            "f1": self.f1,
        }


def classify(report: AuditReport, swc: SwcId) -> bool:
    """A report detects ``swc`` if a finding carries its id or mentions one of its keywords."""
    words = keywords(swc)
    for finding in report.findings:
        if finding.bad_practice_id == swc:
            return True
        text = f"{finding.title}\n{finding.reason}".lower()
        if any(w in text for w in words):
            return True
    return False


def confusion(
    predictions: Mapping[str, bool], labels: Iterable[LabeledContract], swc: SwcId
) -> ConfusionMatrix:
    tp = tn = fp = fn = 0
    for contract in labels:
        if contract.path not in predictions:
            raise MissingPrediction(contract.path)
        predicted = bool(predictions[contract.path])
        actual = swc in contract.positive_labels
        if predicted and actual:
            tp += 1
        elif predicted:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, tn, fp, fn)


def metrics(cm: ConfusionMatrix) -> Metrics:
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix has no instances")
    acc = (cm.tp + cm.tn) / cm.total
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(acc, recall, precision, f1)


def metrics_row(swc: SwcId, tool_name: str, cm: ConfusionMatrix) -> MetricsRow:
    m = metrics(cm)
    return MetricsRow(swc, tool_name, cm, m.acc, m.recall, m.precision, m.f1)


# --- datasets and prediction files ---------------------------------------------


def load_dataset(path: str | Path) -> list[LabeledContract]:
    """Read a JSONL dataset of ``{path, positive_labels}`` rows."""
    out = []
    with Path(path).open(encoding="utf-8") as f:
        for row_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                labels = frozenset(parse_swc_id(s) for s in row.get("positive_labels", []))
                out.append(LabeledContract(str(row["path"]), labels))
            except (json.JSONDecodeError, KeyError, TypeError, ScalmError) as exc:
                raise ManifestError(f"bad dataset row: {exc}", row_no) from exc
    return out


def load_predictions(path: str | Path) -> dict[SwcId, dict[str, bool]]:
    """Read external-tool predictions ``{path, swc_id, positive}`` grouped by category."""
    grouped: dict[SwcId, dict[str, bool]] = {}
    with Path(path).open(encoding="utf-8") as f:
        for row_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                swc = parse_swc_id(row["swc_id"])
                positive = row["positive"]
                if not isinstance(positive, bool):
                    raise TypeError("positive must be true or false")
                grouped.setdefault(swc, {})[str(row["path"])] = positive
            except (json.JSONDecodeError, KeyError, TypeError, ScalmError) as exc:
                raise ManifestError(f"bad prediction row: {exc}", row_no) from exc
    return grouped


@dataclass
class EvalResult:
    tool_name: str
    swc_list: list[SwcId]
    rows: list[MetricsRow] = field(default_factory=list)
    absent: list[SwcId] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "tool_name": self.tool_name,
            "swc_list": [str(s) for s in self.swc_list],
            "rows": [r.to_dict() for r in self.rows],
            "absent": [str(s) for s in self.absent],
            "failures": self.failures,
        }

    def render(self) -> str:
        return render_table(self.rows, self.swc_list, [self.tool_name])


def render_table(rows: Iterable[MetricsRow], swc_list: list[SwcId], tools: list[str]) -> str:
    """Plain-text SWC x tool table of Acc/Recall/F1 in percent; missing pairs show a dash."""
    index = {(r.swc_id, r.tool_name): r for r in rows}
    header = ("SWC-ID", "Tool", "Acc(%)", "Recall(%)", "F1(%)")
    body = []
    for swc in swc_list:
        for tool in tools:
            r = index.get((swc, tool))
            if r is None:
                body.append((str(swc), tool, DASH, DASH, DASH))
            else:
                body.append((str(swc), tool, f"{r.acc * 100:.2f}", f"{r.recall * 100:.2f}", f"{r.f1 * 100:.2f}"))
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [header, *body]]
    return "\n".join(lines) + "\n"


def run_eval(
    dataset: list[LabeledContract],
    swc_list: list[SwcId],
    *,
    tool_name: str = "scalm",
    auditor: Callable[[LabeledContract], AuditReport] | None = None,
    predictions: Mapping[SwcId, Mapping[str, bool]] | None = None,
    parallelism: int = 1,
) -> EvalResult:
    """Score either the pipeline (``auditor``) or an external tool (``predictions``).

    With ``auditor`` every contract is audited exactly once; a contract whose
    audit raises counts as a negative prediction and is listed in
    ``failures``.  With ``predictions``, a category with no rows at all is
    reported as absent (rendered as a dash).
    """
    if (auditor is None) == (predictions is None):
        raise ValueError("pass exactly one of auditor / predictions")
    result = EvalResult(tool_name, list(swc_list))
    if not swc_list:
        return result

    if auditor is not None:
        def run_one(contract):
            try:
                return auditor(contract), None
            except (ScalmError, OSError, UnicodeDecodeError) as exc:
                log.warning("audit of %s failed: %s", contract.path, exc)
                return None, f"{type(exc).__name__}: {exc}"

        if parallelism > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                outcomes = list(pool.map(run_one, dataset))
        else:
            outcomes = [run_one(c) for c in dataset]
        per_swc: dict[SwcId, dict[str, bool]] = {s: {} for s in swc_list}
        for contract, (report, error) in zip(dataset, outcomes):
            if error is not None:
                result.failures.append({"path": contract.path, "error": error})
            for swc in swc_list:
                per_swc[swc][contract.path] = report is not None and classify(report, swc)
        predictions = per_swc

    for swc in swc_list:
        preds = predictions.get(swc)
        if not preds:
            result.absent.append(swc)
            continue
        result.rows.append(metrics_row(swc, tool_name, confusion(preds, dataset, swc)))
    return result
