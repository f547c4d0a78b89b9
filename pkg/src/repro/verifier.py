"""Run artifact loading, evaluation metrics, and reproducibility verdicts.

A training run leaves behind a small artifact directory:

    manifest.json   {schema_version, task, command, started_at, ended_at}
    process.json    {losses: [decimal strings], epochs, wall_seconds}
    eval.json       classification: {labels, predictions, overall_accuracy,
                                     per_class_accuracy}
                    regression:     {truths, predictions, mae}

Every real number in these files is stored as its shortest round-trip
decimal string (Python ``repr`` of the double), so "identical" is exact and
well-defined across writers: two values are the same when their strings are
equal.  Loading recomputes the evaluation metrics from the raw vectors and
refuses artifacts whose stored metrics disagree with the recomputation.

Comparison of two runs covers predictions, evaluation metrics, epoch count
and the per-epoch loss series; wall-clock time is reported but never part
of the verdict.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

__all__ = [
    "ArtifactError",
    "IntegrityError",
    "ComparisonError",
    "RunArtifact",
    "ComparisonReport",
    "MetricSpread",
    "VarianceSummary",
    "SCHEMA_VERSION",
    "TASK_CLASSIFICATION",
    "TASK_REGRESSION",
    "format_real",
    "parse_real",
    "is_canonical_real",
    "overall_accuracy",
    "per_class_accuracy",
    "mean_absolute_error",
    "prediction_diff",
    "load_run_artifact",
    "write_run_artifact",
    "compare_runs",
    "variance_analysis",
    "render_report",
]

SCHEMA_VERSION = 1
TASK_CLASSIFICATION = "classification"
TASK_REGRESSION = "regression"


class ArtifactError(ValueError):
    """A run artifact is missing, malformed, or violates the schema."""


class IntegrityError(ArtifactError):
    """Stored evaluation metrics disagree with a recomputation from the raw
    prediction vectors."""


class ComparisonError(ValueError):
    """Two artifacts cannot be compared (different tasks or ground truth)."""


# ---------------------------------------------------------------------------
# canonical real-number serialization


def format_real(value: float) -> str:
    """Shortest decimal string that round-trips to the same double."""
    return repr(float(value))


def parse_real(text: str) -> float:
    return float(text)


def is_canonical_real(text: str) -> bool:
    """True if *text* is exactly the canonical serialization of its value."""
    if not isinstance(text, str):
        return False
    try:
        value = float(text)
    except ValueError:
        return False
    return repr(value) == text


# ---------------------------------------------------------------------------
# pure metric operations


def overall_accuracy(predictions: Sequence, labels: Sequence) -> Fraction:
    """Matching positions over total positions, as an exact rational."""
    if len(predictions) != len(labels):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions vs {len(labels)} labels"
        )
    if not labels:
        raise ValueError("cannot compute accuracy of an empty run")
    correct = sum(1 for p, t in zip(predictions, labels) if p == t)
    return Fraction(correct, len(labels))


def per_class_accuracy(predictions: Sequence, labels: Sequence) -> Dict:
    """Per-true-class accuracy; classes with no test instances are omitted."""
    if len(predictions) != len(labels):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions vs {len(labels)} labels"
        )
    if not labels:
        raise ValueError("cannot compute accuracy of an empty run")
    totals: Dict = {}
    correct: Dict = {}
    for pred, truth in zip(predictions, labels):
        totals[truth] = totals.get(truth, 0) + 1
        if pred == truth:
            correct[truth] = correct.get(truth, 0) + 1
    return {label: Fraction(correct.get(label, 0), n) for label, n in totals.items()}


def mean_absolute_error(predictions: Sequence[float], truths: Sequence[float]) -> float:
    """Mean of |prediction - truth|, summed left to right in input order.

    The summation order is part of the definition: it makes the result a
    deterministic function of the serialized inputs, so an independent
    recomputation lands on the identical double.
    """
    if len(predictions) != len(truths):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths"
        )
    if not truths:
        raise ValueError("cannot compute MAE of an empty run")
    total = 0.0
    for pred, truth in zip(predictions, truths):
        if not (math.isfinite(pred) and math.isfinite(truth)):
            raise ValueError(f"non-finite value in MAE input: {pred!r} vs {truth!r}")
        total += abs(pred - truth)
    return total / len(truths)


# ---------------------------------------------------------------------------
# artifacts


@dataclass(frozen=True)
class RunArtifact:
    """One training run's outputs, loaded and integrity-checked."""

    path: Path
    task: str
    command: Tuple[str, ...]
    started_at: str
    ended_at: str
    ground_truth: Tuple[str, ...]   # labels (classification) or truths (regression)
    predictions: Tuple[str, ...]
    losses: Tuple[str, ...]
    epochs: int
    wall_seconds: float
    overall_accuracy: Optional[str] = None          # canonical string
    per_class_accuracy: Optional[Mapping[str, str]] = None
    mae: Optional[str] = None

    @property
    def n_test(self) -> int:
        return len(self.ground_truth)


def _load_json(directory: Path, name: str):
    path = directory / name
    if not path.is_file():
        raise ArtifactError(f"{path}: file is missing")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: not valid JSON ({exc})") from exc


def _require(obj, name: str, field: str, kind, where: str):
    if field not in obj:
        raise ArtifactError(f"{where}: missing field {field!r} in {name}")
    value = obj[field]
    if kind is float:  # canonical real string
        if not is_canonical_real(value):
            raise ArtifactError(
                f"{where}: field {field!r} in {name} is not a canonical "
                f"decimal string: {value!r}"
            )
        return parse_real(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ArtifactError(f"{where}: field {field!r} in {name} has wrong type")
    return value


def _string_list(obj, name: str, field: str, where: str, canonical: bool = False) -> List[str]:
    values = _require(obj, name, field, list, where)
    for i, item in enumerate(values):
        if not isinstance(item, str):
            raise ArtifactError(f"{where}: {name} {field}[{i}] is not a string")
        if canonical and not is_canonical_real(item):
            raise ArtifactError(
                f"{where}: {name} {field}[{i}] is not a canonical decimal string: {item!r}"
            )
    return values


def load_run_artifact(path: Union[str, Path]) -> RunArtifact:
    """Load and validate a run artifact directory.

    Raises ArtifactError for missing or malformed pieces, and its subclass
    IntegrityError when the stored evaluation metrics do not equal the ones
    recomputed here from the raw vectors.
    """
    directory = Path(path)
    where = str(directory)
    if not directory.is_dir():
        raise ArtifactError(f"{where}: not a directory")

    manifest = _load_json(directory, "manifest.json")
    version = _require(manifest, "manifest.json", "schema_version", int, where)
    if version != SCHEMA_VERSION:
        raise ArtifactError(f"{where}: unsupported schema_version {version}")
    task = _require(manifest, "manifest.json", "task", str, where)
    if task not in (TASK_CLASSIFICATION, TASK_REGRESSION):
        raise ArtifactError(f"{where}: unknown task {task!r}")
    command = tuple(_string_list(manifest, "manifest.json", "command", where))
    started_at = _require(manifest, "manifest.json", "started_at", str, where)
    ended_at = _require(manifest, "manifest.json", "ended_at", str, where)

    process = _load_json(directory, "process.json")
    losses = tuple(_string_list(process, "process.json", "losses", where, canonical=True))
    epochs = _require(process, "process.json", "epochs", int, where)
    if epochs != len(losses):
        raise ArtifactError(
            f"{where}: process.json epochs ({epochs}) != number of losses ({len(losses)})"
        )
    wall_seconds = _require(process, "process.json", "wall_seconds", float, where)
    if not wall_seconds > 0:
        raise ArtifactError(f"{where}: process.json wall_seconds must be positive")

    evaluation = _load_json(directory, "eval.json")
    if task == TASK_CLASSIFICATION:
        labels = _string_list(evaluation, "eval.json", "labels", where)
        predictions = _string_list(evaluation, "eval.json", "predictions", where)
    else:
        labels = _string_list(evaluation, "eval.json", "truths", where, canonical=True)
        predictions = _string_list(evaluation, "eval.json", "predictions", where, canonical=True)
    if not labels:
        raise ArtifactError(f"{where}: eval.json has no test instances")
    if len(predictions) != len(labels):
        raise ArtifactError(
            f"{where}: eval.json has {len(predictions)} predictions "
            f"for {len(labels)} ground-truth values"
        )

    stored_overall = stored_per_class = stored_mae = None
    if task == TASK_CLASSIFICATION:
        stored_overall = _require(evaluation, "eval.json", "overall_accuracy", str, where)
        recomputed = format_real(float(overall_accuracy(predictions, labels)))
        if stored_overall != recomputed:
            raise IntegrityError(
                f"{where}: stored overall_accuracy {stored_overall!r} does not "
                f"match recomputed {recomputed!r}"
            )
        stored_per_class = _require(evaluation, "eval.json", "per_class_accuracy", dict, where)
        recomputed_map = {
            label: format_real(float(frac))
            for label, frac in per_class_accuracy(predictions, labels).items()
        }
        if dict(stored_per_class) != recomputed_map:
            raise IntegrityError(
                f"{where}: stored per_class_accuracy does not match recomputation"
            )
    else:
        stored_mae = _require(evaluation, "eval.json", "mae", str, where)
        recomputed = format_real(
            mean_absolute_error([float(p) for p in predictions], [float(t) for t in labels])
        )
        if stored_mae != recomputed:
            raise IntegrityError(
                f"{where}: stored mae {stored_mae!r} does not match "
                f"recomputed {recomputed!r}"
            )

    return RunArtifact(
        path=directory,
        task=task,
        command=command,
        started_at=started_at,
        ended_at=ended_at,
        ground_truth=tuple(labels),
        predictions=tuple(predictions),
        losses=losses,
        epochs=epochs,
        wall_seconds=wall_seconds,
        overall_accuracy=stored_overall,
        per_class_accuracy=dict(stored_per_class) if stored_per_class is not None else None,
        mae=stored_mae,
    )


def _dump_json(directory: Path, name: str, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    (directory / name).write_text(text, encoding="utf-8")


def write_run_artifact(
    path: Union[str, Path],
    task: str,
    predictions: Sequence,
    losses: Sequence[float],
    epochs: int,
    wall_seconds: float,
    command: Sequence[str],
    started_at: str,
    ended_at: str,
    labels: Optional[Sequence[str]] = None,
    truths: Optional[Sequence[float]] = None,
) -> Path:
    """Write a run artifact directory in the canonical serialization.

    Evaluation metrics are computed here, so a written artifact always
    passes the loader's integrity check by construction.
    """
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)

    if task == TASK_CLASSIFICATION:
        if labels is None:
            raise ValueError("classification artifacts need labels")
        labels_s = [str(x) for x in labels]
        preds_s = [str(x) for x in predictions]
        evaluation = {
            "labels": labels_s,
            "predictions": preds_s,
            "overall_accuracy": format_real(float(overall_accuracy(preds_s, labels_s))),
            "per_class_accuracy": {
                label: format_real(float(frac))
                for label, frac in per_class_accuracy(preds_s, labels_s).items()
            },
        }
    elif task == TASK_REGRESSION:
        if truths is None:
            raise ValueError("regression artifacts need truths")
        truths_f = [float(x) for x in truths]
        preds_f = [float(x) for x in predictions]
        evaluation = {
            "truths": [format_real(x) for x in truths_f],
            "predictions": [format_real(x) for x in preds_f],
            "mae": format_real(mean_absolute_error(preds_f, truths_f)),
        }
    else:
        raise ValueError(f"unknown task {task!r}")

    _dump_json(directory, "manifest.json", {
        "schema_version": SCHEMA_VERSION,
        "task": task,
        "command": list(command),
        "started_at": started_at,
        "ended_at": ended_at,
    })
    _dump_json(directory, "process.json", {
        "losses": [format_real(x) for x in losses],
        "epochs": int(epochs),
        "wall_seconds": format_real(wall_seconds),
    })
    _dump_json(directory, "eval.json", evaluation)
    return directory


# ---------------------------------------------------------------------------
# comparison


def prediction_diff(a: RunArtifact, b: RunArtifact) -> Tuple[int, Tuple[int, ...]]:
    """Positions where the two runs' serialized predictions differ."""
    _check_comparable(a, b)
    indices = tuple(
        i for i, (pa, pb) in enumerate(zip(a.predictions, b.predictions)) if pa != pb
    )
    return len(indices), indices


def _check_comparable(a: RunArtifact, b: RunArtifact) -> None:
    if a.task != b.task:
        raise ComparisonError(f"cannot compare tasks {a.task!r} and {b.task!r}")
    if a.n_test != b.n_test:
        raise ComparisonError(
            f"runs have different test-set sizes: {a.n_test} vs {b.n_test}"
        )
    if a.ground_truth != b.ground_truth:
        raise ComparisonError("runs were evaluated against different ground truth")


@dataclass(frozen=True)
class ComparisonReport:
    """Outcome of comparing two runs of the same job."""

    task: str
    n_test: int
    eval_identical: bool
    process_identical: bool
    inconsistent_prediction_count: int
    inconsistent_indices: Tuple[int, ...]
    overall_diff: float                       # accuracy diff, or MAE diff
    max_per_class_diff: Optional[float]       # classification only
    loss_first_divergence: Optional[int]      # epoch index, None if equal
    epochs_a: int
    epochs_b: int
    overall_a: str
    overall_b: str
    wall_seconds_a: float
    wall_seconds_b: float

    @property
    def reproducible(self) -> bool:
        return self.eval_identical and self.process_identical


def compare_runs(a: RunArtifact, b: RunArtifact) -> ComparisonReport:
    """Compare two runs; the verdict ignores wall-clock time."""
    _check_comparable(a, b)
    count, indices = prediction_diff(a, b)

    if a.task == TASK_CLASSIFICATION:
        overall_a, overall_b = a.overall_accuracy, b.overall_accuracy
        eval_identical = (
            count == 0
            and overall_a == overall_b
            and a.per_class_accuracy == b.per_class_accuracy
        )
        # Diff magnitudes come from exact rational recomputation (the
        # loader guarantees the stored strings agree with it), rounded to
        # float exactly once.
        exact_a = per_class_accuracy(a.predictions, a.ground_truth)
        exact_b = per_class_accuracy(b.predictions, b.ground_truth)
        per_class_diff = float(max(
            (abs(exact_a[label] - exact_b[label]) for label in exact_a),
            default=Fraction(0),
        ))
        overall_diff = float(abs(
            overall_accuracy(a.predictions, a.ground_truth)
            - overall_accuracy(b.predictions, b.ground_truth)
        ))
    else:
        overall_a, overall_b = a.mae, b.mae
        eval_identical = count == 0 and overall_a == overall_b
        per_class_diff = None
        overall_diff = abs(parse_real(overall_a) - parse_real(overall_b))

    first_divergence = None
    for i, (la, lb) in enumerate(zip(a.losses, b.losses)):
        if la != lb:
            first_divergence = i
            break
    if first_divergence is None and len(a.losses) != len(b.losses):
        first_divergence = min(len(a.losses), len(b.losses))
    process_identical = a.epochs == b.epochs and a.losses == b.losses

    return ComparisonReport(
        task=a.task,
        n_test=a.n_test,
        eval_identical=eval_identical,
        process_identical=process_identical,
        inconsistent_prediction_count=count,
        inconsistent_indices=indices,
        overall_diff=overall_diff,
        max_per_class_diff=per_class_diff,
        loss_first_divergence=first_divergence,
        epochs_a=a.epochs,
        epochs_b=b.epochs,
        overall_a=overall_a,
        overall_b=overall_b,
        wall_seconds_a=a.wall_seconds,
        wall_seconds_b=b.wall_seconds,
    )


# ---------------------------------------------------------------------------
# variance across paired runs


@dataclass(frozen=True)
class MetricSpread:
    """Spread of one per-pair difference metric over a set of run pairs."""

    max_abs_diff: float
    sdev_of_diffs: float


@dataclass(frozen=True)
class VarianceSummary:
    pair_count: int
    overall: MetricSpread                    # accuracy (or MAE) differences
    per_class: Optional[MetricSpread]        # classification only
    prediction_inconsistency: MetricSpread   # differing-position counts


def _spread(diffs: Sequence[float]) -> MetricSpread:
    # A single pair has no spread; report zero rather than failing.
    sdev = statistics.stdev(diffs) if len(diffs) > 1 else 0.0
    return MetricSpread(max_abs_diff=max(diffs), sdev_of_diffs=sdev)


def variance_analysis(pairs: Sequence[Tuple[RunArtifact, RunArtifact]]) -> VarianceSummary:
    """Per-pair metric differences summarized as max and sample (n-1) sdev."""
    if not pairs:
        raise ValueError("variance analysis needs at least one pair of runs")
    reports = [compare_runs(a, b) for a, b in pairs]

    overall_diffs = [r.overall_diff for r in reports]
    count_diffs = [float(r.inconsistent_prediction_count) for r in reports]
    class_diffs = [
        r.max_per_class_diff for r in reports if r.max_per_class_diff is not None
    ]
    per_class = _spread(class_diffs) if len(class_diffs) == len(reports) else None

    return VarianceSummary(
        pair_count=len(reports),
        overall=_spread(overall_diffs),
        per_class=per_class,
        prediction_inconsistency=_spread(count_diffs),
    )


# ---------------------------------------------------------------------------
# rendering


def _percent_pair(spread: MetricSpread) -> str:
    return f"{spread.max_abs_diff * 100:.1f}% / {spread.sdev_of_diffs * 100:.1f}%"


def _render_comparison_text(report: ComparisonReport) -> str:
    lines = []
    lines.append("verdict: REPRODUCIBLE" if report.reproducible
                 else "verdict: NOT REPRODUCIBLE")
    lines.append(f"task: {report.task}")
    lines.append(f"test instances: {report.n_test}")
    lines.append(f"evaluation: {'identical' if report.eval_identical else 'differs'}")
    if not report.eval_identical:
        first = (f" (first at index {report.inconsistent_indices[0]})"
                 if report.inconsistent_indices else "")
        lines.append(
            f"  inconsistent predictions: {report.inconsistent_prediction_count}"
            f" of {report.n_test}{first}"
        )
        metric = "overall accuracy" if report.task == TASK_CLASSIFICATION else "mae"
        lines.append(
            f"  {metric}: {report.overall_a} vs {report.overall_b}"
            f" (diff {format_real(report.overall_diff)})"
        )
        if report.max_per_class_diff is not None:
            lines.append(
                f"  max per-class accuracy diff: {format_real(report.max_per_class_diff)}"
            )
    lines.append(f"process: {'identical' if report.process_identical else 'differs'}")
    if not report.process_identical:
        if report.epochs_a != report.epochs_b:
            lines.append(f"  epochs: {report.epochs_a} vs {report.epochs_b}")
        if report.loss_first_divergence is not None:
            lines.append(f"  loss first divergence: epoch {report.loss_first_divergence}")
    lines.append(
        f"wall seconds (not compared): {format_real(report.wall_seconds_a)}"
        f" vs {format_real(report.wall_seconds_b)}"
    )
    return "\n".join(lines) + "\n"


def _render_summary_text(summary: VarianceSummary) -> str:
    lines = [f"pairs: {summary.pair_count}"]
    lines.append(f"overall accuracy: {_percent_pair(summary.overall)}")
    if summary.per_class is not None:
        lines.append(f"per-class accuracy: {_percent_pair(summary.per_class)}")
    spread = summary.prediction_inconsistency
    lines.append(
        "prediction inconsistencies: "
        f"{spread.max_abs_diff:g} / {spread.sdev_of_diffs:g}"
    )
    return "\n".join(lines) + "\n"


def _as_plain(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _as_plain(getattr(obj, k)) for k in obj.__dataclass_fields__}
    if isinstance(obj, dict):
        return {str(k): _as_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_as_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def render_report(
    report: Union[ComparisonReport, VarianceSummary], format: str = "text"
) -> str:
    """Render a comparison report or variance summary deterministically."""
    if format == "json":
        body = _as_plain(report)
        body["schema_version"] = SCHEMA_VERSION
        if isinstance(report, ComparisonReport):
            body["reproducible"] = report.reproducible
        return json.dumps(body, indent=2, sort_keys=True) + "\n"
    if format != "text":
        raise ValueError(f"unknown report format {format!r}")
    if isinstance(report, ComparisonReport):
        return _render_comparison_text(report)
    return _render_summary_text(report)
