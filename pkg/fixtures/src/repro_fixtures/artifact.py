"""Run-artifact writer.

This is the fixtures' own implementation of the artifact directory format
the harness consumes: three JSON documents (manifest.json, process.json,
eval.json) serialized canonically (two-space indent, sorted keys, one
trailing newline) with every measured real number rendered through
repr(), the shortest string that round-trips to the same double.  Keeping
the writer here, rather than importing the harness, is what makes the
format a real interface: the harness's loader re-derives every metric and
rejects any disagreement.
"""

from __future__ import annotations

import json
import os
from typing import Dict, List, Sequence


def format_real(value: float) -> str:
    return repr(float(value))


def _dump(directory: str, name: str, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    with open(os.path.join(directory, name), "w", encoding="utf-8") as fh:
        fh.write(text)


def _accuracy(predictions: Sequence[str], labels: Sequence[str]) -> str:
    hits = sum(1 for p, t in zip(predictions, labels) if p == t)
    return format_real(hits / len(labels))


def _per_class(predictions: Sequence[str], labels: Sequence[str]) -> Dict[str, str]:
    totals: Dict[str, int] = {}
    hits: Dict[str, int] = {}
    for pred, truth in zip(predictions, labels):
        totals[truth] = totals.get(truth, 0) + 1
        if pred == truth:
            hits[truth] = hits.get(truth, 0) + 1
    return {label: format_real(hits.get(label, 0) / n)
            for label, n in totals.items()}


def _mae(predictions: Sequence[float], truths: Sequence[float]) -> str:
    total = 0.0
    for pred, truth in zip(predictions, truths):
        total += abs(pred - truth)
    return format_real(total / len(truths))


def write_classification_artifact(directory: str, *, labels: List[int],
                                  predictions: List[int], losses: List[float],
                                  wall_seconds: float, command: List[str],
                                  started_at: str, ended_at: str) -> None:
    os.makedirs(directory, exist_ok=True)
    label_s = [str(v) for v in labels]
    pred_s = [str(v) for v in predictions]
    _dump(directory, "manifest.json", {
        "schema_version": 1,
        "task": "classification",
        "command": list(command),
        "started_at": started_at,
        "ended_at": ended_at,
    })
    _dump(directory, "process.json", {
        "losses": [format_real(v) for v in losses],
        "epochs": len(losses),
        "wall_seconds": format_real(wall_seconds),
    })
    _dump(directory, "eval.json", {
        "labels": label_s,
        "predictions": pred_s,
        "overall_accuracy": _accuracy(pred_s, label_s),
        "per_class_accuracy": _per_class(pred_s, label_s),
    })


def write_regression_artifact(directory: str, *, truths: List[float],
                              predictions: List[float], losses: List[float],
                              wall_seconds: float, command: List[str],
                              started_at: str, ended_at: str) -> None:
    os.makedirs(directory, exist_ok=True)
    _dump(directory, "manifest.json", {
        "schema_version": 1,
        "task": "regression",
        "command": list(command),
        "started_at": started_at,
        "ended_at": ended_at,
    })
    _dump(directory, "process.json", {
        "losses": [format_real(v) for v in losses],
        "epochs": len(losses),
        "wall_seconds": format_real(wall_seconds),
    })
    _dump(directory, "eval.json", {
        "truths": [format_real(v) for v in truths],
        "predictions": [format_real(v) for v in predictions],
        "mae": _mae(predictions, truths),
    })
