"""CSV emitters for routing heatmaps, PSNR comparisons, probe accuracies and loss curves.

Every writer has a matching parser; floats are written with ``repr`` so a
round trip through the two is lossless.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass

import numpy as np

from .io import atomic_write


class ReportError(FileNotFoundError):
    pass


def _emit(rows: list[list], path=None) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    text = buf.getvalue()
    if path is not None:
        atomic_write(path, text.encode("utf-8"))
    return text


def _rows(text: str) -> list[list[str]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty CSV")
    return rows


def _num(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- heatmaps

@dataclass
class Heatmap:
    row_kind: str  # "class" or "cluster"
    row_ids: list
    matrix: np.ndarray  # row-stochastic, (rows, experts)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Heatmap) and self.row_kind == other.row_kind
                and list(self.row_ids) == list(other.row_ids)
                and np.array_equal(self.matrix, other.matrix))


def heatmap_csv(hm: Heatmap, path=None) -> str:
    M = np.asarray(hm.matrix, dtype=np.float64)
    header = [hm.row_kind] + [f"expert_{e}" for e in range(M.shape[1])]
    body = [[str(r)] + [_num(v) for v in row] for r, row in zip(hm.row_ids, M)]
    return _emit([header] + body, path)


def parse_heatmap_csv(text: str) -> Heatmap:
    rows = _rows(text)
    kind = rows[0][0]
    ids = [int(r[0]) for r in rows[1:]]
    M = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    return Heatmap(kind, ids, M.reshape(len(ids), len(rows[0]) - 1))


# ---------------------------------------------------------------- psnr / accuracy

def psnr_rows(values: dict, dense_model: str = "dense_full") -> list[tuple]:
    """``{(model, task): psnr}`` -> sorted rows of (model, task, psnr, delta vs dense)."""
    out = []
    for (model, task), v in sorted(values.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1]))):
        if (dense_model, task) not in values:
            raise ReportError(f"no {dense_model!r} PSNR for task {task!r}")
        out.append((model, str(task), float(v), float(v) - float(values[(dense_model, task)])))
    return out


def psnr_csv(rows: list[tuple], path=None) -> str:
    body = [[m, t, _num(p), _num(d)] for m, t, p, d in rows]
    return _emit([["model", "task", "psnr", "delta_vs_dense"]] + body, path)


def parse_psnr_csv(text: str) -> list[tuple]:
    return [(m, t, float(p), float(d)) for m, t, p, d in _rows(text)[1:]]


def accuracy_csv(rows: list[tuple], path=None) -> str:
    body = [[m, t, _num(a)] for m, t, a in rows]
    return _emit([["model", "task", "accuracy"]] + body, path)


def parse_accuracy_csv(text: str) -> list[tuple]:
    return [(m, t, float(a)) for m, t, a in _rows(text)[1:]]


# ---------------------------------------------------------------- loss curves

def loss_curve_csv(history: list[dict], path=None) -> str:
    if not history:
        return _emit([["step", "epoch", "total"]], path)
    keys = list(history[0].keys())
    body = [[str(int(r[k])) if k in ("step", "epoch") else _num(r[k]) for k in keys]
            for r in history]
    return _emit([keys] + body, path)


def parse_loss_curve_csv(text: str) -> list[dict]:
    rows = _rows(text)
    keys = rows[0]
    return [{k: int(v) if k in ("step", "epoch") else float(v) for k, v in zip(keys, r)}
            for r in rows[1:]]


# ---------------------------------------------------------------- run export

def routing_csvs(data: dict, out_dir) -> list[str]:
    """One heatmap CSV per layer and row kind from a ``routing.json`` payload."""
    written = []
    for layer, tables in data["layers"].items():
        for kind in ("class", "cluster"):
            if tables.get(kind) is None:
                continue
            path = os.path.join(os.fspath(out_dir), f"routing_layer{layer}_{kind}.csv")
            M = np.asarray(tables[kind], dtype=np.float64)
            heatmap_csv(Heatmap(kind, list(range(len(M))), M), path)
            written.append(path)
    return written


def export_reports(run_dir, out_dir=None) -> list[str]:
    """Collect a run directory's JSON results into the CSV reports.

    Expects ``routing.json``, ``psnr.json`` and/or ``accuracy.json`` as
    written by the command-line tool; any artifact named in
    ``run_dir/manifest.json`` under ``"outputs"`` that is missing raises
    :class:`ReportError`.
    """
    run_dir = os.fspath(run_dir)
    out_dir = os.fspath(out_dir or run_dir)
    manifest = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(manifest):
        raise ReportError(f"missing artifact: {manifest}")
    with open(manifest) as fh:
        outputs = json.load(fh).get("outputs", [])
    for name in outputs:
        if not os.path.exists(os.path.join(run_dir, name)):
            raise ReportError(f"missing artifact: {os.path.join(run_dir, name)}")
    written = []
    routing = os.path.join(run_dir, "routing.json")
    if os.path.exists(routing):
        with open(routing) as fh:
            written += routing_csvs(json.load(fh), out_dir)
    psnr_path = os.path.join(run_dir, "psnr.json")
    if os.path.exists(psnr_path):
        with open(psnr_path) as fh:
            data = json.load(fh)
        values = {(r["model"], r["task"]): r["psnr"] for r in data["rows"]}
        path = os.path.join(out_dir, "psnr.csv")
        psnr_csv(psnr_rows(values, data.get("dense_model", "dense_full")), path)
        written.append(path)
    acc_path = os.path.join(run_dir, "accuracy.json")
    if os.path.exists(acc_path):
        with open(acc_path) as fh:
            data = json.load(fh)
        path = os.path.join(out_dir, "accuracy.csv")
        accuracy_csv([(r["model"], r["task"], r["accuracy"]) for r in data["rows"]], path)
        written.append(path)
    if not written:
        raise ReportError(f"no routing.json, psnr.json or accuracy.json in {run_dir}")
    return written
