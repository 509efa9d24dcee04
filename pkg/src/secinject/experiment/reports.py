"""Report files for a finished grid.

All outputs are deterministic functions of the GridResult: no timestamps,
stable key order, floats written with repr.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .grid import BASELINE, GridResult


def _fmt(x: float) -> str:
    return repr(float(x))


def write_reports(result: GridResult, out_dir, extra_config: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = result.spec.tag
    labels = result.labels
    written = []

    grid_path = out / f"{tag}_grid.csv"
    with open(grid_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "n", "repetition", "accuracy"])
        for (m, n), rep in result.reports.items():
            for u, acc in zip(rep.units, rep.accuracies):
                w.writerow([m, n, u.rep, _fmt(acc)])
    written.append(grid_path)

    for (m, n), rep in result.reports.items():
        cm_path = out / f"{tag}_confusion_m{m}_n{n}.csv"
        with open(cm_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repetition", "family"] + labels)
            for u, conf in zip(rep.units, rep.confusions):
                for lab, row in zip(conf.labels, conf.counts):
                    w.writerow([u.rep, lab] + [int(v) for v in row])
        written.append(cm_path)

        pr_path = out / f"{tag}_pr_m{m}_n{n}.csv"
        with open(pr_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["family", "recall", "precision"])
            for lab, curve in rep.curves.items():
                for r, p in zip(curve.recall, curve.precision):
                    w.writerow([lab, _fmt(r), _fmt(p)])
        written.append(pr_path)

    cells = {}
    for (m, n), rep in result.reports.items():
        cells[f"{m},{n}"] = {
            "m": m,
            "n": n,
            "mean_accuracy": rep.mean_accuracy,
            "accuracy_per_repetition": rep.accuracies,
            "macro_ap": rep.macro_ap,
            "per_family_ap": rep.per_family_ap,
            "scored_per_repetition": [len(u.ids) for u in rep.units],
        }
    dispersion = None
    if (4, 1) in result.reports and (1, 4) in result.reports:
        dispersion = {
            "note": "same injected byte total, different dispersion",
            "m4_n1_mean_accuracy": result.reports[(4, 1)].mean_accuracy,
            "m1_n4_mean_accuracy": result.reports[(1, 4)].mean_accuracy,
        }
    audit = [a for rep in result.reports.values() for u in rep.units for a in u.audit]
    config = result.spec.to_dict()
    config["augmentation_cell"] = [result.spec.augment_m, result.spec.augment_n] \
        if result.spec.defense in ("inject", "reorder+inject") else None
    if extra_config:
        config.update(extra_config)
    summary = {
        "config": config,
        "families": labels,
        "gallery_size_per_repetition": result.gallery_sizes,
        "baseline_cell": list(BASELINE),
        "cells": cells,
        "dispersion_comparison": dispersion,
        "excluded_samples": result.excluded,
        "events": result.events,
        "injection_audit": audit,
    }
    summary_path = out / f"{tag}_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    written.append(summary_path)
    return written


def read_grid_csv(path) -> dict[tuple[int, int], list[float]]:
    out: dict[tuple[int, int], list[float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault((int(row["m"]), int(row["n"])), []).append(float(row["accuracy"]))
    return out
