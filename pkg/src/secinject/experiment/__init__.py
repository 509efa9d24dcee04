from .dataset import Dataset, Sample, SplitSpec, load_dataset, split_counts, split_dataset
from .grid import (
    BASELINE,
    DEFENSES,
    Classifier,
    GistKnnClassifier,
    GridResult,
    ScenarioReport,
    ScenarioSpec,
    run_grid,
)
from .metrics import confusion_matrix, pr_curve, precision_recall
from .reports import read_grid_csv, write_reports
from .synth import build_pe, synth_corpus

__all__ = [
    "BASELINE", "DEFENSES", "Classifier", "Dataset", "GistKnnClassifier", "GridResult",
    "Sample", "ScenarioReport", "ScenarioSpec", "SplitSpec", "build_pe", "confusion_matrix",
    "load_dataset", "pr_curve", "precision_recall", "read_grid_csv", "run_grid",
    "split_counts", "split_dataset", "synth_corpus", "write_reports",
]
