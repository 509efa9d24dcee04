"""Attack/defense scenario grid.

Each repetition draws a fresh stratified split, builds a gallery from
train+validation (optionally augmented), and scores the test set once
unmodified (cell (0, 0)) and once per (m, n) injection cell. A
(repetition, cell) pair is the unit of work and of checkpointing; its
randomness derives from (seed, repetition, m, n, sample id) only, so units
can run in any order or process.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .._rng import derive_rng
from ..classify import GIST_DIM, KnnIndex, Prediction, gist_descriptor, knn_classify
from ..errors import PeFormatError, SecInjectError, TooFewSections
from ..imaging import bytes_to_image, resize_bilinear, width_for_size
from ..injector import (
    InjectionConfig,
    PayloadKind,
    inject_sections,
    reorder_sections,
    strip_header,
)
from ..pe_core import PeFile, parse_pe, serialize_pe
from .dataset import Dataset, Sample, SplitSpec, split_dataset
from .metrics import Confusion, PrCurve, confusion_matrix, precision_recall

log = logging.getLogger(__name__)

DEFENSES = ("none", "reorder", "inject", "reorder+inject")
PAYLOADS = ("random", "adversarial")
BASELINE = (0, 0)


class Classifier(Protocol):
    """Anything that learns from raw file bytes and returns Predictions."""

    def fit(self, samples: Sequence[bytes], labels: Sequence[str]) -> None: ...

    def predict(self, samples: Sequence[bytes]) -> list[Prediction]: ...


class GistKnnClassifier:
    """Render bytes to an image, resize to 64x64, GIST, then K-NN."""

    def __init__(self, k: int = 3, image_size: int = 64):
        self.k = k
        self.image_size = image_size
        self.index = KnnIndex()

    def image(self, data: bytes):
        width = width_for_size(max(len(data), 1))
        if len(data) < width:
            data = data + bytes(width - len(data))
        return resize_bilinear(bytes_to_image(data), self.image_size, self.image_size)

    def features(self, samples: Sequence[bytes]) -> np.ndarray:
        # one image at a time: batching the filter bank is memory-bound and slower
        out = np.zeros((len(samples), GIST_DIM))
        for i, s in enumerate(samples):
            out[i] = gist_descriptor(self.image(s))
        return out

    def fit(self, samples, labels):
        self.index = KnnIndex.build(self.features(samples), labels)

    def predict(self, samples):
        return [knn_classify(self.index, f, self.k) for f in self.features(samples)]


@dataclass(frozen=True)
class ScenarioSpec:
    m_values: tuple[int, ...] = (1, 2, 3, 4, 5)
    n_values: tuple[int, ...] = (1, 2, 3, 4, 5)
    payload: str = "random"
    defense: str = "none"
    headerless: bool = False
    repetitions: int = 3
    seed: int = 0
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    # injection strength used for INJECT augmentation of the gallery
    augment_m: int = 5
    augment_n: int = 5
    k: int = 3

    def __post_init__(self):
        object.__setattr__(self, "m_values", tuple(int(v) for v in self.m_values))
        object.__setattr__(self, "n_values", tuple(int(v) for v in self.n_values))
        object.__setattr__(self, "split", tuple(float(v) for v in self.split))
        if self.payload not in PAYLOADS:
            raise ValueError(f"payload must be one of {PAYLOADS}")
        if self.defense not in DEFENSES:
            raise ValueError(f"defense must be one of {DEFENSES}")
        if any(v < 1 for v in self.m_values + self.n_values):
            raise ValueError("m and n values must be positive")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        SplitSpec(*self.split)

    def cells(self) -> list[tuple[int, int]]:
        return [BASELINE] + [(m, n) for m in self.m_values for n in self.n_values]

    @property
    def tag(self) -> str:
        defense = self.defense.replace("+", "-")
        return f"{self.payload}_{defense}_{'headerless' if self.headerless else 'full'}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["m_values"] = list(self.m_values)
        d["n_values"] = list(self.n_values)
        d["split"] = list(self.split)
        return d


def rep_split_seed(seed: int, rep: int) -> int:
    return int(derive_rng("split-seed", seed, rep).integers(2 ** 63))


@lru_cache(maxsize=4096)
def _load(path: str) -> tuple[bytes, PeFile]:
    with open(path, "rb") as fh:
        data = fh.read()
    return data, parse_pe(data)


def _render_bytes(pe: PeFile, headerless: bool) -> bytes:
    return strip_header(pe) if headerless else serialize_pe(pe)


@dataclass
class UnitResult:
    rep: int
    m: int
    n: int
    labels: list[str]
    ids: list[str]
    truth: list[str]
    predicted: list[str]
    scores: list[list[float]]      # per sample, aligned with ``labels``
    events: list[dict] = field(default_factory=list)
    audit: list[dict] = field(default_factory=list)

    def score_dicts(self) -> list[dict]:
        return [dict(zip(self.labels, row)) for row in self.scores]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "UnitResult":
        return cls(**json.loads(text))


@dataclass
class RepContext:
    """Everything a worker needs to evaluate cells of one repetition."""
    spec: ScenarioSpec
    rep: int
    labels: list[str]
    train: list[Sample]
    test: list[Sample]
    classifier: object
    gallery_size: int


def _event(rep, m, n, sample_id, kind, exc=None, **extra) -> dict:
    ev = {"rep": rep, "m": m, "n": n, "sample": sample_id, "event": kind}
    if exc is not None:
        ev["error"] = type(exc).__name__
        ev["message"] = str(exc)
    ev.update(extra)
    return ev


def _pick_donor(ctx: RepContext, victim: Sample, rng) -> Sample | None:
    by_fam: dict[str, list[Sample]] = {}
    for s in ctx.train:
        if s.family != victim.family:
            by_fam.setdefault(s.family, []).append(s)
    if not by_fam:
        return None
    fams = sorted(by_fam)
    fam = fams[int(rng.integers(len(fams)))]
    pool = sorted(by_fam[fam], key=lambda s: s.id)
    return pool[int(rng.integers(len(pool)))]


def evaluate_unit(ctx: RepContext, m: int, n: int) -> UnitResult:
    spec = ctx.spec
    rep = ctx.rep
    events, audit, blobs = [], [], []
    for sample in ctx.test:
        _, pe = _load(sample.path)
        if (m, n) == BASELINE:
            blobs.append(_render_bytes(pe, spec.headerless))
            continue
        rng = derive_rng("attack", spec.seed, rep, m, n, sample.id)
        payload = PayloadKind.random()
        donor_id = None
        try:
            if spec.payload == "adversarial":
                donor = _pick_donor(ctx, sample, rng)
                if donor is None:
                    raise SecInjectError("no donor family available")
                donor_id = donor.id
                payload = PayloadKind.adversarial(strip_header(_load(donor.path)[1]), donor.family)
            cfg = InjectionConfig(m, n, payload, spec.seed)
            injected, record = inject_sections(pe, cfg, sample.family, rng=rng)
        except SecInjectError as exc:
            log.warning("injection failed for %s at (%d,%d): %s", sample.id, m, n, exc)
            events.append(_event(rep, m, n, sample.id, "injection_failed_scored_unmodified", exc))
            blobs.append(_render_bytes(pe, spec.headerless))
            continue
        audit.append({"rep": rep, "m": m, "n": n, "sample": sample.id, "donor": donor_id,
                      "record": record.to_dict()})
        blobs.append(_render_bytes(injected, spec.headerless))

    preds = ctx.classifier.predict(blobs)
    return UnitResult(
        rep=rep, m=m, n=n, labels=list(ctx.labels),
        ids=[s.id for s in ctx.test],
        truth=[s.family for s in ctx.test],
        predicted=[p.label for p in preds],
        scores=[[float(p.scores.get(lab, 0.0)) for lab in ctx.labels] for p in preds],
        events=events, audit=audit,
    )


def _evaluate_unit_star(args):
    return evaluate_unit(*args)


def build_gallery(spec: ScenarioSpec, rep: int, gallery: list[Sample]):
    """Gallery blobs and labels, with defense augmentation; returns events too."""
    blobs, labels, events = [], [], []
    reorder = spec.defense in ("reorder", "reorder+inject")
    augment = spec.defense in ("inject", "reorder+inject")
    for s in gallery:
        _, pe = _load(s.path)
        blobs.append(_render_bytes(pe, spec.headerless))
        labels.append(s.family)
        if reorder:
            try:
                shuffled = reorder_sections(pe, derive_rng("reorder", spec.seed, rep, s.id))
            except TooFewSections as exc:
                events.append(_event(rep, None, None, s.id, "reorder_skipped_copied", exc))
                shuffled = pe
            blobs.append(_render_bytes(shuffled, spec.headerless))
            labels.append(s.family)
        if augment:
            cfg = InjectionConfig(spec.augment_m, spec.augment_n, PayloadKind.random(), spec.seed)
            try:
                aug, _ = inject_sections(pe, cfg, s.family,
                                         rng=derive_rng("augment", spec.seed, rep, s.id))
            except SecInjectError as exc:
                events.append(_event(rep, None, None, s.id, "augment_failed_copied", exc))
                aug = pe
            blobs.append(_render_bytes(aug, spec.headerless))
            labels.append(s.family)
    return blobs, labels, events


@dataclass
class ScenarioReport:
    m: int
    n: int
    labels: list[str]
    units: list[UnitResult]
    confusions: list[Confusion]
    curves: dict[str, PrCurve]
    macro_ap: float

    @property
    def accuracies(self) -> list[float]:
        return [c.accuracy for c in self.confusions]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def per_family_ap(self) -> dict[str, float]:
        return {lab: c.average_precision for lab, c in self.curves.items()}

    @property
    def pooled_confusion(self) -> np.ndarray:
        return sum(c.counts for c in self.confusions)


def aggregate_cell(m: int, n: int, labels: list[str], units: list[UnitResult]) -> ScenarioReport:
    units = sorted(units, key=lambda u: u.rep)
    confusions = [confusion_matrix(u.truth, u.predicted, labels) for u in units]
    ids, truth, scores = [], [], []
    for u in units:
        ids += [f"r{u.rep}:{i}" for i in u.ids]
        truth += u.truth
        scores += u.score_dicts()
    curves, macro = precision_recall(scores, truth, ids, labels)
    return ScenarioReport(m, n, list(labels), units, confusions, curves, macro)


@dataclass
class GridResult:
    spec: ScenarioSpec
    labels: list[str]
    reports: dict[tuple[int, int], ScenarioReport]
    excluded: list[dict]
    events: list[dict]
    gallery_sizes: list[int]

    @property
    def baseline(self) -> ScenarioReport:
        return self.reports[BASELINE]

    def cell(self, m: int, n: int) -> ScenarioReport:
        return self.reports[(m, n)]


def _parseable(ds: Dataset) -> tuple[Dataset, list[dict]]:
    keep, excluded = [], []
    for s in ds:
        try:
            _load(s.path)
        except (PeFormatError, OSError) as exc:
            log.warning("excluding %s: %s", s.id, exc)
            excluded.append({"sample": s.id, "error": type(exc).__name__, "message": str(exc)})
            continue
        keep.append(s)
    return ds.subset(keep), excluded


def run_key(ds: Dataset, spec: ScenarioSpec) -> str:
    """Short digest of everything a unit result depends on; checkpoints
    from a different spec or corpus are never reused."""
    h = hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode())
    for s in sorted(ds, key=lambda s: s.id):
        h.update(f"{s.id}\0{s.family}\0{s.size}\n".encode())
    return h.hexdigest()[:12]


def _checkpoint_path(root: Path, key: str, spec: ScenarioSpec, rep: int, m: int, n: int) -> Path:
    return root / f"{spec.tag}_{key}" / f"r{rep}_m{m}_n{n}.json"


def run_grid(ds: Dataset, spec: ScenarioSpec,
             classifier_factory: Callable[[], Classifier] | None = None,
             checkpoint_dir=None, jobs: int = 1) -> GridResult:
    """Run every (repetition, cell) unit of ``spec`` over ``ds``.

    With ``checkpoint_dir`` each finished unit is stored as JSON and reused
    on the next call, so an interrupted grid resumes where it stopped.
    """
    if classifier_factory is None:
        classifier_factory = lambda: GistKnnClassifier(k=spec.k)  # noqa: E731
    ds, excluded = _parseable(ds)
    labels = ds.families
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    key = run_key(ds, spec)
    if ckpt is not None:
        (ckpt / f"{spec.tag}_{key}").mkdir(parents=True, exist_ok=True)

    cells = spec.cells()
    units: dict[tuple[int, int], list[UnitResult]] = {c: [] for c in cells}
    events: list[dict] = []
    gallery_sizes: list[int] = []
    for rep in range(spec.repetitions):
        split = SplitSpec(*spec.split, seed=rep_split_seed(spec.seed, rep))
        train, val, test = split_dataset(ds, split)
        gallery = sorted(list(train) + list(val), key=lambda s: s.id)
        test_samples = sorted(test, key=lambda s: s.id)

        todo = []
        for m, n in cells:
            path = _checkpoint_path(ckpt, key, spec, rep, m, n) if ckpt else None
            if path is not None and path.exists():
                units[(m, n)].append(UnitResult.from_json(path.read_text()))
            else:
                todo.append((m, n))

        blobs, gal_labels, gal_events = build_gallery(spec, rep, gallery)
        events += gal_events
        gallery_sizes.append(len(blobs))
        if not todo:
            continue
        clf = classifier_factory()
        clf.fit(blobs, gal_labels)
        ctx = RepContext(spec, rep, labels, sorted(train, key=lambda s: s.id),
                         test_samples, clf, len(blobs))
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_evaluate_unit_star, [(ctx, m, n) for m, n in todo]))
        else:
            results = [evaluate_unit(ctx, m, n) for m, n in todo]
        for res in results:
            units[(res.m, res.n)].append(res)
            if ckpt is not None:
                path = _checkpoint_path(ckpt, key, spec, rep, res.m, res.n)
                tmp = path.with_suffix(".tmp")
                tmp.write_text(res.to_json())
                os.replace(tmp, path)
        log.info("repetition %d done (%d units)", rep, len(results))

    reports = {c: aggregate_cell(c[0], c[1], labels, units[c]) for c in cells}
    for c in cells:
        for u in reports[c].units:
            events += u.events
    return GridResult(spec, labels, reports, excluded, events, gallery_sizes)
