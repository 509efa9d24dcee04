"""Command-line entry point.

Exit codes: 0 success, 1 other toolkit error, 2 unreadable or unparseable
input, 3 insufficient header slack, 4 bad arguments. Errors are reported on
stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import struct
import sys
from pathlib import Path

from . import __version__
from .classify import KnnIndex, export_csv, load_gallery, save_gallery
from .errors import InsufficientHeaderSlack, PeFormatError, SecInjectError
from .imaging import bytes_to_image, resize_bilinear, write_pgm
from .injector import InjectionConfig, PayloadKind, inject_sections, strip_header
from .pe_core import parse_pe, serialize_pe, validate

log = logging.getLogger("secinject")

OUTPUT_ROOT_ENV = "SECINJECT_OUTPUT_ROOT"
EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_SLACK, EXIT_ARGS = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or ".")


def _out_path(p) -> Path:
    """Relative output paths land under the output root override."""
    p = Path(p)
    return p if p.is_absolute() else output_root() / p


def _in_path(p) -> Path:
    p = Path(p)
    if p.is_absolute() or p.exists():
        return p
    alt = output_root() / p
    return alt if alt.exists() else p


def _read_input(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise InputUnavailable(f"cannot read {path}: {exc.strerror or exc}") from exc


class InputUnavailable(Exception):
    pass


def _write_config(args: argparse.Namespace, path: Path, resolved: dict | None = None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    cfg["version"] = __version__
    if resolved:
        cfg["resolved"] = resolved
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _grid_arg(text: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        a, b = int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MxN, got {text!r}")
    if a < 1 or b < 1:
        raise argparse.ArgumentTypeError("grid bounds must be positive")
    return a, b


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


# -- subcommands ------------------------------------------------------------------

def cmd_inject(args) -> int:
    data = _read_input(args.input)
    pe = parse_pe(data)
    if args.payload == "adversarial":
        if not args.donor:
            raise UsageError("--payload adversarial requires --donor")
        donor_raw = _read_input(args.donor)
        try:
            donor = strip_header(parse_pe(donor_raw)) or donor_raw
        except PeFormatError:
            donor = donor_raw
        payload = PayloadKind.adversarial(donor, args.donor_family)
    else:
        payload = PayloadKind.random()
    try:
        cfg = InjectionConfig(args.m, args.n, payload, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc))
    out_pe, record = inject_sections(pe, cfg, args.victim_family)
    out = _out_path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(serialize_pe(out_pe))
    rec = record.to_dict()
    rec["validation"] = validate(out_pe).to_records()
    Path(str(out) + ".record.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    _write_config(args, Path(str(out) + ".config.json"))
    print(json.dumps({"output": str(out), "sections_added": len(record.sections),
                      "bytes_added": len(serialize_pe(out_pe)) - len(data)}))
    return EXIT_OK


def cmd_render(args) -> int:
    data = _read_input(args.input)
    img = bytes_to_image(data)
    if args.resize:
        img = resize_bilinear(img, args.resize, args.resize)
    out = _out_path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(img, out)
    _write_config(args, Path(str(out) + ".config.json"))
    print(json.dumps({"output": str(out), "width": img.width, "height": img.height}))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .experiment import synth_corpus
    out = _out_path(args.output)
    if args.families < 2 or args.per_family < 3:
        raise UsageError("synth needs --families >= 2 and --per-family >= 3")
    ds = synth_corpus(out, args.families, args.per_family, args.seed)
    _write_config(args, out / "synth_config.json")
    print(json.dumps({"output": str(out), "samples": len(ds), "families": len(ds.families)}))
    return EXIT_OK


def _dataset(path):
    from .experiment import load_dataset
    from .errors import NoFamiliesFound
    try:
        return load_dataset(_in_path(path))
    except NoFamiliesFound as exc:
        raise InputUnavailable(str(exc)) from exc


def cmd_index(args) -> int:
    from .experiment import GistKnnClassifier, SplitSpec, split_dataset
    ds = _dataset(args.data)
    samples = list(ds)
    if args.train_only:
        train, val, _ = split_dataset(ds, SplitSpec(seed=args.seed))
        samples = sorted(list(train) + list(val), key=lambda s: s.id)
    blobs, labels = [], []
    for s in samples:
        data = s.read()
        if args.headerless:
            try:
                data = strip_header(parse_pe(data))
            except PeFormatError as exc:
                log.warning("skipping %s: %s", s.id, exc)
                continue
        blobs.append(data)
        labels.append(s.family)
    clf = GistKnnClassifier()
    index = KnnIndex.build(clf.features(blobs), labels)
    out = _out_path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_gallery(index, out)
    if args.csv:
        export_csv(index, _out_path(args.csv))
    _write_config(args, Path(str(out) + ".config.json"))
    print(json.dumps({"output": str(out), "entries": len(index), "families": index.classes}))
    return EXIT_OK


def cmd_classify(args) -> int:
    from .experiment import GistKnnClassifier
    try:
        index = load_gallery(_in_path(args.gallery))
    except (OSError, ValueError, struct.error) as exc:
        raise InputUnavailable(f"cannot read gallery: {exc}") from exc
    data = _read_input(args.input)
    if args.headerless:
        data = strip_header(parse_pe(data))
    clf = GistKnnClassifier(k=args.k)
    clf.index = index
    pred = clf.predict([data])[0]
    doc = {"input": str(args.input), "label": pred.label, "scores": pred.scores}
    if args.output:
        out = _out_path(args.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        _write_config(args, Path(str(out) + ".config.json"))
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .experiment import ScenarioSpec, run_grid, write_reports
    if args.m_values is not None or args.n_values is not None:
        m_vals = args.m_values or [1, 2, 3, 4, 5]
        n_vals = args.n_values or [1, 2, 3, 4, 5]
    else:
        gm, gn = args.grid
        m_vals, n_vals = list(range(1, gm + 1)), list(range(1, gn + 1))
    try:
        spec = ScenarioSpec(
            m_values=m_vals, n_values=n_vals, payload=args.payload, defense=args.defense,
            headerless=args.headerless, repetitions=args.reps, seed=args.seed,
            augment_m=args.augment[0], augment_n=args.augment[1], k=args.k,
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    ds = _dataset(args.data)
    out = _out_path(args.output)
    ckpt = None if args.no_checkpoint else out / "checkpoints"
    result = run_grid(ds, spec, checkpoint_dir=ckpt, jobs=args.jobs)
    write_reports(result, out, extra_config={"gallery_sizes": result.gallery_sizes})
    _write_config(args, out / f"{spec.tag}_evaluate_config.json",
                  {"scenario": spec.to_dict(), "gallery_sizes": result.gallery_sizes})
    summary = {
        "output": str(out),
        "tag": spec.tag,
        "cells": len(result.reports),
        "repetitions": spec.repetitions,
        "gallery_size_per_repetition": result.gallery_sizes,
        "baseline_accuracy": result.baseline.mean_accuracy,
    }
    print(json.dumps(summary))
    return EXIT_OK


def _format_table(grid: dict) -> str:
    ms = sorted({m for m, _ in grid if m})
    ns = sorted({n for _, n in grid if n})
    mean = {k: sum(v) / len(v) for k, v in grid.items()}
    lines = []
    if (0, 0) in mean:
        lines.append(f"baseline (0,0): {mean[(0, 0)]:.4f}")
    lines.append("m\\n " + " ".join(f"{n:>8d}" for n in ns))
    for m in ms:
        cells = [f"{mean[(m, n)]:8.4f}" if (m, n) in mean else " " * 8 for n in ns]
        lines.append(f"{m:<3d} " + " ".join(cells))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    from .experiment import read_grid_csv
    from .plot import line_chart, write_ppm
    src = _in_path(args.input)
    grids = sorted(src.glob("*_grid.csv"))
    if not grids:
        raise InputUnavailable(f"no *_grid.csv files under {src}")
    out = _out_path(args.output) if args.output else src
    out.mkdir(parents=True, exist_ok=True)
    for path in grids:
        tag = path.name[: -len("_grid.csv")]
        grid = read_grid_csv(path)
        table = _format_table(grid)
        (out / f"{tag}_table.txt").write_text(table)
        series: dict = {}
        for (m, n), accs in grid.items():
            if m:
                series.setdefault(f"m={m}", []).append((n, sum(accs) / len(accs)))
        base = grid.get((0, 0))
        write_ppm(line_chart(series, baseline=sum(base) / len(base) if base else None),
                  out / f"{tag}_accuracy.ppm")
        print(f"== {tag}")
        print(table, end="")
    _write_config(args, out / "report_config.json")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="secinject", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--config", help="re-run from a recorded *_config.json")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("inject", help="inject sections into a PE32 file")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--m", type=int, default=1, help="number of sections")
    s.add_argument("--n", type=int, default=1, help="size per section in FileAlignment units")
    s.add_argument("--payload", choices=["random", "adversarial"], default="random")
    s.add_argument("--donor", help="donor file for adversarial payloads")
    s.add_argument("--donor-family")
    s.add_argument("--victim-family")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_inject)

    s = sub.add_parser("render", help="render a file as a grayscale PGM")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--resize", type=int, default=None, help="square output size")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("synth", help="write a synthetic labeled corpus")
    s.add_argument("--families", type=int, default=5)
    s.add_argument("--per-family", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", dest="output", default="corpus")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("index", help="build and persist a GIST gallery")
    s.add_argument("--data", default="corpus")
    s.add_argument("--out", dest="output", default="gallery.bin")
    s.add_argument("--csv", default=None, help="also export descriptors as CSV")
    s.add_argument("--train-only", action="store_true", help="index only train+validation")
    s.add_argument("--headerless", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("classify", help="classify one file against a gallery")
    s.add_argument("--gallery", default="gallery.bin")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--headerless", action="store_true")
    s.add_argument("--out", dest="output", default=None)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("evaluate", help="run the injection scenario grid")
    s.add_argument("--data", default="corpus")
    s.add_argument("--out", dest="output", default="reports")
    s.add_argument("--grid", type=_grid_arg, default=(5, 5), help="MxN: m in 1..M, n in 1..N")
    s.add_argument("--m-values", type=_int_list, default=None)
    s.add_argument("--n-values", type=_int_list, default=None)
    s.add_argument("--reps", type=int, default=3)
    s.add_argument("--payload", choices=["random", "adversarial"], default="random")
    s.add_argument("--defense", choices=["none", "reorder", "inject", "reorder+inject"], default="none")
    s.add_argument("--augment", type=_grid_arg, default=(5, 5), help="MxN used for inject augmentation")
    s.add_argument("--headerless", action="store_true")
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--no-checkpoint", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="tables and plots from stored grid CSVs")
    s.add_argument("--in", dest="input", default="reports")
    s.add_argument("--out", dest="output", default=None)
    s.set_defaults(func=cmd_report)
    return p


def _namespace_from_config(parser, path) -> argparse.Namespace:
    cfg = json.loads(Path(path).read_text())
    command = cfg.get("command")
    if not command:
        raise UsageError(f"{path} has no 'command'")
    ns = parser.parse_args([command] + _required_stub(command))
    for key, value in cfg.items():
        if key in ("version", "resolved"):
            continue
        if isinstance(value, list) and key in ("grid", "augment"):
            value = tuple(value)
        setattr(ns, key, value)
    ns.config = None
    return ns


def _required_stub(command):
    # placeholders for required flags; overwritten from the config file
    return {"inject": ["--in", "-", "--out", "-"], "render": ["--in", "-", "--out", "-"],
            "classify": ["--in", "-"]}.get(command, [])


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            args = _namespace_from_config(parser, args.config)
        if not args.command:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_ARGS, exc)
    except (InputUnavailable, PeFormatError) as exc:
        return _fail(EXIT_INPUT, exc)
    except InsufficientHeaderSlack as exc:
        return _fail(EXIT_SLACK, exc)
    except SecInjectError as exc:
        return _fail(EXIT_ERROR, exc)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(EXIT_INPUT, exc)


if __name__ == "__main__":
    sys.exit(main())
