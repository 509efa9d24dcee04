"""Synthetic PE32 files and a desk-scale labeled corpus.

Real malware corpora cannot ship with the package, so experiments run on
generated executables whose families differ only in the byte textures of
their sections. Every generated file is strictly aligned and leaves room
for at least ten extra section headers.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .._rng import derive_rng
from ..pe_core import SECTION_HEADER_SIZE, align_up
from .dataset import Dataset, Sample

log = logging.getLogger(__name__)

E_LFANEW = 0x80
OPTIONAL_HEADER_SIZE = 224
MIN_SLACK = 10 * SECTION_HEADER_SIZE

_DOS_STUB = b"This program cannot be run in DOS mode.\r\r\n$"
_DEFAULT_NAMES = (b".text", b".rdata", b".data", b".rsrc", b".reloc", b".tls", b".idata", b".pdata")
_CODE = 0x60000020
_RDATA = 0x40000040
_DATA = 0xC0000040


def build_pe(payloads, file_alignment: int = 512, section_alignment: int = 0x1000,
             overlay: bytes = b"", size_of_headers: int | None = None,
             names=None, timestamp: int = 0) -> bytes:
    """Minimal, loader-conformant PE32 image holding ``payloads`` as sections.

    Raw data is laid out back to back after the headers; each payload is
    zero-padded to FileAlignment and mapped at consecutive SectionAlignment
    boundaries starting at one alignment unit.
    """
    payloads = [bytes(p) for p in payloads]
    if not payloads:
        raise ValueError("need at least one section")
    n = len(payloads)
    table_off = E_LFANEW + 4 + 20 + OPTIONAL_HEADER_SIZE
    table_end = table_off + SECTION_HEADER_SIZE * n
    if size_of_headers is None:
        size_of_headers = align_up(table_end + MIN_SLACK, file_alignment)
    if size_of_headers < table_end or size_of_headers % file_alignment:
        raise ValueError("size_of_headers must cover the section table and be file-aligned")
    names = names or [_DEFAULT_NAMES[i % len(_DEFAULT_NAMES)] for i in range(n)]

    sections = []
    ptr = size_of_headers
    va = section_alignment
    for i, data in enumerate(payloads):
        raw_size = align_up(len(data), file_alignment)
        vsize = max(len(data), 1)
        chars = _CODE if i == 0 else (_RDATA if i % 2 else _DATA)
        sections.append((names[i].ljust(8, b"\0")[:8], vsize, va, raw_size if data else 0,
                         ptr if data else 0, chars))
        ptr += raw_size
        va += align_up(vsize, section_alignment)
    size_of_image = va

    code_size = sections[0][3]
    init_size = sum(s[3] for s in sections[1:])
    dos = bytearray(E_LFANEW)
    dos[0:2] = b"MZ"
    struct.pack_into("<H", dos, 2, 0x90)
    struct.pack_into("<I", dos, 0x3C, E_LFANEW)
    dos[0x4E:0x4E + len(_DOS_STUB)] = _DOS_STUB

    coff = struct.pack("<HHIIIHH", 0x014C, n, timestamp, 0, 0, OPTIONAL_HEADER_SIZE, 0x0102)
    opt = struct.pack(
        "<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII",
        0x10B, 14, 0, code_size, init_size, 0,
        sections[0][2], sections[0][2], sections[1][2] if n > 1 else 0,
        0x00400000, section_alignment, file_alignment,
        6, 0, 0, 0, 6, 0, 0,
        size_of_image, size_of_headers, 0, 2, 0,
        0x100000, 0x1000, 0x100000, 0x1000, 0, 16,
    ) + bytes(16 * 8)
    assert len(opt) == OPTIONAL_HEADER_SIZE

    out = bytearray(dos + b"PE\0\0" + coff + opt)
    for name, vsize, sva, raw_size, sptr, chars in sections:
        out += struct.pack("<8sIIIIIIHHI", name, vsize, sva, raw_size, sptr, 0, 0, 0, 0, chars)
    out += bytes(size_of_headers - len(out))
    for data, sec in zip(payloads, sections):
        if data:
            out += data + bytes(sec[3] - len(data))
    out += overlay
    return bytes(out)


@dataclass(frozen=True)
class FamilyStyle:
    """Generative parameters of one synthetic family."""
    name: str
    section_blocks: tuple[int, ...]   # raw size of each section in 512-byte blocks
    periods: tuple[int, ...]
    patterns: tuple[bytes, ...]
    noise: float
    jitter: int


def family_styles(families: int, seed: int) -> list[FamilyStyle]:
    styles = []
    for f in range(families):
        rng = derive_rng("synth-family", seed, f)
        n_sec = 1 + f % 3
        total = int(rng.integers(26, 44))
        cuts = np.sort(rng.choice(np.arange(4, total - 3), size=n_sec - 1, replace=False)) if n_sec > 1 else []
        bounds = [0, *[int(c) for c in cuts], total]
        blocks = tuple(b - a for a, b in zip(bounds, bounds[1:]))
        periods = tuple(int(rng.integers(3, 48)) for _ in range(n_sec))
        level = int(rng.integers(20, 236))
        spread = int(rng.integers(10, 90))
        patterns = tuple(
            bytes(np.clip(rng.normal(level, spread, size=p), 0, 255).astype(np.uint8).tolist())
            for p in periods
        )
        styles.append(FamilyStyle(
            name=f"family_{f:02d}",
            section_blocks=blocks,
            periods=periods,
            patterns=patterns,
            noise=float(rng.uniform(0.02, 0.12)),
            jitter=2,
        ))
    return styles


def family_sample(style: FamilyStyle, rng: np.random.Generator, block: int = 512) -> list[bytes]:
    """Section payloads for one member of ``style``'s family."""
    payloads = []
    for blocks, pattern in zip(style.section_blocks, style.patterns):
        nb = max(1, blocks + int(rng.integers(-style.jitter, style.jitter + 1)))
        size = nb * block
        pat = np.frombuffer(pattern, dtype=np.uint8)
        phase = int(rng.integers(len(pat)))
        data = np.resize(np.roll(pat, -phase), size).copy()
        mask = rng.random(size) < style.noise
        data[mask] = rng.integers(0, 256, size=int(mask.sum()), dtype=np.uint8)
        payloads.append(data.tobytes())
    return payloads


def synth_corpus(root, families: int = 5, per_family: int = 20, seed: int = 0) -> Dataset:
    """Write ``families`` x ``per_family`` synthetic executables under ``root``
    (one directory per family) and return them as a Dataset."""
    if families < 2:
        raise ValueError("need at least 2 families")
    if per_family < 3:
        raise ValueError("need at least 3 samples per family")
    root = Path(root)
    samples = []
    for style in family_styles(families, seed):
        fam_dir = root / style.name
        fam_dir.mkdir(parents=True, exist_ok=True)
        for j in range(per_family):
            rng = derive_rng("synth-sample", seed, style.name, j)
            data = build_pe(family_sample(style, rng), timestamp=int(rng.integers(2 ** 31)))
            path = fam_dir / f"sample_{j:04d}.exe"
            with open(path, "wb") as fh:
                fh.write(data)
            samples.append(Sample(f"{style.name}/{path.name}", style.name, str(path), len(data)))
    log.info("wrote %d synthetic samples to %s", len(samples), os.fspath(root))
    return Dataset(tuple(samples))
