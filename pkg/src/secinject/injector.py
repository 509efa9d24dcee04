"""Section injection, section reordering and header stripping.

Injection adds never-executed sections to a PE32 file: the new section header
is written into the slack after the section table, its raw data is spliced in
on disk (shifting later sections), and it is mapped past every existing
section in memory with VirtualSize 0, so the loaded image and execution path
are unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import derive_rng, file_identity
from .errors import (
    AdversarialDonorSameFamily,
    InsufficientHeaderSlack,
    InvalidAlignment,
    TooFewSections,
)
from .pe_core import (
    IMAGE_SCN_CNT_INITIALIZED_DATA,
    IMAGE_SCN_MEM_READ,
    SECTION_HEADER_SIZE,
    PeFile,
    SectionHeader,
    align_up,
    header_slack,
    is_power_of_two,
    serialize_pe,
    with_sections,
)

INJECTED_CHARACTERISTICS = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ
NAME_MIN, NAME_MAX = 33, 126


@dataclass(frozen=True)
class PayloadKind:
    kind: str = "random"
    donor: bytes | None = field(default=None, repr=False)
    donor_family: str | None = None

    def __post_init__(self):
        if self.kind not in ("random", "adversarial"):
            raise ValueError(f"unknown payload kind {self.kind!r}")
        if self.kind == "adversarial" and not self.donor:
            raise ValueError("adversarial payload needs a nonempty donor")

    @classmethod
    def random(cls) -> "PayloadKind":
        return cls("random")

    @classmethod
    def adversarial(cls, donor: bytes, donor_family: str | None = None) -> "PayloadKind":
        return cls("adversarial", bytes(donor), donor_family)


@dataclass(frozen=True)
class InjectionConfig:
    section_count: int = 1   # m
    size_multiplier: int = 1  # n
    payload: PayloadKind = PayloadKind()
    seed: int = 0

    def __post_init__(self):
        if self.section_count < 1:
            raise ValueError("section_count (m) must be >= 1")
        if self.size_multiplier < 1:
            raise ValueError("size_multiplier (n) must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")


@dataclass(frozen=True)
class InjectedSection:
    index: int
    name: bytes
    file_offset: int
    raw_size: int
    rva: int

    def to_dict(self) -> dict:
        return {"index": self.index, "name": self.name.decode("latin-1"),
                "file_offset": self.file_offset, "raw_size": self.raw_size, "rva": self.rva}


@dataclass(frozen=True)
class InjectionRecord:
    """Audit trail. Offsets are as of the moment each section was inserted;
    later insertions may shift earlier ones on disk."""
    sections: tuple[InjectedSection, ...]
    payload_kind: str = "random"
    donor_family: str | None = None

    @property
    def total_payload_bytes(self) -> int:
        return sum(s.raw_size for s in self.sections)

    def to_dict(self) -> dict:
        return {
            "payload_kind": self.payload_kind,
            "donor_family": self.donor_family,
            "total_payload_bytes": self.total_payload_bytes,
            "sections": [s.to_dict() for s in self.sections],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def compute_raw_size(n_bytes: int, file_alignment: int) -> int:
    """SizeOfRawData for ``n_bytes`` of payload: ceil(N / FA) * FA."""
    if n_bytes < 1 or file_alignment < 1:
        raise ValueError("N and FileAlignment must be >= 1")
    return -(-n_bytes // file_alignment) * file_alignment


def last_in_memory(pe: PeFile) -> int:
    """Index of the section with the largest VirtualAddress (ties: largest end)."""
    hs = pe.section_headers
    return max(range(len(hs)), key=lambda i: (hs[i].virtual_address,
                                              hs[i].virtual_address + hs[i].virtual_size))


def compute_virtual_address(pe: PeFile) -> int:
    """RVA for a new section: end of the last section in memory, rounded up
    to SectionAlignment."""
    last = pe.section_headers[last_in_memory(pe)]
    return align_up(last.virtual_address + last.virtual_size, pe.section_alignment)


def _append_offset(pe: PeFile) -> int:
    return align_up(pe.raw_end(), pe.file_alignment)


def _target_offset(pe: PeFile, k: int) -> int | None:
    """File offset the injected data would take when inserted at table index k.

    Mid-table insertion takes over the pointer of the displaced section. A
    purely virtual displaced section has no usable pointer, so the next
    physical section in table order stands in for it; with none left the
    data goes after the last raw region, like an append.
    """
    for s in pe.section_headers[k:]:
        if not s.is_virtual:
            return s.pointer_to_raw_data
    return None


def admissible_indices(pe: PeFile) -> list[int]:
    fa = pe.file_alignment
    out = []
    for k in range(pe.number_of_sections + 1):
        target = _target_offset(pe, k)
        if target is None or target % fa == 0:
            out.append(k)
    return out


def choose_insertion_index(pe: PeFile, rng: np.random.Generator) -> int:
    """Uniform draw over [0, NumberOfSections], restricted to positions that
    put the new data in front of a FileAlignment-conformant section."""
    adm = admissible_indices(pe)
    return adm[int(rng.integers(len(adm)))]


def make_section_name(rng: np.random.Generator) -> bytes:
    return bytes(rng.integers(NAME_MIN, NAME_MAX + 1, size=8, dtype=np.uint8).tolist())


def payload_random(length: int, rng: np.random.Generator) -> bytes:
    if length < 1:
        raise ValueError("payload length must be >= 1")
    return rng.bytes(length)


def payload_adversarial(donor: bytes, length: int, rng: np.random.Generator) -> bytes:
    """Contiguous chunk of ``donor`` starting at a uniform offset. Donors
    shorter than ``length`` are read cyclically."""
    if not donor:
        raise ValueError("donor must be nonempty")
    if length < 1:
        raise ValueError("payload length must be >= 1")
    if len(donor) >= length:
        off = int(rng.integers(len(donor) - length + 1))
        return bytes(donor[off:off + length])
    off = int(rng.integers(len(donor)))
    reps = -(-(off + length) // len(donor))
    return bytes((donor * reps)[off:off + length])


def _check_alignments(pe: PeFile):
    fa, sa = pe.file_alignment, pe.section_alignment
    if not (is_power_of_two(fa) and is_power_of_two(sa)) or sa < fa:
        raise InvalidAlignment(f"cannot inject with FileAlignment={fa}, SectionAlignment={sa}")


def usable_header_slack(pe: PeFile) -> int:
    """Zero bytes available for new section headers without moving data."""
    limit = min(header_slack(pe), len(pe.header_tail))
    tail = pe.header_tail[:limit]
    # only the leading run of zeros may be overwritten
    return limit - len(tail.lstrip(b"\0"))


def insert_section(pe: PeFile, k: int, name: bytes, payload: bytes) -> tuple[PeFile, InjectedSection]:
    """Single-section injection at table index ``k``. Payloads that are not
    a multiple of FileAlignment are zero-padded up to SizeOfRawData."""
    _check_alignments(pe)
    fa, sa = pe.file_alignment, pe.section_alignment
    if not payload:
        raise ValueError("payload must be nonempty")
    if usable_header_slack(pe) < SECTION_HEADER_SIZE:
        raise InsufficientHeaderSlack(f"no room for a section header (slack {usable_header_slack(pe)})")
    if not 0 <= k <= pe.number_of_sections:
        raise IndexError(k)

    raw_size = compute_raw_size(len(payload), fa)
    target = _target_offset(pe, k) if k < pe.number_of_sections else None
    pointer = _append_offset(pe) if target is None else target
    rva = compute_virtual_address(pe)

    headers = []
    for s in pe.section_headers:
        # shift everything at or after the insertion point on disk; virtual
        # sections keep their (possibly bogus) pointers untouched
        if not s.is_virtual and s.pointer_to_raw_data >= pointer:
            s = replace(s, pointer_to_raw_data=s.pointer_to_raw_data + raw_size)
        headers.append(s)
    new = SectionHeader(
        name=name,
        virtual_size=0,
        virtual_address=rva,
        size_of_raw_data=raw_size,
        pointer_to_raw_data=pointer,
        characteristics=INJECTED_CHARACTERISTICS,
    )
    headers.insert(k, new)
    data = list(pe.section_data)
    data.insert(k, bytes(payload) + bytes(raw_size - len(payload)))

    size_of_image = max(pe.optional_header.size_of_image,
                        align_up(rva + max(raw_size, sa), sa))
    out = with_sections(pe, headers, data)
    out = replace(
        out,
        optional_header=replace(out.optional_header, size_of_image=size_of_image),
        header_tail=pe.header_tail[SECTION_HEADER_SIZE:],
    )
    return out, InjectedSection(k, name, pointer, raw_size, rva)


def injection_rng(pe: PeFile, seed: int) -> np.random.Generator:
    return derive_rng("inject", seed, file_identity(serialize_pe(pe)))


def inject_sections(pe: PeFile, config: InjectionConfig, victim_family: str | None = None,
                    rng: np.random.Generator | None = None) -> tuple[PeFile, InjectionRecord]:
    """Inject ``m`` sections of ``n * FileAlignment`` payload bytes each.

    Each section is an independent single-section injection over the grown
    table, with its own draw of the insertion index. Without an explicit
    ``rng`` the stream is derived from (seed, file contents).
    """
    payload = config.payload
    if payload.kind == "adversarial" and payload.donor_family is not None \
            and victim_family is not None and payload.donor_family == victim_family:
        raise AdversarialDonorSameFamily(
            f"donor family {payload.donor_family!r} equals victim family")
    _check_alignments(pe)
    m = config.section_count
    slack = usable_header_slack(pe)
    if slack < SECTION_HEADER_SIZE * m:
        raise InsufficientHeaderSlack(
            f"{m} section headers need {SECTION_HEADER_SIZE * m} bytes, {slack} available")
    if rng is None:
        rng = injection_rng(pe, config.seed)

    length = config.size_multiplier * pe.file_alignment
    records = []
    for _ in range(m):
        k = choose_insertion_index(pe, rng)
        name = make_section_name(rng)
        if payload.kind == "random":
            data = payload_random(length, rng)
        else:
            data = payload_adversarial(payload.donor, length, rng)
        pe, rec = insert_section(pe, k, name, data)
        records.append(rec)
    return pe, InjectionRecord(tuple(records), payload.kind, payload.donor_family)


def reorder_sections(pe: PeFile, rng: np.random.Generator) -> PeFile:
    """Shuffle the on-disk placement of section raw data.

    Memory layout and the section table order are untouched; only
    PointerToRawData changes. Blocks are laid out back to back from the
    first raw offset, each starting on a FileAlignment boundary.
    """
    if pe.number_of_sections < 2:
        raise TooFewSections("reordering needs at least 2 sections")
    order = pe.physical_order()
    if len(order) < 2:
        return pe
    perm = [order[i] for i in rng.permutation(len(order))]
    fa = pe.file_alignment if is_power_of_two(pe.file_alignment) else 1
    cursor = pe.section_headers[order[0]].pointer_to_raw_data
    headers = list(pe.section_headers)
    for i in perm:
        cursor = align_up(cursor, fa)
        headers[i] = replace(headers[i], pointer_to_raw_data=cursor)
        cursor += headers[i].size_of_raw_data
    return with_sections(pe, headers, pe.section_data)


def strip_header(pe: PeFile) -> bytes:
    """Concatenated raw section data in on-disk order; headers and overlay dropped."""
    return b"".join(pe.section_data[i] for i in pe.physical_order())
