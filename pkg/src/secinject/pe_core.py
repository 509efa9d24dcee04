"""Lossless PE32 parsing and re-serialization.

A parsed file is split into verbatim regions (DOS header and stub, headers,
header slack, per-section raw data, overlay). Only the handful of header
fields the injector touches are decoded; everything else rides along as raw
bytes, so ``serialize_pe(parse_pe(b)) == b`` for every accepted input.

See https://learn.microsoft.com/en-us/windows/win32/debug/pe-format
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

from .errors import (
    MissingMzSignature,
    MissingPeSignature,
    NoSections,
    OverlappingRawRegions,
    RawDataOutOfBounds,
    SectionTableOutOfBounds,
    TruncatedHeader,
    UnsupportedFormat,
    UnsupportedLayout,
)

PE_SIGNATURE = b"PE\0\0"
DOS_HEADER_SIZE = 0x40
E_LFANEW_OFFSET = 0x3C
COFF_HEADER_SIZE = 20
SECTION_HEADER_SIZE = 40

PE32_MAGIC = 0x10B
PE32_PLUS_MAGIC = 0x20B
# offsets inside the PE32 optional header
_OPT_IMAGE_BASE = 28
_OPT_SECTION_ALIGNMENT = 32
_OPT_FILE_ALIGNMENT = 36
_OPT_SIZE_OF_IMAGE = 56
_OPT_SIZE_OF_HEADERS = 60
_OPT_NUMBER_OF_RVA_AND_SIZES = 92
_OPT_DATA_DIRECTORIES = 96
_OPT_MIN_SIZE = 64  # enough to reach SizeOfHeaders
SECURITY_DIRECTORY_INDEX = 4

IMAGE_SCN_CNT_INITIALIZED_DATA = 0x00000040
IMAGE_SCN_MEM_READ = 0x40000000


def _u16(buf, off):
    return struct.unpack_from("<H", buf, off)[0]


def _u32(buf, off):
    return struct.unpack_from("<I", buf, off)[0]


def _patch(raw: bytes, fmt: str, off: int, value: int) -> bytes:
    buf = bytearray(raw)
    struct.pack_into(fmt, buf, off, value)
    return bytes(buf)


def align_up(value: int, alignment: int) -> int:
    return -(-value // alignment) * alignment


def is_power_of_two(value: int) -> bool:
    return value > 0 and value & (value - 1) == 0


@dataclass(frozen=True)
class CoffHeader:
    number_of_sections: int
    size_of_optional_header: int
    raw: bytes = field(repr=False)

    def to_bytes(self) -> bytes:
        raw = _patch(self.raw, "<H", 2, self.number_of_sections)
        return _patch(raw, "<H", 16, self.size_of_optional_header)


@dataclass(frozen=True)
class OptionalHeader:
    magic: int
    image_base: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    size_of_headers: int
    raw: bytes = field(repr=False)

    def to_bytes(self) -> bytes:
        raw = self.raw
        for fmt, off, value in (
            ("<I", _OPT_IMAGE_BASE, self.image_base),
            ("<I", _OPT_SECTION_ALIGNMENT, self.section_alignment),
            ("<I", _OPT_FILE_ALIGNMENT, self.file_alignment),
            ("<I", _OPT_SIZE_OF_IMAGE, self.size_of_image),
            ("<I", _OPT_SIZE_OF_HEADERS, self.size_of_headers),
        ):
            raw = _patch(raw, fmt, off, value)
        return raw

    def data_directory(self, index: int) -> tuple[int, int] | None:
        """(rva_or_offset, size) of a data directory, or None when absent."""
        if len(self.raw) < _OPT_DATA_DIRECTORIES:
            return None
        count = _u32(self.raw, _OPT_NUMBER_OF_RVA_AND_SIZES)
        off = _OPT_DATA_DIRECTORIES + 8 * index
        if index >= count or off + 8 > len(self.raw):
            return None
        return _u32(self.raw, off), _u32(self.raw, off + 4)


@dataclass(frozen=True)
class SectionHeader:
    name: bytes
    virtual_size: int
    virtual_address: int
    size_of_raw_data: int
    pointer_to_raw_data: int
    characteristics: int
    raw: bytes = field(default=bytes(SECTION_HEADER_SIZE), repr=False)

    @property
    def is_virtual(self) -> bool:
        """True when the section occupies no bytes on disk."""
        return self.pointer_to_raw_data == 0 or self.size_of_raw_data == 0

    @property
    def display_name(self) -> str:
        return self.name.rstrip(b"\0").decode("latin-1")

    def to_bytes(self) -> bytes:
        if len(self.name) != 8:
            raise ValueError("section name must be exactly 8 bytes")
        raw = self.name + self.raw[8:]
        for off, value in (
            (8, self.virtual_size),
            (12, self.virtual_address),
            (16, self.size_of_raw_data),
            (20, self.pointer_to_raw_data),
            (36, self.characteristics),
        ):
            raw = _patch(raw, "<I", off, value)
        return raw


@dataclass(frozen=True)
class PeFile:
    dos_region: bytes = field(repr=False)
    coff_header: CoffHeader
    optional_header: OptionalHeader
    section_headers: tuple[SectionHeader, ...]
    header_tail: bytes = field(repr=False)
    section_data: tuple[bytes, ...] = field(repr=False)
    overlay: bytes = field(repr=False)

    @property
    def number_of_sections(self) -> int:
        return self.coff_header.number_of_sections

    @property
    def file_alignment(self) -> int:
        return self.optional_header.file_alignment

    @property
    def section_alignment(self) -> int:
        return self.optional_header.section_alignment

    @property
    def section_table_offset(self) -> int:
        return (len(self.dos_region) + len(PE_SIGNATURE) + COFF_HEADER_SIZE
                + self.coff_header.size_of_optional_header)

    @property
    def section_table_end(self) -> int:
        return self.section_table_offset + SECTION_HEADER_SIZE * len(self.section_headers)

    @property
    def headers_end(self) -> int:
        """File offset one past the header_tail, i.e. where raw data may begin."""
        return self.section_table_end + len(self.header_tail)

    def physical_order(self) -> list[int]:
        """Indices of sections with on-disk data, sorted by file offset."""
        idx = [i for i, s in enumerate(self.section_headers) if not s.is_virtual]
        return sorted(idx, key=lambda i: (self.section_headers[i].pointer_to_raw_data, i))

    def raw_end(self) -> int:
        """End offset of the last raw region (or of the headers if none)."""
        ends = [s.pointer_to_raw_data + s.size_of_raw_data
                for s in self.section_headers if not s.is_virtual]
        return max(ends, default=self.headers_end)


def parse_pe(data: bytes) -> PeFile:
    """Decompose ``data`` into a PeFile. Raises a PeFormatError subclass naming
    the first structural violation."""
    data = bytes(data)
    if len(data) < 2 or data[:2] != b"MZ":
        raise MissingMzSignature("file does not start with 'MZ'")
    if len(data) < DOS_HEADER_SIZE:
        raise TruncatedHeader(f"DOS header needs {DOS_HEADER_SIZE} bytes, file has {len(data)}")
    e_lfanew = _u32(data, E_LFANEW_OFFSET)
    if e_lfanew < DOS_HEADER_SIZE:
        raise TruncatedHeader(f"e_lfanew 0x{e_lfanew:x} points inside the DOS header")
    if e_lfanew + len(PE_SIGNATURE) + COFF_HEADER_SIZE > len(data):
        raise TruncatedHeader(f"NT headers at 0x{e_lfanew:x} run past end of file")
    if data[e_lfanew:e_lfanew + 4] != PE_SIGNATURE:
        raise MissingPeSignature(f"no PE signature at 0x{e_lfanew:x}")

    coff_off = e_lfanew + 4
    coff_raw = data[coff_off:coff_off + COFF_HEADER_SIZE]
    coff = CoffHeader(
        number_of_sections=_u16(coff_raw, 2),
        size_of_optional_header=_u16(coff_raw, 16),
        raw=coff_raw,
    )
    opt_off = coff_off + COFF_HEADER_SIZE
    opt_size = coff.size_of_optional_header
    if opt_off + 2 > len(data):
        raise TruncatedHeader("optional header missing")
    magic = _u16(data, opt_off)
    if magic == PE32_PLUS_MAGIC:
        raise UnsupportedFormat("PE32+ (64-bit) images are not supported")
    if magic != PE32_MAGIC:
        raise UnsupportedFormat(f"unknown optional header magic 0x{magic:x}")
    if opt_size < _OPT_MIN_SIZE:
        raise TruncatedHeader(f"SizeOfOptionalHeader {opt_size} too small for PE32")
    if opt_off + opt_size > len(data):
        raise TruncatedHeader("optional header runs past end of file")
    opt_raw = data[opt_off:opt_off + opt_size]
    opt = OptionalHeader(
        magic=magic,
        image_base=_u32(opt_raw, _OPT_IMAGE_BASE),
        section_alignment=_u32(opt_raw, _OPT_SECTION_ALIGNMENT),
        file_alignment=_u32(opt_raw, _OPT_FILE_ALIGNMENT),
        size_of_image=_u32(opt_raw, _OPT_SIZE_OF_IMAGE),
        size_of_headers=_u32(opt_raw, _OPT_SIZE_OF_HEADERS),
        raw=opt_raw,
    )

    nsec = coff.number_of_sections
    if nsec == 0:
        raise NoSections("NumberOfSections is 0")
    table_off = opt_off + opt_size
    table_end = table_off + SECTION_HEADER_SIZE * nsec
    if table_end > len(data):
        raise SectionTableOutOfBounds(
            f"{nsec} section headers at 0x{table_off:x} run past end of file")

    headers = []
    for i in range(nsec):
        raw = data[table_off + i * SECTION_HEADER_SIZE: table_off + (i + 1) * SECTION_HEADER_SIZE]
        headers.append(SectionHeader(
            name=raw[:8],
            virtual_size=_u32(raw, 8),
            virtual_address=_u32(raw, 12),
            size_of_raw_data=_u32(raw, 16),
            pointer_to_raw_data=_u32(raw, 20),
            characteristics=_u32(raw, 36),
            raw=raw,
        ))

    physical = sorted((i for i, s in enumerate(headers) if not s.is_virtual),
                      key=lambda i: (headers[i].pointer_to_raw_data, i))
    for i in physical:
        s = headers[i]
        if s.pointer_to_raw_data + s.size_of_raw_data > len(data):
            raise RawDataOutOfBounds(
                f"section {i} raw data [0x{s.pointer_to_raw_data:x}, "
                f"0x{s.pointer_to_raw_data + s.size_of_raw_data:x}) exceeds file size 0x{len(data):x}")
    first_raw = headers[physical[0]].pointer_to_raw_data if physical else len(data)
    if first_raw < table_end:
        raise UnsupportedLayout("section raw data overlaps the header table")

    cursor = first_raw
    for i in physical:
        s = headers[i]
        if s.pointer_to_raw_data < cursor:
            raise UnsupportedLayout(f"section {i} raw data overlaps a previous section")
        if any(data[cursor:s.pointer_to_raw_data]):
            raise UnsupportedLayout(f"non-zero bytes between raw regions before section {i}")
        cursor = s.pointer_to_raw_data + s.size_of_raw_data

    section_data = tuple(
        b"" if s.is_virtual
        else data[s.pointer_to_raw_data:s.pointer_to_raw_data + s.size_of_raw_data]
        for s in headers
    )
    return PeFile(
        dos_region=data[:e_lfanew],
        coff_header=coff,
        optional_header=opt,
        section_headers=tuple(headers),
        header_tail=data[table_end:first_raw],
        section_data=section_data,
        overlay=data[cursor:] if physical else b"",
    )


def serialize_pe(pe: PeFile) -> bytes:
    """Inverse of parse_pe. Gaps between raw regions are zero-filled."""
    if len(pe.section_headers) != pe.coff_header.number_of_sections:
        raise ValueError("NumberOfSections disagrees with the section table")
    if len(pe.section_data) != len(pe.section_headers):
        raise ValueError("section_data and section_headers differ in length")
    for i, (s, d) in enumerate(zip(pe.section_headers, pe.section_data)):
        want = 0 if s.is_virtual else s.size_of_raw_data
        if len(d) != want:
            raise ValueError(f"section {i}: {len(d)} data bytes, header says {want}")

    out = bytearray()
    out += pe.dos_region
    out += PE_SIGNATURE
    out += pe.coff_header.to_bytes()
    out += pe.optional_header.to_bytes()
    for s in pe.section_headers:
        out += s.to_bytes()
    out += pe.header_tail

    for i in pe.physical_order():
        s = pe.section_headers[i]
        if s.pointer_to_raw_data < len(out):
            raise OverlappingRawRegions(
                f"section {i} at 0x{s.pointer_to_raw_data:x} overlaps data ending at 0x{len(out):x}")
        out += bytes(s.pointer_to_raw_data - len(out))
        out += pe.section_data[i]
    out += pe.overlay
    return bytes(out)


@dataclass(frozen=True)
class MemoryLayout:
    # (section index, start RVA, end RVA), header order
    intervals: tuple[tuple[int, int, int], ...]

    def end(self) -> int:
        return max(e for _, _, e in self.intervals)


def compute_layout(pe: PeFile) -> MemoryLayout:
    return MemoryLayout(tuple(
        (i, s.virtual_address, s.virtual_address + max(s.virtual_size, s.size_of_raw_data))
        for i, s in enumerate(pe.section_headers)
    ))


def header_slack(pe: PeFile) -> int:
    """Bytes between the end of the section table and SizeOfHeaders."""
    return max(0, pe.optional_header.size_of_headers - pe.section_table_end)


# -- validation ---------------------------------------------------------------

ERROR = "error"
WARNING = "warning"
INFO = "info"


@dataclass(frozen=True)
class Finding:
    severity: str
    section: int | None
    rule: str
    message: str

    def to_dict(self) -> dict:
        return {"severity": self.severity, "section": self.section,
                "rule": self.rule, "message": self.message}


@dataclass(frozen=True)
class SectionCheck:
    index: int
    name: str
    raw_aligned: bool
    virtual_aligned: bool
    purely_virtual: bool


@dataclass(frozen=True)
class ValidationReport:
    sections: tuple[SectionCheck, ...]
    findings: tuple[Finding, ...]
    header_slack: int
    size_of_image_consistent: bool

    @property
    def strict_violations(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == ERROR]

    @property
    def is_strict(self) -> bool:
        return not self.strict_violations

    def to_records(self) -> list[dict]:
        return [f.to_dict() for f in self.findings]

    def to_json(self) -> str:
        return json.dumps({
            "header_slack": self.header_slack,
            "size_of_image_consistent": self.size_of_image_consistent,
            "findings": self.to_records(),
        }, indent=2)

    def to_text(self) -> str:
        lines = [f"header slack: {self.header_slack} bytes "
                 f"({self.header_slack // SECTION_HEADER_SIZE} section headers)"]
        for c in self.sections:
            lines.append(
                f"section {c.index} {c.name!r}: raw_aligned={c.raw_aligned} "
                f"virtual_aligned={c.virtual_aligned} virtual={c.purely_virtual}")
        for f in self.findings:
            where = "file" if f.section is None else f"section {f.section}"
            lines.append(f"{f.severity.upper()} {f.rule} [{where}] {f.message}")
        lines.append("strict: " + ("yes" if self.is_strict else f"no ({len(self.strict_violations)} violations)"))
        return "\n".join(lines) + "\n"


def validate(pe: PeFile) -> ValidationReport:
    """Check alignment and size bookkeeping. Never raises."""
    fa = pe.file_alignment
    sa = pe.section_alignment
    findings: list[Finding] = []
    fa_ok = is_power_of_two(fa)
    sa_ok = is_power_of_two(sa)
    if not fa_ok:
        findings.append(Finding(ERROR, None, "file-alignment", f"FileAlignment {fa} is not a power of two"))
    if not sa_ok:
        findings.append(Finding(ERROR, None, "section-alignment", f"SectionAlignment {sa} is not a power of two"))
    if fa_ok and sa_ok and sa < fa:
        findings.append(Finding(ERROR, None, "alignment-order",
                                f"SectionAlignment {sa} < FileAlignment {fa}"))
    if fa_ok and pe.optional_header.size_of_headers % fa:
        findings.append(Finding(ERROR, None, "headers-alignment",
                                f"SizeOfHeaders {pe.optional_header.size_of_headers} not a multiple of {fa}"))

    checks = []
    for i, s in enumerate(pe.section_headers):
        virtual = s.is_virtual
        raw_ok = virtual or (fa_ok and s.pointer_to_raw_data % fa == 0 and s.size_of_raw_data % fa == 0)
        va_ok = sa_ok and s.virtual_address % sa == 0
        checks.append(SectionCheck(i, s.display_name, raw_ok, va_ok, virtual))
        if not raw_ok:
            findings.append(Finding(ERROR, i, "raw-alignment",
                                    f"PointerToRawData 0x{s.pointer_to_raw_data:x} / SizeOfRawData "
                                    f"0x{s.size_of_raw_data:x} not multiples of FileAlignment {fa}"))
        if not va_ok:
            findings.append(Finding(ERROR, i, "virtual-alignment",
                                    f"VirtualAddress 0x{s.virtual_address:x} not a multiple of "
                                    f"SectionAlignment {sa}"))
        if virtual:
            findings.append(Finding(INFO, i, "virtual-section", "section has no raw data on disk"))

    layout = compute_layout(pe)
    end = layout.end()
    soi = pe.optional_header.size_of_image
    consistent = soi >= end and (not sa_ok or soi % sa == 0)
    if soi < end:
        findings.append(Finding(ERROR, None, "size-of-image",
                                f"SizeOfImage 0x{soi:x} smaller than last section end 0x{end:x}"))
    if sa_ok and soi % sa:
        findings.append(Finding(ERROR, None, "size-of-image-alignment",
                                f"SizeOfImage 0x{soi:x} not a multiple of SectionAlignment {sa}"))

    sec_dir = pe.optional_header.data_directory(SECURITY_DIRECTORY_INDEX)
    if sec_dir is not None and sec_dir[1]:
        findings.append(Finding(WARNING, None, "security-directory",
                                "certificate table present; file offsets are not fixed up"))

    slack = header_slack(pe)
    findings.append(Finding(INFO, None, "header-slack", f"{slack} bytes of header slack"))
    return ValidationReport(tuple(checks), tuple(findings), slack, consistent)


def read_pe(path) -> PeFile:
    with open(path, "rb") as fh:
        return parse_pe(fh.read())


def with_sections(pe: PeFile, headers, data) -> PeFile:
    """Copy of ``pe`` with a new section table; keeps NumberOfSections in sync."""
    headers = tuple(headers)
    return replace(
        pe,
        coff_header=replace(pe.coff_header, number_of_sections=len(headers)),
        section_headers=headers,
        section_data=tuple(data),
    )
