import math
import struct
from collections import Counter

import numpy as np
import pytest

from oracles import align_loop, check_injection, random_pe, raw_size_loop, read_headers
from pe_layout import E_LFANEW, OPT_SIZE, layout, minimal_pe
from secinject.errors import (
    AdversarialDonorSameFamily,
    InsufficientHeaderSlack,
    InvalidAlignment,
    TooFewSections,
)
from secinject.injector import (
    INJECTED_CHARACTERISTICS,
    InjectionConfig,
    PayloadKind,
    admissible_indices,
    choose_insertion_index,
    compute_raw_size,
    compute_virtual_address,
    inject_sections,
    insert_section,
    last_in_memory,
    make_section_name,
    payload_adversarial,
    payload_random,
    reorder_sections,
    strip_header,
    usable_header_slack,
)
from secinject.pe_core import compute_layout, parse_pe, serialize_pe, validate

TABLE = E_LFANEW + 4 + 20 + OPT_SIZE


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.mark.parametrize("fa", [512, 4096])
def test_raw_size_matches_loop(fa):
    for n in range(1, 5 * 512 + 1):
        assert compute_raw_size(n, fa) == raw_size_loop(n, fa)


def test_raw_size_examples():
    assert compute_raw_size(512, 512) == 512
    assert compute_raw_size(513, 512) == 1024
    with pytest.raises(ValueError):
        compute_raw_size(0, 512)


@pytest.mark.parametrize("sa", [512, 4096])
def test_virtual_address_matches_loop(sa):
    fa = 512
    for vs in range(1, 5 * 512 + 1, 7):
        pe = parse_pe(layout([{"data": b"\1" * 512, "va": sa, "vsize": vs}],
                             file_alignment=fa, section_alignment=sa))
        assert compute_virtual_address(pe) == align_loop(sa + vs, sa)


def test_virtual_address_examples():
    pe = parse_pe(layout([{"data": b"\1" * 10, "va": 0x1000},
                          {"data": b"\1" * 10, "va": 0x3000, "vsize": 0x800}]))
    assert compute_virtual_address(pe) == 0x4000
    pe = parse_pe(layout([{"data": b"\1" * 10, "va": 0x3000, "vsize": 0x1000}]))
    assert compute_virtual_address(pe) == 0x4000


def test_last_in_memory_follows_rva_not_table_order():
    pe = parse_pe(layout([
        {"data": b"\1" * 10, "va": 0x5000, "vsize": 0x200},
        {"data": b"\2" * 10, "va": 0x1000, "vsize": 0x3000},
    ]))
    assert last_in_memory(pe) == 0
    lay = compute_layout(pe)
    assert max(lay.intervals, key=lambda t: t[1])[0] == 0
    assert compute_virtual_address(pe) == 0x6000


def test_admissible_all_aligned_uniform():
    pe = parse_pe(layout([{"data": b"\1" * 600} for _ in range(3)]))
    assert admissible_indices(pe) == [0, 1, 2, 3]
    r = rng(1)
    c = Counter(choose_insertion_index(pe, r) for _ in range(10_000))
    assert set(c) == {0, 1, 2, 3}
    assert all(abs(v - 2500) < 200 for v in c.values())


def test_misaligned_section_never_preceded():
    # section 1 sits at a 256-byte offset; injecting in front of it is not allowed
    data = layout([{"data": b"\1" * 512}, {"data": b"\2" * 256, "pointer": 1024 + 512 + 256, "raw_size": 256},
                   {"data": b"\3" * 512, "pointer": 2048}])
    pe = parse_pe(data)
    assert admissible_indices(pe) == [0, 2, 3]
    r = rng(2)
    c = Counter(choose_insertion_index(pe, r) for _ in range(10_000))
    assert 1 not in c
    assert set(c) == {0, 2, 3}
    assert all(abs(v - 10_000 / 3) < 250 for v in c.values())


def test_virtual_section_uses_next_physical_target():
    data = layout([{"data": b"\1" * 512},
                   {"data": b"", "raw_size": 0, "pointer": 0, "vsize": 0x2000},
                   {"data": b"\3" * 512}])
    pe = parse_pe(data)
    out, rec = insert_section(pe, 1, b"ABCDEFGH", b"\x7f" * 512)
    assert rec.file_offset == pe.section_headers[2].pointer_to_raw_data
    assert out.section_headers[2].pointer_to_raw_data == 0  # virtual one untouched
    assert out.section_headers[3].pointer_to_raw_data == rec.file_offset + 512
    assert serialize_pe(out)[rec.file_offset:rec.file_offset + 512] == b"\x7f" * 512


def test_section_names():
    r = rng(3)
    names = [make_section_name(r) for _ in range(10_000)]
    assert all(len(n) == 8 and all(33 <= c <= 126 for c in n) for n in names)
    for pos in range(8):
        assert len({n[pos] for n in names}) >= 90
    assert make_section_name(rng(9)) == make_section_name(rng(9))


def test_payload_random_entropy_and_determinism():
    data = payload_random(1 << 20, rng(4))
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    p = counts / counts.sum()
    entropy = -sum(x * math.log2(x) for x in p if x)
    assert entropy > 7.9
    assert payload_random(512, rng(5)) == payload_random(512, rng(5))
    with pytest.raises(ValueError):
        payload_random(0, rng())


def test_payload_adversarial_substring_and_cyclic():
    donor = rng(6).integers(0, 256, 10_000, dtype=np.uint8).tobytes()
    for seed in range(20):
        chunk = payload_adversarial(donor, 512, rng(seed))
        assert len(chunk) == 512 and donor.find(chunk) >= 0
    short = bytes(range(100))
    out = payload_adversarial(short, 512, rng(7))
    off = short.index(out[:1])
    assert all(out[i] == short[(off + i) % 100] for i in range(512))
    assert payload_adversarial(donor, 512, rng(8)) == payload_adversarial(donor, 512, rng(8))


def test_single_injection_hand_layout():
    before = minimal_pe()
    pe = parse_pe(before)
    cfg = InjectionConfig(1, 1, PayloadKind.random(), seed=11)
    out, rec = inject_sections(pe, cfg)
    after = serialize_pe(out)
    assert len(after) == len(before) + 512
    h = read_headers(after)
    assert h["nsec"] == 2
    new = h["sections"][rec.sections[0].index]
    assert new["vsize"] == 0 and new["raw"] == 512 and new["va"] == 0x2000
    assert new["chars"] == INJECTED_CHARACTERISTICS == 0x40000040
    assert h["size_of_image"] >= 0x3000
    assert check_injection(before, after, 1, 1) == []
    assert validate(parse_pe(after)).is_strict


def test_append_and_prepend_pointer_rules():
    pe = parse_pe(layout([{"data": b"\1" * 512}, {"data": b"\2" * 1024}], overlay=b"OV"))
    first = pe.section_headers[0].pointer_to_raw_data
    end = pe.raw_end()
    out, rec = insert_section(pe, 2, b"ZZZZZZZZ", b"\5" * 512)
    assert rec.file_offset == end
    assert serialize_pe(out).endswith(b"OV")
    out, rec = insert_section(pe, 0, b"ZZZZZZZZ", b"\5" * 512)
    assert rec.file_offset == first
    assert [s.pointer_to_raw_data for s in out.section_headers[1:]] == [first + 512, first + 1024]


def test_m5_n5_adds_12800_bytes():
    before = layout([{"data": b"\1" * 3000}, {"data": b"\2" * 900}], size_of_headers=1024)
    out, rec = inject_sections(parse_pe(before), InjectionConfig(5, 5, PayloadKind.random(), 7))
    after = serialize_pe(out)
    assert len(after) - len(before) == 12_800 == rec.total_payload_bytes
    assert check_injection(before, after, 5, 5) == []


def test_randomized_bookkeeping():
    r = rng(12)
    for case in range(150):
        before = random_pe(r)
        m, n = int(r.integers(1, 6)), int(r.integers(1, 6))
        out, _ = inject_sections(parse_pe(before), InjectionConfig(m, n, PayloadKind.random(), case))
        after = serialize_pe(out)
        assert check_injection(before, after, m, n) == [], case
        assert validate(parse_pe(after)).is_strict


def test_injection_determinism():
    pe = parse_pe(minimal_pe())
    cfg = InjectionConfig(3, 2, PayloadKind.random(), 99)
    a = serialize_pe(inject_sections(pe, cfg)[0])
    b = serialize_pe(inject_sections(pe, cfg)[0])
    c = serialize_pe(inject_sections(pe, InjectionConfig(3, 2, PayloadKind.random(), 100))[0])
    assert a == b != c


def test_header_slack_errors():
    tight = layout([{"data": b"\1" * 512}], size_of_headers=512)
    pe = parse_pe(tight)
    slack = usable_header_slack(pe)
    m = slack // 40 + 1
    with pytest.raises(InsufficientHeaderSlack):
        inject_sections(pe, InjectionConfig(m, 1))
    # non-zero bytes in the slack are not overwritten
    dirty = bytearray(minimal_pe())
    dirty[TABLE + 40] = 0xCC
    with pytest.raises(InsufficientHeaderSlack):
        inject_sections(parse_pe(bytes(dirty)), InjectionConfig(1, 1))


def test_same_family_donor_rejected():
    pe = parse_pe(minimal_pe())
    cfg = InjectionConfig(1, 1, PayloadKind.adversarial(b"abc", "fam_a"))
    with pytest.raises(AdversarialDonorSameFamily):
        inject_sections(pe, cfg, victim_family="fam_a")
    out, rec = inject_sections(pe, cfg, victim_family="fam_b")
    assert rec.payload_kind == "adversarial" and rec.donor_family == "fam_a"


def test_invalid_config_and_alignment():
    with pytest.raises(ValueError):
        InjectionConfig(0, 1)
    with pytest.raises(ValueError):
        InjectionConfig(1, 0)
    with pytest.raises(ValueError):
        PayloadKind.adversarial(b"")
    bad = bytearray(minimal_pe())
    struct.pack_into("<I", bad, E_LFANEW + 24 + 36, 384)
    with pytest.raises(InvalidAlignment):
        inject_sections(parse_pe(bytes(bad)), InjectionConfig(1, 1))


def test_record_json():
    out, rec = inject_sections(parse_pe(minimal_pe()), InjectionConfig(2, 1, seed=3))
    d = rec.to_dict()
    assert d["total_payload_bytes"] == 1024
    assert len(d["sections"]) == 2
    assert '"payload_kind": "random"' in rec.to_json()


def test_reorder_two_sections_swap():
    a, b = b"\1" * 512, b"\2" * 512
    data = layout([{"data": a}, {"data": b}])
    pe = parse_pe(data)
    seen = set()
    for seed in range(20):
        out = serialize_pe(reorder_sections(pe, rng(seed)))
        assert len(out) == len(data)
        seen.add(out)
    # headers differ only in the pointers; the raw region is either swapped or untouched
    assert any(o[1024:] == b + a for o in seen)
    assert any(o == data for o in seen)
    swapped_pe = parse_pe(next(o for o in seen if o[1024:] == b + a))
    assert swapped_pe.section_data == pe.section_data
    assert [s.virtual_address for s in swapped_pe.section_headers] == [0x1000, 0x2000]


def test_reorder_properties():
    r = rng(13)
    for _ in range(30):
        data = random_pe(r, nsec=int(r.integers(2, 8)))
        pe = parse_pe(data)
        out = reorder_sections(pe, r)
        blocks_in = sorted(pe.section_data)
        blocks_out = sorted(parse_pe(serialize_pe(out)).section_data)
        assert blocks_in == blocks_out
        stripped = strip_header(out)
        assert len(stripped) == len(strip_header(pe))
        assert all(stripped.find(block) >= 0 for block in pe.section_data)
        assert [s.virtual_address for s in out.section_headers] == [s.virtual_address for s in pe.section_headers]
        assert validate(parse_pe(serialize_pe(out))).is_strict


def test_reorder_too_few():
    with pytest.raises(TooFewSections):
        reorder_sections(parse_pe(minimal_pe()), rng())


def test_strip_header():
    payload = bytes(range(256)) * 2
    assert strip_header(parse_pe(minimal_pe(payload))) == payload
    pe = parse_pe(layout([{"data": b"\1" * 700}, {"data": b"\2" * 100}], overlay=b"XYZ"))
    out = strip_header(pe)
    assert len(out) == sum(s.size_of_raw_data for s in pe.section_headers)
    assert not out.endswith(b"XYZ")
