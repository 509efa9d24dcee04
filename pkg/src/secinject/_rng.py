import hashlib

import numpy as np


def derive_rng(*parts) -> np.random.Generator:
    """Generator seeded from an arbitrary tuple of str/int/bytes parts.

    Streams depend only on the parts, never on call order, so work can be
    scheduled in any order or process.
    """
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            raw = part
        else:
            raw = repr(part).encode("utf-8")
        h.update(len(raw).to_bytes(8, "little"))
        h.update(raw)
    digest = h.digest()
    words = [int.from_bytes(digest[i:i + 8], "little") for i in range(0, 32, 8)]
    return np.random.default_rng(np.random.SeedSequence(words))


def file_identity(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()
