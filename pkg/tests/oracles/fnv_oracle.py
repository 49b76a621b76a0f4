"""Reference FNV-1a 64 and annotation slot computation, written from the
published algorithm with no imports from the package."""

OFFSET_BASIS = 14695981039346656037
PRIME = 1099511628211


def fnv1a_64(data: bytes) -> int:
    h = OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * PRIME) % (2 ** 64)
    return h


def le_u64(x: int) -> bytes:
    x %= 2 ** 64
    return bytes((x >> (8 * i)) & 0xFF for i in range(8))


def set_slot(key: int, site: int, value: int) -> int:
    """Slot of a SET event: FNV-1a over (key, site, value) as three LE u64 words."""
    return fnv1a_64(le_u64(key) + le_u64(site) + le_u64(value)) % 65536
