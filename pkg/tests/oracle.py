"""Reference implementations written independently of the package.

Serial Jacobi: the whole global line in one list, no processes, no
message passing. A correct distributed run must reproduce its digest
bit for bit.
"""
import struct

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) % (1 << 64)
    return h


def serial_jacobi(ranks: int, iterations: int, n: int = 4096):
    total = ranks * n
    f = [((g * 7919) % 1000) / 1000.0 - 0.5 for g in range(total)]
    u = [0.0] * total
    residual = 0.0
    for _ in range(iterations):
        new = []
        for g in range(total):
            left = u[g - 1] if g > 0 else 0.0
            right = u[g + 1] if g < total - 1 else 0.0
            new.append(0.5 * (left + right + f[g]))
        # per-rank partial sums, then combined in rank order
        parts = []
        for r in range(ranks):
            s = 0.0
            for g in range(r * n, (r + 1) * n):
                s += (new[g] - u[g]) * (new[g] - u[g])
            parts.append(s)
        residual = 0.0
        for s in parts:
            residual += s
        u = new
    digests = b"".join(struct.pack("<Q", fnv1a64(struct.pack(f"<{n}d", *u[r * n:(r + 1) * n])))
                       for r in range(ranks))
    return fnv1a64(digests), residual


def crc32_bitwise(data: bytes) -> int:
    crc = 0xFFFFFFFF
    for b in data:
        crc ^= b
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


MASK = (1 << 64) - 1


def splitmix64_ref(seed: int, count: int):
    """Straight transcription of the published SplitMix64 step."""
    x = seed & MASK
    out = []
    for _ in range(count):
        x = (x + 0x9E3779B97F4A7C15) & MASK
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out
