import hashlib


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts (independent of PYTHONHASHSEED)."""
    text = "/".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little") >> 1
