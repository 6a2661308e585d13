import hashlib


def derive_seed(seed: int, stage: str) -> int:
    """Stable 63-bit seed for a named stage; adding stages never shifts others."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
