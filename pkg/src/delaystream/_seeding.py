import hashlib

import numpy as np


def sub_seed(master_seed: int, component: str) -> int:
    """Stable 64-bit seed for ``component`` derived from ``master_seed``."""
    digest = hashlib.sha256(f"{int(master_seed)}/{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def component_rng(master_seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(sub_seed(master_seed, component))
