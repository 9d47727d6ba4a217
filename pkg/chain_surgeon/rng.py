"""Counter-based random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from the user seed plus a module code and integer coordinates
(replica index, conductance-draw index, ...). Two runs with the same seed see
the same numbers no matter how work is split across processes.
"""
import numpy as np

MODULE_CODES = {
    "exact_real": 1,
    "iv_chain": 2,
    "qsos": 3,
    "surgery": 4,
    "scaling": 5,
    "selftest": 6,
}


def stream(seed: int, module: str, *keys: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    spawn_key = (MODULE_CODES[module],) + tuple(int(k) for k in keys)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(seq))

