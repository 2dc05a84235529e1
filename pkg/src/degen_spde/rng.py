"""Named, counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
(seed, label, index).  Philox is counter-based, so draws from distinct keys
are independent and do not depend on the order in which workers request
them; re-running with the same (seed, label, index) reproduces the stream
bit for bit.
"""

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    digest = hashlib.blake2s(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Independent generator for the draw named (label, index) under seed."""
    ss = np.random.SeedSequence(
        entropy=int(seed) & (2**63 - 1),
        spawn_key=(_label_key(label), int(index)),
    )
    return np.random.Generator(np.random.Philox(ss))


def smooth_profile(rng: np.random.Generator, x: np.ndarray, modes: int = 6,
                   zero_endpoints: bool = True) -> np.ndarray:
    """Random smooth profile on [0,1] as a short sine/cosine series.

    Low-mode series keep the draw's spectrum mesh-independent, so ensembles
    built on different resolutions sample the same function class.
    """
    coeffs = rng.standard_normal(modes) / np.arange(1, modes + 1)
    if zero_endpoints:
        basis = np.sin(np.outer(np.arange(1, modes + 1) * np.pi, x))
    else:
        basis = np.cos(np.outer(np.arange(modes) * np.pi, x))
    return coeffs @ basis


def smooth_time_profile(rng: np.random.Generator, n_steps: int,
                        modes: int = 4) -> np.ndarray:
    """Random smooth time signal sampled at step midlevels, one value per step."""
    t = (np.arange(n_steps) + 0.5) / n_steps
    coeffs = rng.standard_normal(modes) / np.arange(1, modes + 1)
    basis = np.cos(np.outer(np.arange(modes) * np.pi, t))
    return coeffs @ basis
