"""Named, independently seedable random number streams.

Every source of randomness in a run (parameter init, data order, dropout in
each decoding pass, token sampling, ...) draws from its own stream so that
individual sources can be frozen or replayed in tests. All streams expand
deterministically from one master seed:

    stream_seed = SeedSequence([master_seed, uint64(sha256(name)[:8])])

so adding a new stream never perturbs existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAM_NAMES = (
    "init",
    "data",
    "sampling",
    "dropout_enc",
    "dropout_dec1",
    "dropout_dec2",
    "mc_dropout",
)


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream_from(master_seed: int, name: str) -> np.random.Generator:
    """Derive the named stream's generator from the master seed."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([master_seed, _name_key(name)]))
    )


class RngStreams:
    """The full set of named streams for one training run."""

    def __init__(self, master_seed: int, names: tuple[str, ...] = STREAM_NAMES):
        self.master_seed = int(master_seed)
        self.names = tuple(names)
        self._streams = {n: stream_from(self.master_seed, n) for n in self.names}

    def __getitem__(self, name: str) -> np.random.Generator:
        return self._streams[name]

    def state_dict(self) -> dict:
        """JSON-serializable snapshot of every stream's position."""
        return {
            "master_seed": self.master_seed,
            "streams": {n: g.bit_generator.state for n, g in self._streams.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        if state["master_seed"] != self.master_seed:
            raise ValueError(
                f"checkpoint master_seed {state['master_seed']} != {self.master_seed}"
            )
        for name, bg_state in state["streams"].items():
            self._streams[name].bit_generator.state = bg_state

    def describe(self) -> dict:
        """Expansion scheme echoed into resolved run configs."""
        return {
            "master_seed": self.master_seed,
            "expansion": "pcg64(seed_sequence([master_seed, le_uint64(sha256(name)[:8])]))",
            "streams": list(self.names),
        }
