"""Named parameter storage with paired gradient buffers."""

from __future__ import annotations

import zlib

import numpy as np

from gmvc.errors import InvalidInput
from gmvc.nn.tensor import Tensor


class ParamStore:
    """Flat registry of named, shaped parameter arrays.

    Every trainable entry is a ``Tensor`` whose ``.grad`` buffer is
    preallocated and shaped like its value, so backward passes always
    accumulate in place and optimizers can assume both exist. ``state``
    holds non-trainable arrays (batch-norm running statistics) that are
    checkpointed but never touched by the optimizer.

    Initialization is recorded per entry at registration and applied by
    ``xavier_init``; draws are seeded from ``(rng_seed, crc32(name))``
    so values depend only on the seed and the entry name, not on
    registration order.
    """

    def __init__(self, rng_seed: int, dtype=np.float32):
        self.rng_seed = int(rng_seed)
        self.dtype = np.dtype(dtype)
        self.entries: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}
        self._init_specs: dict[str, tuple] = {}

    def add(self, name, shape, init="xavier", fan=None) -> Tensor:
        """Register a trainable array.

        ``init`` is one of ``xavier`` (uniform +-sqrt(6/(fan_in+fan_out))),
        ``zeros``, ``ones``, or ``lstm_bias`` (zeros with the forget-gate
        quarter set to 1). ``fan`` overrides the (fan_in, fan_out) pair
        inferred from a 2-D shape.
        """
        if name in self.entries or name in self.state:
            raise InvalidInput(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        t = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)
        t.grad = np.zeros(shape, dtype=self.dtype)
        self.entries[name] = t
        self._init_specs[name] = (init, fan)
        return t

    def add_state(self, name, shape, fill=0.0) -> np.ndarray:
        if name in self.entries or name in self.state:
            raise InvalidInput(f"duplicate state name {name!r}")
        arr = np.full(tuple(shape), fill, dtype=self.dtype)
        self.state[name] = arr
        return arr

    def __getitem__(self, name) -> Tensor:
        return self.entries[name]

    def __contains__(self, name) -> bool:
        return name in self.entries

    def names(self):
        return list(self.entries)

    def n_coords(self) -> int:
        return sum(t.data.size for t in self.entries.values())

    def zero_grads(self) -> None:
        for t in self.entries.values():
            t.grad[...] = 0.0

    def _rng_for(self, name):
        ss = np.random.SeedSequence([self.rng_seed, zlib.crc32(name.encode())])
        return np.random.default_rng(ss)

    def initialize(self) -> None:
        for name, t in self.entries.items():
            kind, fan = self._init_specs[name]
            if kind == "zeros":
                t.data[...] = 0.0
            elif kind == "ones":
                t.data[...] = 1.0
            elif kind == "lstm_bias":
                t.data[...] = 0.0
                h = t.data.shape[0] // 4
                t.data[h : 2 * h] = 1.0
            elif kind == "xavier":
                if fan is None:
                    if t.data.ndim != 2:
                        raise InvalidInput(
                            f"{name}: xavier needs an explicit fan for shape {t.data.shape}"
                        )
                    fan = t.data.shape
                bound = np.sqrt(6.0 / (fan[0] + fan[1]))
                rng = self._rng_for(name)
                t.data[...] = rng.uniform(-bound, bound, size=t.data.shape).astype(
                    self.dtype
                )
            else:
                raise InvalidInput(f"unknown init kind {kind!r} for {name!r}")


def xavier_init(store: ParamStore) -> ParamStore:
    """Apply each entry's declared initializer; deterministic in the seed."""
    store.initialize()
    return store
