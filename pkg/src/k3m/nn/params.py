"""Named learnable parameters with gradient accumulators and checkpointing.

Checkpoint layout: one JSON header line ``{"version": 1, "names": {name:
shape, ...}, "meta": {...}}`` followed by the raw little-endian float32
values of each tensor, concatenated in header (sorted-name) order.  Save and
load are bit-exact for float32 stores.
"""

from __future__ import annotations

import json

import numpy as np
from scipy.stats import truncnorm

from .tensor import Tensor

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Map of name -> learnable Tensor; gradients persist until cleared."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        arr = np.array(values, dtype=self.dtype)
        t = Tensor(arr, requires_grad=True)
        self._params[name] = t
        return t

    def get(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def grad(self, name: str) -> np.ndarray:
        """Accumulated gradient; exactly zero for untouched parameters."""
        t = self.get(name)
        if t.grad is None:
            return np.zeros_like(t.data)
        return t.grad

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store with values cast to ``dtype``; grads dropped."""
        out = ParamStore(dtype=dtype)
        for name, t in self.items():
            out.create(name, t.data)
        return out


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def save_checkpoint(store: ParamStore, path, meta: dict | None = None) -> None:
    names = store.names()
    header = {
        "version": CHECKPOINT_VERSION,
        "names": {name: list(store.get(name).data.shape) for name in names},
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in names:
            f.write(np.ascontiguousarray(store.get(name).data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> tuple[ParamStore, dict]:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"unreadable checkpoint header: {e}") from None
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
        blob = f.read()

    store = ParamStore(dtype=dtype)
    offset = 0
    for name in sorted(header["names"]):
        shape = tuple(header["names"][name])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise CheckpointError(f"truncated checkpoint: missing data for {name!r}")
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        store.create(name, values)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"checkpoint has {len(blob) - offset} trailing bytes")
    return store, header.get("meta", {})
