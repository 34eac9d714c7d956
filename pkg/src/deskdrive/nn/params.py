"""Named parameter storage, deterministic initialization, checkpoints."""
from __future__ import annotations

import hashlib
import io
import json

import numpy as np

from .autodiff import Tape, Var

CHECKPOINT_SCHEMA = 1


class CheckpointError(ValueError):
    pass


def _name_seed(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{seed}/{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class ParamStore:
    """Flat named collection of trainable arrays with matching gradient slots.

    Iteration order is deterministic (sorted by name). Initial values are a
    pure function of (master seed, parameter name, shape), so two models
    sharing a (name, shape) pair initialize it identically.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, values: np.ndarray) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.asarray(values, dtype=np.float64)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def add_uniform(self, name: str, shape: tuple[int, ...], fan_in: int,
                    seed: int) -> None:
        rng = np.random.Generator(np.random.PCG64(_name_seed(seed, name)))
        bound = 1.0 / np.sqrt(fan_in)
        self.add(name, rng.uniform(-bound, bound, size=shape))

    def add_zeros(self, name: str, shape: tuple[int, ...]) -> None:
        self.add(name, np.zeros(shape))

    def names(self) -> list[str]:
        return sorted(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def accumulate_grad(self, name: str, g: np.ndarray) -> None:
        self._grads[name] += g

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def var(self, name: str) -> Var:
        """Leaf Var bound to this parameter for the active tape (if any)."""
        tape = Tape.current
        data = self._values[name]
        if tape is None:
            return Var(data)
        return tape.leaf(self, name, data)

    def size(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name in self.names():
            out.add(name, self._values[name].copy())
        return out

    def assign_from(self, other: "ParamStore") -> None:
        if self.names() != other.names():
            raise ValueError("parameter sets differ")
        for name in self.names():
            self._values[name][...] = other._values[name]


def save_checkpoint(path, store: ParamStore, manifest: dict) -> None:
    """Write named arrays plus a JSON manifest; round trips bit-exactly."""
    meta = dict(manifest)
    meta["schema_version"] = CHECKPOINT_SCHEMA
    blob = {f"p:{name}": store.value(name) for name in store.names()}
    blob["__manifest__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8).copy()
    with open(path, "wb") as fh:
        np.savez(fh, **blob)


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with np.load(path, allow_pickle=False) as data:
        if "__manifest__" not in data:
            raise CheckpointError("missing checkpoint manifest")
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        if manifest.get("schema_version") != CHECKPOINT_SCHEMA:
            raise CheckpointError(
                f"unsupported checkpoint schema {manifest.get('schema_version')}")
        store = ParamStore()
        for key in data.files:
            if key.startswith("p:"):
                store.add(key[2:], data[key])
    return store, manifest


def checkpoint_bytes(store: ParamStore, manifest: dict) -> bytes:
    buf = io.BytesIO()
    save_checkpoint(buf, store, manifest)
    return buf.getvalue()


def checkpoint_from_bytes(blob: bytes) -> tuple[ParamStore, dict]:
    return load_checkpoint(io.BytesIO(blob))
