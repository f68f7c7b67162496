"""Named parameter collections, the SGD step, and the checkpoint format."""
from __future__ import annotations

import json
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Iterator

import numpy as np

from fedal.errors import ContractError, FedalError
from fedal.tensor import Tensor

_MAGIC = b"FDLCKPT1"


class ParamSet(Mapping):
    """Ordered map from a dotted parameter path to a trainable :class:`Tensor`.

    Arithmetic (``+``, ``-``, ``*`` by a scalar) is element-wise per path and
    returns a new ParamSet; both operands must be congruent (same paths, same
    per-path shapes).
    """

    def __init__(self, params: Mapping[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for path, t in (params or {}).items():
            self._params[path] = t if isinstance(t, Tensor) else Tensor(t, requires_grad=True)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamSet":
        return cls({k: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
                    for k, v in arrays.items()})

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors, {self.total_count} values)"

    @property
    def total_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def shapes(self) -> dict[str, tuple]:
        return {k: t.shape for k, t in self._params.items()}

    def congruent(self, other: "ParamSet") -> bool:
        return list(self._params) == list(other._params) and self.shapes() == other.shapes()

    def _check(self, other: "ParamSet", what: str) -> None:
        if not self.congruent(other):
            raise ContractError(f"{what}: ParamSets are not congruent")

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.values for k, t in self._params.items()}

    def copy(self) -> "ParamSet":
        return ParamSet.from_arrays({k: v.copy() for k, v in self.arrays().items()})

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet({k: t for k, t in self._params.items() if k.startswith(prefix)})

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def flat(self) -> np.ndarray:
        return np.concatenate([t.values.ravel() for t in self._params.values()])

    def l2_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(t.values ** 2)) for t in self._params.values())))

    def __add__(self, other: "ParamSet") -> "ParamSet":
        self._check(other, "add")
        return ParamSet.from_arrays({k: v + other[k].values for k, v in self.arrays().items()})

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        self._check(other, "subtract")
        return ParamSet.from_arrays({k: v - other[k].values for k, v in self.arrays().items()})

    def __mul__(self, c: float) -> "ParamSet":
        c = float(c)
        return ParamSet.from_arrays({k: v * c for k, v in self.arrays().items()})

    __rmul__ = __mul__

    def equal(self, other: "ParamSet") -> bool:
        """Bit-exact equality of paths, shapes and values."""
        return self.congruent(other) and all(
            np.array_equal(v, other[k].values) for k, v in self.arrays().items()
        )

    @staticmethod
    def zeros_like(other: "ParamSet") -> "ParamSet":
        return ParamSet.from_arrays({k: np.zeros(s) for k, s in other.shapes().items()})


def sgd_step(params: Mapping[str, Tensor] | ParamSet, lr: float) -> None:
    """In-place ``value -= lr * grad`` for every trainable tensor, then clear grads."""
    tensors = list(params.values())
    for t in tensors:
        if t.requires_grad and t.grad is None:
            raise ContractError("sgd_step: a trainable parameter has no gradient")
    for t in tensors:
        if t.requires_grad:
            if lr != 0.0:
                t.values = t.values - lr * t.grad
            t.grad = None


# ---------------------------------------------------------------------------
# checkpoint: header, JSON metadata, then (path, shape, values) records, all
# little-endian so the bytes are stable for a fixed parameter set


def dumps_checkpoint(params: ParamSet, meta: Mapping | None = None) -> bytes:
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode()
    out = [_MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    for path, t in params.items():
        p = path.encode()
        out.append(struct.pack("<H", len(p)))
        out.append(p)
        out.append(struct.pack("<B", t.ndim))
        out.append(struct.pack(f"<{t.ndim}q", *t.shape))
        out.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    return b"".join(out)


def loads_checkpoint(data: bytes) -> tuple[ParamSet, dict]:
    if data[:8] != _MAGIC:
        raise FedalError("not a fedal checkpoint (bad magic)")
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (mlen,) = take("<I")
    meta = json.loads(data[pos:pos + mlen].decode())
    pos += mlen
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (plen,) = take("<H")
        path = data[pos:pos + plen].decode()
        pos += plen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arrays[path] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return ParamSet.from_arrays(arrays), meta


def save_checkpoint(path: str | Path, params: ParamSet, meta: Mapping | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_checkpoint(params, meta))


def load_checkpoint(path: str | Path) -> tuple[ParamSet, dict]:
    return loads_checkpoint(Path(path).read_bytes())
