"""Named, shape-tagged parameter blocks: the unit models train and clients exchange."""
from __future__ import annotations

import hashlib
import json
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from stfl.errors import NumericFault


class ParamVector(Mapping[str, np.ndarray]):
    """Ordered mapping of block name to array.

    ``layout_hash`` identifies (names, shapes, order) and is what aggregation
    checks for compatibility; ``digest`` additionally covers the values.
    """

    def __init__(self, blocks: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = blocks.items() if isinstance(blocks, Mapping) else blocks
        self._blocks: dict[str, np.ndarray] = {}
        for name, arr in items:
            arr = np.ascontiguousarray(arr)
            if not np.isfinite(arr).all():
                raise NumericFault(f"parameter block {name!r} holds non-finite values")
            self._blocks[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._blocks[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)

    def __repr__(self) -> str:
        return f"ParamVector({len(self)} blocks, {self.size} values, layout={self.layout_hash[:12]})"

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self._blocks.values()))

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(int(d) for d in v.shape)) for k, v in self._blocks.items()]

    @property
    def layout_hash(self) -> str:
        payload = json.dumps(self.layout, separators=(",", ":")).encode()
        return hashlib.sha256(payload).hexdigest()

    def digest(self) -> str:
        h = hashlib.sha256(self.layout_hash.encode())
        for arr in self._blocks.values():
            h.update(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()

    def flat(self, dtype=None) -> np.ndarray:
        if not self._blocks:
            return np.zeros(0, dtype=dtype or np.float32)
        return np.concatenate([a.reshape(-1) for a in self._blocks.values()]).astype(dtype or self.dtype, copy=False)

    @property
    def dtype(self):
        return next(iter(self._blocks.values())).dtype if self._blocks else np.dtype(np.float32)

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        out, pos = [], 0
        for name, arr in self._blocks.items():
            out.append((name, flat[pos:pos + arr.size].reshape(arr.shape).astype(arr.dtype)))
            pos += arr.size
        return ParamVector(out)

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ParamVector":
        return ParamVector((k, fn(k, v)) for k, v in self._blocks.items())

    def astype(self, dtype) -> "ParamVector":
        return self.map(lambda _, v: v.astype(dtype))

    def copy(self) -> "ParamVector":
        return self.map(lambda _, v: v.copy())

    def prefixed(self, prefix: str) -> "ParamVector":
        return ParamVector((f"{prefix}{k}", v) for k, v in self._blocks.items())

    def select(self, prefix: str) -> "ParamVector":
        """Blocks whose name starts with ``prefix``, with the prefix stripped."""
        n = len(prefix)
        return ParamVector((k[n:], v) for k, v in self._blocks.items() if k.startswith(prefix))

    def equal(self, other: "ParamVector") -> bool:
        return self.layout_hash == other.layout_hash and all(
            np.array_equal(self[k], other[k]) for k in self)
