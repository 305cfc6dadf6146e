"""Role-tagged parameter collections and the binary checkpoint format."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from fraug.tensor import Tensor

ROLES = ("extractor", "head", "batchnorm", "generator", "rtnet")
ROLE_CODES = {role: i for i, role in enumerate(ROLES)}
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
MAGIC = b"FRAUG001"

# Entries with these suffixes are statistics, not trainable parameters.
BUFFER_SUFFIXES = (".running_mean", ".running_var")


class StructureError(ValueError):
    """Two parameter sets do not line up name-for-name."""


class CheckpointError(ValueError):
    pass


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


class ParameterSet:
    """Ordered mapping ``name -> (Tensor, role)``."""

    def __init__(self, entries: Iterable[tuple[str, Tensor, str]] = ()):
        self._tensors: dict[str, Tensor] = {}
        self._roles: dict[str, str] = {}
        for name, tensor, role in entries:
            self.add(name, tensor, role)

    def add(self, name: str, tensor: Tensor, role: str) -> Tensor:
        if role not in ROLE_CODES:
            raise ValueError(f"unknown role {role!r}")
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor
        self._roles[name] = role
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __repr__(self) -> str:
        return f"ParameterSet({len(self)} entries, {self.numel()} scalars)"

    def role(self, name: str) -> str:
        return self._roles[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor, str]]:
        for name, t in self._tensors.items():
            yield name, t, self._roles[name]

    def roles(self) -> set[str]:
        return set(self._roles.values())

    def select(self, roles=None, exclude=(), trainable_only: bool = False) -> "ParameterSet":
        """View (sharing tensors) of the entries matching the role filters."""
        roles = None if roles is None else set(roles)
        exclude = set(exclude)
        out = ParameterSet()
        for name, t, role in self.items():
            if roles is not None and role not in roles:
                continue
            if role in exclude or (trainable_only and not t.requires_grad):
                continue
            out.add(name, t, role)
        return out

    def subset(self, names) -> "ParameterSet":
        """View of the named entries, in the order given."""
        return ParameterSet((n, self._tensors[n], self._roles[n]) for n in names)

    def numel(self, roles=None) -> int:
        roles = None if roles is None else set(roles)
        return sum(t.size for _, t, r in self.items() if roles is None or r in roles)

    def copy(self) -> "ParameterSet":
        return ParameterSet((n, t.copy(), r) for n, t, r in self.items())

    def detached(self) -> "ParameterSet":
        """Same values as constants; nothing computed from it reaches our grads."""
        return ParameterSet((n, Tensor(t.data), r) for n, t, r in self.items())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            if t.requires_grad:
                t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def signature(self) -> list[tuple[str, str, tuple[int, ...]]]:
        return [(n, self._roles[n], t.shape) for n, t in self._tensors.items()]

    def check_compatible(self, other: "ParameterSet") -> None:
        mine, theirs = self.signature(), other.signature()
        for a, b in zip(mine, theirs):
            if a != b:
                raise StructureError(f"parameter mismatch at {a[0]!r}: {a} vs {b}")
        if len(mine) != len(theirs):
            longer = mine if len(mine) > len(theirs) else theirs
            raise StructureError(f"parameter mismatch at {longer[min(len(mine), len(theirs))][0]!r}: entry counts differ")

    def compatible(self, other: "ParameterSet") -> bool:
        return self.signature() == other.signature()

    def load_values(self, other: "ParameterSet", skip_roles=()) -> None:
        """Copy values (not tensors) from ``other`` for every name it carries."""
        skip_roles = set(skip_roles)
        for name, t, role in other.items():
            if name not in self._tensors:
                raise StructureError(f"unknown parameter {name!r} in payload")
            mine = self._tensors[name]
            if self._roles[name] != role or mine.shape != t.shape:
                raise StructureError(f"parameter mismatch at {name!r}")
            if role in skip_roles:
                continue
            mine.data[...] = t.data

    # ------------------------------------------------------------ checkpoints
    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", len(self))]
        for name, t, role in self.items():
            encoded = name.encode("utf-8")
            try:
                dcode = DTYPE_CODES[t.dtype]
            except KeyError:
                raise CheckpointError(f"cannot serialize dtype {t.dtype} of {name!r}") from None
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<BBB", ROLE_CODES[role], dcode, t.data.ndim))
            parts.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
            parts.append(np.ascontiguousarray(t.data, dtype=t.dtype.newbyteorder("<")).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterSet":
        if blob[:8] != MAGIC:
            raise CheckpointError("bad magic bytes")
        pos = 8

        def take(fmt):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(blob):
                raise CheckpointError("truncated checkpoint")
            vals = struct.unpack_from(fmt, blob, pos)
            pos += size
            return vals

        (count,) = take("<I")
        out = cls()
        for _ in range(count):
            (nlen,) = take("<H")
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            rcode, dcode, rank = take("<BBB")
            dims = take(f"<{rank}I")
            try:
                dtype = CODE_DTYPES[dcode]
                role = ROLES[rcode]
            except (KeyError, IndexError):
                raise CheckpointError(f"bad role/dtype code for {name!r}") from None
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError("truncated checkpoint")
            data = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=nbytes // dtype.itemsize, offset=pos)
            pos += nbytes
            arr = data.astype(dtype).reshape(dims)
            out.add(name, Tensor(arr, requires_grad=not is_buffer(name)), role)
        if pos != len(blob):
            raise CheckpointError("trailing bytes after checkpoint")
        return out

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParameterSet":
        return cls.from_bytes(Path(path).read_bytes())
