"""Named parameter store and the PULSCKPT checkpoint format.

Layout (all integers little-endian)::

    b"PULSCKPT" | version u32 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | float32 payload
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from pulse.core.autodiff import Tensor
from pulse.errors import InvalidArgument, IoError, ProtocolViolation

MAGIC = b"PULSCKPT"
VERSION = 1


class ParamStore:
    """Ordered ``name -> Tensor`` map whose shapes are fixed at creation."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self.step_count = 0
        self.locked = False

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise InvalidArgument(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float32), requires_grad=trainable)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def set(self, name: str, value) -> None:
        t = self._entries[name]
        value = np.asarray(value, dtype=t.dtype)
        if value.shape != t.shape:
            raise InvalidArgument(f"shape of {name!r} is fixed at {t.shape}, got {value.shape}")
        t.data = value.copy()

    def freeze(self, prefix: str = "") -> None:
        for name, t in self._entries.items():
            if name.startswith(prefix):
                t.requires_grad = False

    def unfreeze(self, prefix: str = "") -> None:
        for name, t in self._entries.items():
            if name.startswith(prefix):
                t.requires_grad = True

    def trainable(self) -> list[str]:
        return [n for n, t in self._entries.items() if t.requires_grad]

    def lock(self) -> None:
        """Forbid further optimizer steps (used for zero-update evaluation)."""
        self.locked = True

    def check_writable(self) -> None:
        if self.locked:
            raise ProtocolViolation("parameter store is locked against updates")

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._entries.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, v in snap.items():
            self.set(n, v)

    # -- serialization -------------------------------------------------
    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self._entries))]
        for name, t in self._entries.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes, trainable: bool = True) -> "ParamStore":
        if blob[:8] != MAGIC:
            raise IoError("not a PULSCKPT checkpoint (bad magic)")
        version, count = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise IoError(f"unsupported checkpoint version {version}")
        off = 16
        store = cls()
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", blob, off)
                off += 2
                name = blob[off:off + nlen].decode("utf-8")
                off += nlen
                (rank,) = struct.unpack_from("<B", blob, off)
                off += 1
                dims = struct.unpack_from(f"<{rank}I", blob, off)
                off += 4 * rank
                n = int(np.prod(dims)) if rank else 1
                arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
                off += 4 * n
                store.add(name, arr.astype(np.float32), trainable=trainable)
        except (struct.error, ValueError) as exc:
            raise IoError(f"truncated or corrupt checkpoint: {exc}") from exc
        if off != len(blob):
            raise IoError("trailing bytes after checkpoint entries")
        return store

    def save(self, path: str | Path) -> None:
        from pulse.utils import write_bytes
        write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, trainable: bool = True) -> "ParamStore":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(blob, trainable=trainable)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()
