"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SACN"  u32 version
    u32 n  + n bytes UTF-8 text  (resolved config lines, then ``state.*`` lines)
    repeated until EOF:
        u32 n + n bytes UTF-8 tensor name
        u8 rank, rank x u32 extents
        prod(extents) x float64

Parameters keep their plain names; optimizer moments are stored as
``adam.m/<name>`` and ``adam.v/<name>``, spectral-norm state as
``sn.u/<name>`` and ``sn.sigma/<name>``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_text
from .data import DataError

MAGIC = b"SACN"
VERSION = 1


class CheckpointError(DataError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    tensors: dict[str, np.ndarray]
    state: dict[str, int] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        text = self.config.to_text() + "".join(
            f"state.{k} = {int(v)}\n" for k, v in sorted(self.state.items()))
        tb = text.encode("utf-8")
        out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(tb)), tb]
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f8")
            nb = name.encode("utf-8")
            out.append(struct.pack("<I", len(nb)) + nb)
            out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> "Checkpoint":
        if blob[:4] != MAGIC:
            raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
        pos = 4
        try:
            (version,) = struct.unpack_from("<I", blob, pos)
            if version != VERSION:
                raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
            (n,) = struct.unpack_from("<I", blob, pos + 4)
            pos += 8
            text = blob[pos:pos + n].decode("utf-8")
            pos += n
            tensors = {}
            while pos < len(blob):
                (n,) = struct.unpack_from("<I", blob, pos)
                name = blob[pos + 4:pos + 4 + n].decode("utf-8")
                pos += 4 + n
                (rank,) = struct.unpack_from("<B", blob, pos)
                shape = struct.unpack_from(f"<{rank}I", blob, pos + 1)
                pos += 1 + 4 * rank
                count = int(np.prod(shape)) if rank else 1
                if pos + 8 * count > len(blob):
                    raise CheckpointError(f"{source}: tensor {name!r} truncated")
                tensors[name] = np.frombuffer(blob, dtype="<f8", count=count,
                                              offset=pos).reshape(shape).copy()
                pos += 8 * count
        except struct.error:
            raise CheckpointError(f"{source}: truncated checkpoint") from None
        flat = parse_text(text)
        state = {k[len("state."):]: int(v) for k, v in flat.items() if k.startswith("state.")}
        config = RunConfig.from_flat({k: v for k, v in flat.items() if not k.startswith("state.")})
        return cls(config, tensors, state)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes(), str(path))


def capture(model, optimizer=None, state: dict | None = None) -> Checkpoint:
    tensors = {name: t.data.astype(np.float64) for name, t in model.named_parameters()}
    for name, sn in model.spectral_states().items():
        tensors[f"sn.u/{name}"] = np.asarray(sn.u, dtype=np.float64)
        tensors[f"sn.sigma/{name}"] = np.array([sn.sigma])
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    st = dict(state or {})
    if optimizer is not None:
        st["opt_step"] = optimizer.step_count
    return Checkpoint(model.config, tensors, st)


def restore(ckpt: Checkpoint, optimizer_factory=None):
    """Rebuild ``(model, optimizer)`` from a checkpoint."""
    from .model import SacnModel
    from .train import make_optimizer

    model = SacnModel(ckpt.config)
    params = dict(model.named_parameters())
    missing = [n for n in params if n not in ckpt.tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing}")
    for name, t in params.items():
        stored = ckpt.tensors[name]
        if stored.shape != t.shape:
            raise CheckpointError(f"{name}: stored shape {stored.shape} vs model {t.shape}")
        t.data = stored.astype(model.dtype)
    for name, sn in model.spectral_states().items():
        sn.u = ckpt.tensors[f"sn.u/{name}"].copy()
        sn.sigma = float(ckpt.tensors[f"sn.sigma/{name}"][0])
        sn.v = None
    optimizer = (optimizer_factory or make_optimizer)(model)
    optimizer.load_state_tensors(ckpt.tensors, ckpt.state.get("opt_step", 0))
    return model, optimizer
