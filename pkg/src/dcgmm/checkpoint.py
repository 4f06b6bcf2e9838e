"""Versioned binary checkpoint container for trained models.

Layout (all integers little-endian):

    magic   4 bytes   b"DCGM"
    version u32       currently 1
    arch    u32 length + UTF-8 architecture string
    input   u32 length + UTF-8 "h,w,c"
    count   u32 number of named arrays
    arrays  per array: u16 name length, UTF-8 name, u8 ndim,
            u64 per dimension, float64 payload
    crc     u32 CRC-32 of everything before it

The container is self-describing and bit-exact: identical model state
produces identical bytes.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from . import gmm as G
from .errors import CheckpointError
from .layers import LinearParams
from .model import DcgmmModel, LikelihoodStats, build_model, format_architecture

MAGIC = b"DCGM"
VERSION = 1


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + arr.astype("<f8").tobytes()


def _model_arrays(model: DcgmmModel) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for i in model.gmm_layer_indices:
        p = model.gmm_params[i]
        st = model.annealing[i]
        lk = model.stats[i]
        arrays[f"layer{i}.xi"] = p.xi
        arrays[f"layer{i}.mu"] = p.mu
        arrays[f"layer{i}.chol_d"] = p.chol_d
        arrays[f"layer{i}.d_max"] = np.array([p.d_max])
        arrays[f"layer{i}.annealing"] = np.array([
            st.sigma, st.sigma0, st.sigma_inf, st.alpha, st.delta_threshold,
            st.ell if st.ell is not None else 0.0,
            1.0 if st.ell is not None else 0.0,
            st.ell_prev if st.ell_prev is not None else 0.0,
            1.0 if st.ell_prev is not None else 0.0,
            st.ell_t0 if st.ell_t0 is not None else 0.0,
            1.0 if st.ell_t0 is not None else 0.0,
            float(st.iteration),
        ])
        arrays[f"layer{i}.stats"] = np.array([float(lk.count), lk.mean, lk.m2])
        arrays[f"layer{i}.eps"] = np.array([model.eps_by_layer.get(i, 0.0)])
    if model.linear is not None:
        arrays["linear.weights"] = model.linear.weights
        arrays["linear.bias"] = model.linear.bias
    arrays["train.eps_classifier"] = np.array([model.eps_classifier])
    arrays["train.warmup_fraction"] = np.array([model.warmup_fraction])
    return arrays


def save_checkpoint(model: DcgmmModel, path) -> None:
    """Serialize the full model state (parameters, annealing, statistics)."""
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    arch = format_architecture(model.specs).encode("utf-8")
    body += struct.pack("<I", len(arch)) + arch
    shape = ",".join(str(v) for v in model.input_shape).encode("utf-8")
    body += struct.pack("<I", len(shape)) + shape
    arrays = _model_arrays(model)
    body += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        body += _pack_array(name, arrays[name])
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as f:
        f.write(bytes(body))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path) -> DcgmmModel:
    """Reconstruct a model; rejects bad magic, version, truncation or CRC."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise CheckpointError("file too short to be a checkpoint")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError("checksum mismatch (file corrupted)")
    r = _Reader(blob[:-4])
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes: not a model checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch = r.take(r.u32()).decode("utf-8")
    input_shape = tuple(int(v) for v in r.take(r.u32()).decode("utf-8").split(","))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u16()).decode("utf-8")
        ndim = r.u8()
        shape = tuple(r.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        arrays[name] = data.copy()
    if r.pos != len(r.blob):
        raise CheckpointError("trailing bytes inside checkpoint body")

    model = build_model(arch, input_shape)
    for i in model.gmm_layer_indices:
        try:
            p = model.gmm_params[i]
            d_max = float(arrays[f"layer{i}.d_max"][0])
            model.gmm_params[i] = G.GmmParams(
                xi=arrays[f"layer{i}.xi"], mu=arrays[f"layer{i}.mu"],
                chol_d=arrays[f"layer{i}.chol_d"], grid=p.grid, d_max=d_max)
            a = arrays[f"layer{i}.annealing"]
            model.annealing[i] = G.AnnealingState(
                sigma=a[0], sigma0=a[1], sigma_inf=a[2], alpha=a[3],
                delta_threshold=a[4],
                ell=a[5] if a[6] else None,
                ell_prev=a[7] if a[8] else None,
                ell_t0=a[9] if a[10] else None,
                iteration=int(a[11]))
            s = arrays[f"layer{i}.stats"]
            model.stats[i] = LikelihoodStats(count=int(s[0]), mean=s[1], m2=s[2])
            model.eps_by_layer[i] = float(arrays[f"layer{i}.eps"][0])
        except KeyError as exc:
            raise CheckpointError(f"missing array for layer {i}: {exc}") from exc
    if model.linear is not None:
        try:
            model.linear = LinearParams(arrays["linear.weights"], arrays["linear.bias"])
        except KeyError as exc:
            raise CheckpointError(f"missing classifier arrays: {exc}") from exc
    model.eps_classifier = float(arrays["train.eps_classifier"][0])
    model.warmup_fraction = float(arrays["train.warmup_fraction"][0])
    return model
