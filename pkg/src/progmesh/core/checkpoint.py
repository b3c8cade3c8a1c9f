"""Binary tensor container.

Layout (little-endian)::

    b"TOFU" | u32 version | u32 count | count * entry
    entry := u32 name_len | name utf-8 | u32 rank | rank * u64 extent | f64 data

Adam state lives in the same container under ``adam/`` names.
"""
import struct

import numpy as np

MAGIC = b"TOFU"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors):
    """Write ``{name: array}`` in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            if name in out:
                raise CheckpointError(f"{path}: duplicate entry {name!r}")
            out[name] = arr.astype(np.float64)
    except CheckpointError:
        raise
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated file") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def encode_text(text):
    """Store UTF-8 text as a float64 byte vector (the container holds only f64)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr):
    return np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8")


def adam_to_tensors(state):
    out = {"adam/step": np.array([float(state.step)]),
           "adam/hyper": np.array([state.lr, state.beta1, state.beta2, state.eps])}
    for name in state.m:
        out[f"adam/m/{name}"] = state.m[name]
        out[f"adam/v/{name}"] = state.v[name]
    return out


def adam_from_tensors(tensors):
    from .optim import AdamState
    lr, b1, b2, eps = tensors["adam/hyper"]
    st = AdamState(lr=float(lr), beta1=float(b1), beta2=float(b2), eps=float(eps),
                   step=int(tensors["adam/step"][0]))
    for key, arr in tensors.items():
        if key.startswith("adam/m/"):
            name = key[len("adam/m/"):]
            st.m[name] = arr.copy()
            st.v[name] = tensors[f"adam/v/{name}"].copy()
    return st
