"""Binary interchange formats: weight checkpoints, depth rasters, PNG I/O.

Checkpoint ("LAPW"): little-endian; magic, u32 version, then records of
(u32 name length, UTF-8 name, u32 rank, u32 extents, float64 payload).
Round-trips are bit-exact.

Depth raster ("LAPD"): 16-byte header (magic, u32 height, u32 width,
u32 reserved zero) followed by row-major little-endian float32 values.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .errors import FormatError

CHECKPOINT_MAGIC = b"LAPW"
CHECKPOINT_VERSION = 1
RASTER_MAGIC = b"LAPD"

MASK_LEVELS = {0: 0.0, 77: 0.3, 255: 1.0}
MASK_BYTES = {0.0: 0, 0.3: 77, 1.0: 255}


def write_checkpoint(path, tensors):
    """Write an ordered mapping of name -> float64 array."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 8
    out = {}
    while offset < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + nlen].decode("utf-8")
        offset += nlen
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        out[name] = arr.astype(np.float64).reshape(shape)
    return out


def write_depth_raster(path, depth):
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise FormatError(f"depth raster must be 2-D, got shape {depth.shape}")
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(struct.pack("<III", depth.shape[0], depth.shape[1], 0))
        fh.write(depth.astype("<f4", copy=False).tobytes())


def read_depth_raster(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RASTER_MAGIC:
        raise FormatError(f"{path}: bad raster magic {blob[:4]!r}")
    h, w, _reserved = struct.unpack_from("<III", blob, 4)
    arr = np.frombuffer(blob, dtype="<f4", count=h * w, offset=16)
    return arr.astype(np.float64).reshape(h, w)


def save_image(path, image):
    """Save a [3,H,W] or [H,W] float image in [0,1] as 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_image(path):
    """Load a PNG as float [3,H,W] in [0,1]; grayscale is broadcast to RGB."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))


def save_normal_map(path, normals):
    """Normals [3,H,W] in [-1,1] saved as PNG via (n+1)/2."""
    save_image(path, (np.asarray(normals) + 1.0) / 2.0)


def save_mask_png(path, weights):
    """Relaxed-mask weights {0, 0.3, 1} -> grayscale bytes {0, 77, 255}."""
    weights = np.asarray(weights)
    data = np.zeros(weights.shape, dtype=np.uint8)
    for value, byte in MASK_BYTES.items():
        data[weights == value] = byte
    Image.fromarray(data, mode="L").save(path)


def load_mask_png(path):
    """Grayscale PNG -> weights via {0 -> 0, 77 -> 0.3, 255 -> 1}.

    Any other pixel value is rejected.
    """
    with Image.open(path) as img:
        raw = np.asarray(img.convert("L"))
    weights = np.full(raw.shape, -1.0)
    for byte, value in MASK_LEVELS.items():
        weights[raw == byte] = value
    if np.any(weights < 0):
        bad = sorted(set(np.unique(raw)) - set(MASK_LEVELS))
        raise FormatError(f"{path}: unexpected mask pixel values {bad}")
    return weights
