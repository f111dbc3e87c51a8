"""Patch artifact file format and PPM export.

Layout of a `.upaf` file, all integers little-endian:

    bytes 0..3    magic "UPAF"
    bytes 4..7    format version (u32, currently 1)
    bytes 8..11   patch height h (u32)
    bytes 12..15  patch width w (u32)
    next h*w*3*4  texels as float32, row-major, channel-interleaved
    next 4        metadata length (u32)
    rest          metadata, UTF-8 "key = value" lines

Round-tripping reproduces the texels at float32 precision exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .render import PatchTexture

__all__ = ["ArtifactError", "MAGIC", "VERSION", "save_patch", "load_patch", "write_ppm", "read_ppm"]

MAGIC = b"UPAF"
VERSION = 1


class ArtifactError(Exception):
    """Corrupt, truncated, or out-of-contract artifact file."""


def save_patch(path, patch: PatchTexture, metadata: dict[str, str] | None = None) -> None:
    texels = np.ascontiguousarray(patch.texels, dtype="<f4")
    meta_lines = [f"{k} = {v}" for k, v in sorted((metadata or {}).items())]
    meta = ("\n".join(meta_lines) + ("\n" if meta_lines else "")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, patch.height, patch.width))
        fh.write(texels.tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def load_patch(path) -> tuple[PatchTexture, dict[str, str]]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ArtifactError(f"cannot read patch {path}: {exc}") from None
    if len(blob) < 16:
        raise ArtifactError("truncated artifact header")
    if blob[:4] != MAGIC:
        raise ArtifactError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, height, width = struct.unpack("<III", blob[4:16])
    if version != VERSION:
        raise ArtifactError(f"unsupported format version {version}")
    n_texel_bytes = height * width * 3 * 4
    body_end = 16 + n_texel_bytes
    if len(blob) < body_end + 4:
        raise ArtifactError("truncated texel payload")
    texels = np.frombuffer(blob[16:body_end], dtype="<f4").reshape(height, width, 3)
    (meta_len,) = struct.unpack("<I", blob[body_end : body_end + 4])
    meta_end = body_end + 4 + meta_len
    if len(blob) != meta_end:
        raise ArtifactError("artifact length does not match its header")
    metadata = {}
    for line in blob[body_end + 4 :].decode("utf-8").splitlines():
        if " = " in line:
            key, value = line.split(" = ", 1)
            metadata[key] = value
    patch_values = texels.astype(np.float64)
    if not np.all(np.isfinite(patch_values)) or patch_values.min() < 0 or patch_values.max() > 1:
        raise ArtifactError("texels outside [0, 1]")
    return PatchTexture(patch_values), metadata


def write_ppm(path, patch: PatchTexture, scale: int = 1) -> None:
    """Binary P6 export, 8-bit, round-half-to-even quantization."""
    if scale < 1:
        raise ValueError("scale must be a positive integer")
    quantized = np.rint(patch.texels * 255.0).clip(0, 255).astype(np.uint8)
    if scale > 1:
        quantized = quantized.repeat(scale, axis=0).repeat(scale, axis=1)
    height, width = quantized.shape[0], quantized.shape[1]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def read_ppm(path) -> np.ndarray:
    """Load a P6 file back to float64 in [0, 1] (test utility)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise ArtifactError("not a binary PPM file")
    width, height = (int(tok) for tok in parts[1].split())
    if parts[2] != b"255":
        raise ArtifactError("unsupported maxval")
    data = np.frombuffer(parts[3], dtype=np.uint8)
    if data.size != width * height * 3:
        raise ArtifactError("pixel payload size mismatch")
    return data.reshape(height, width, 3).astype(np.float64) / 255.0
