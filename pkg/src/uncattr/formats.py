"""On-disk artifact formats: attribution maps, PGM previews, manifests.

An attribution map file is a diffable text format: four ``key value`` header
lines (width, height, method, completeness_residual) followed by one signed
decimal per pixel, row-major, one per line.  The optional PGM preview maps
the attribution range symmetrically onto [0, 255] with 128 meaning zero.
Manifests are sorted ``key=value`` lines with no timestamps, so re-running a
command with the same configuration reproduces them byte for byte.
"""

from __future__ import annotations

import numpy as np


class MapFormatError(Exception):
    """Malformed attribution map file."""


def write_attr_map(path, values, width, height, method, residual):
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size != width * height:
        raise MapFormatError(f"{values.size} values for a {width}x{height} map")
    lines = [
        f"width {width}",
        f"height {height}",
        f"method {method}",
        f"completeness_residual {residual!r}",
    ]
    lines.extend(repr(float(v)) for v in values)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_attr_map(path):
    """Returns (values (h*w,), header dict)."""
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh]
    header = {}
    for line in lines[:4]:
        try:
            key, value = line.split(" ", 1)
        except ValueError as exc:
            raise MapFormatError(f"bad header line: {line!r}") from exc
        header[key] = value
    for key in ("width", "height", "method", "completeness_residual"):
        if key not in header:
            raise MapFormatError(f"missing header field {key!r}")
    width, height = int(header["width"]), int(header["height"])
    body = [line for line in lines[4:] if line]
    if len(body) != width * height:
        raise MapFormatError(
            f"expected {width * height} values, found {len(body)}"
        )
    values = np.array([float(v) for v in body], dtype=np.float64)
    header["completeness_residual"] = float(header["completeness_residual"])
    return values, header


def write_pgm(path, values, width, height):
    """8-bit binary PGM preview: 128 = zero, range scaled symmetrically."""
    values = np.asarray(values, dtype=np.float64).reshape(height, width)
    scale = np.max(np.abs(values))
    if scale == 0.0:
        pixels = np.full((height, width), 128, dtype=np.uint8)
    else:
        pixels = np.clip(
            np.rint(128.0 + 127.0 * values / scale), 0, 255
        ).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_manifest(path, entries: dict):
    lines = [f"{key}={entries[key]}" for key in sorted(entries)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            entries[key] = value
    return entries
