"""File formats: CSV schemas, PPM/PGM rasters, XYZ clouds, JSON sidecars.

All CSVs are headered, comma-separated, UTF-8, '.' decimal, with timestamps as
float seconds from the scenario epoch.  Floats are written with a fixed
shortest-roundtrip format so identical data produces identical bytes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .estimator import STATE_NAMES, StateEstimate
from .geometry import FrameTag, GridAnchor
from .maps import AprioriMap, RasterPatch

STATE_LOG_COLUMNS = (
    ["stamp", "frame"]
    + list(STATE_NAMES)
    + [f"cov_{name}" for name in STATE_NAMES]
)
TRUTH_COLUMNS = ["stamp"] + list(STATE_NAMES)
IMU_COLUMNS = ["stamp", "fx", "fy", "fz", "wx", "wy", "wz"]
INS_COLUMNS = ["stamp", "roll", "pitch", "yaw", "wx", "wy", "wz"]
ENCODER_COLUMNS = ["stamp", "speed"]
SAMPLES_COLUMNS = ["d", "ate", "rpe"]


def _fmt(x) -> str:
    return format(float(x), ".12g")


def write_csv(path, columns, rows) -> None:
    """Write rows (iterables of numbers/strings) under a header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(v if isinstance(v, str) else _fmt(v) for v in row) + "\n")


def read_csv(path, expected_columns=None) -> dict[str, np.ndarray]:
    """Read a headered CSV into column arrays (numeric except 'frame'/'file')."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"missing file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if not header:
            raise SchemaError(f"{path}: empty file")
        names = header.split(",")
        if expected_columns is not None and names != list(expected_columns):
            raise SchemaError(
                f"{path}: header mismatch\n  expected {list(expected_columns)}\n  found    {names}"
            )
        text_cols = {i for i, n in enumerate(names) if n in ("frame", "file", "source", "kind")}
        cols: list[list] = [[] for _ in names]
        for ln, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(names):
                raise SchemaError(f"{path}:{ln}: expected {len(names)} fields, found {len(parts)}")
            for i, part in enumerate(parts):
                if i in text_cols:
                    cols[i].append(part)
                else:
                    try:
                        cols[i].append(float(part))
                    except ValueError:
                        raise SchemaError(f"{path}:{ln}: non-numeric value {part!r} in column {names[i]!r}")
    out = {}
    for i, n in enumerate(names):
        out[n] = np.asarray(cols[i]) if i not in text_cols else np.asarray(cols[i], dtype=object)
    return out


def state_log_row(state: StateEstimate) -> list:
    diag = np.diag(state.covariance)
    return [state.stamp, state.frame.value, *state.mean.tolist(), *diag.tolist()]


def write_state_log(path, states) -> None:
    write_csv(path, STATE_LOG_COLUMNS, (state_log_row(s) for s in states))


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(stamps, positions (N,3), yaws) from a truth or state-log CSV."""
    cols = read_csv(path)
    for needed in ("stamp", "x", "y", "z", "yaw"):
        if needed not in cols:
            raise SchemaError(f"{path}: missing column {needed!r}")
    stamps = cols["stamp"]
    positions = np.c_[cols["x"], cols["y"], cols["z"]]
    return stamps, positions, cols["yaw"]


# ---------------------------------------------------------------------------
# PPM / PGM rasters

# Rasters are stored row 0 = northernmost (standard image convention); the
# in-memory grids have row 0 = southernmost, so writers/readers flip.


def write_ppm(path, colors: np.ndarray) -> None:
    """8-bit binary PPM from an (ny, nx, 3) float color grid (row 0 = south)."""
    img = np.clip(np.round(colors[::-1]), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise SchemaError(f"{path}: not a binary PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    w, h, maxval = (int(v) for v in fields)
    if maxval != 255:
        raise SchemaError(f"{path}: unsupported max value {maxval}")
    img = np.frombuffer(data[pos : pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return img[::-1].astype(float)


def write_pgm16(path, values: np.ndarray, scale: float = 0.01, offset: float = 0.0) -> None:
    """16-bit PGM of (values - offset) / scale, row-flipped like PPM."""
    q = np.clip(np.round((values[::-1] - offset) / scale), 0, 65535).astype(">u2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{q.shape[1]} {q.shape[0]}\n65535\n".encode())
        f.write(q.tobytes())


def read_pgm16(path, scale: float = 0.01, offset: float = 0.0) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise SchemaError(f"{path}: not a binary PGM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    w, h, maxval = (int(v) for v in fields)
    if maxval != 65535:
        raise SchemaError(f"{path}: expected 16-bit PGM")
    img = np.frombuffer(data[pos : pos + w * h * 2], dtype=">u2").reshape(h, w)
    return img[::-1].astype(float) * scale + offset


def write_pgm8(path, values: np.ndarray) -> None:
    """8-bit PGM debug dump of a [-1, 1] or [0, 1] surface."""
    v = np.asarray(values, dtype=float)
    lo, hi = float(np.nanmin(v)), float(np.nanmax(v))
    span = hi - lo if hi > lo else 1.0
    q = np.clip(np.round((v[::-1] - lo) / span * 255), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode())
        f.write(np.nan_to_num(q).tobytes())


# ---------------------------------------------------------------------------
# XYZ clouds


def write_xyz(path, points: np.ndarray) -> None:
    """'x y z [r g b]' text lines."""
    pts = np.asarray(points, dtype=float)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if pts.shape[1] >= 6:
            for p in pts:
                f.write(
                    f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} "
                    f"{int(round(p[3]))} {int(round(p[4]))} {int(round(p[5]))}\n"
                )
        else:
            for p in pts:
                f.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")


def read_xyz(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"missing file: {path}")
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (3, 6):
                raise SchemaError(f"{path}:{ln}: expected 'x y z [r g b]', found {len(parts)} fields")
            rows.append([float(v) for v in parts] + [0.0] * (6 - len(parts)))
    if not rows:
        raise SchemaError(f"{path}: empty cloud")
    return np.asarray(rows)


# ---------------------------------------------------------------------------
# A priori map bundle


def write_apriori(dirpath, amap: AprioriMap, elev_scale: float = 0.01) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    write_ppm(dirpath / "color.ppm", amap.color.colors)
    write_pgm16(dirpath / "elevation.pgm", amap.elevation, scale=elev_scale)
    write_xyz(dirpath / "cloud.xyz", amap.cloud)
    sidecar = {
        "origin_easting": float(amap.color.origin[0]),
        "origin_northing": float(amap.color.origin[1]),
        "cell_size": float(amap.color.cell_size),
        "elevation_scale": elev_scale,
        "anchor": {
            "easting": amap.anchor.easting,
            "northing": amap.anchor.northing,
            "altitude": amap.anchor.altitude,
            "heading": amap.anchor.heading,
        },
    }
    write_json(dirpath / "georef.json", sidecar)


def read_apriori(dirpath) -> AprioriMap:
    dirpath = Path(dirpath)
    sidecar = read_json(dirpath / "georef.json")
    for key in ("origin_easting", "origin_northing", "cell_size"):
        if key not in sidecar:
            raise SchemaError(f"{dirpath}/georef.json: missing {key!r}")
    colors = read_ppm(dirpath / "color.ppm")
    elevation = read_pgm16(dirpath / "elevation.pgm", scale=sidecar.get("elevation_scale", 0.01))
    cloud = read_xyz(dirpath / "cloud.xyz")
    anchor = sidecar.get("anchor", {})
    raster = RasterPatch(
        colors=colors,
        valid=np.ones(colors.shape[:2], dtype=bool),
        cell_size=float(sidecar["cell_size"]),
        origin=np.array([sidecar["origin_easting"], sidecar["origin_northing"]]),
    )
    return AprioriMap(
        color=raster,
        elevation=elevation,
        cloud=cloud,
        anchor=GridAnchor(
            easting=anchor.get("easting", 0.0),
            northing=anchor.get("northing", 0.0),
            altitude=anchor.get("altitude", 0.0),
            heading=anchor.get("heading", 0.0),
        ),
    )


# ---------------------------------------------------------------------------
# JSON helpers


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"missing file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
