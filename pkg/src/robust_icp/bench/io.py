"""Readers and writers for point clouds, transforms, traces and reports.

Floats are written with ``repr`` (shortest round-trip form), so a save/load
cycle reproduces every coordinate exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from ..lie import load_transform, save_transform
from ..report import EnergyTrace, RegistrationReport, TraceRecord
from ..spatial import PointCloud

log = logging.getLogger(__name__)

__all__ = [
    "CloudFormatError",
    "load_cloud",
    "save_cloud",
    "load_transform",
    "save_transform",
    "write_trace_csv",
    "read_trace_csv",
    "write_report_json",
    "read_report_json",
    "TRACE_COLUMNS",
]

TRACE_COLUMNS = ("stage", "iter", "nu", "energy", "accepted", "delta_T_fro", "wall_ms")
_FLOAT_TYPES = {"float", "float32", "float64", "double"}
_OTHER_TYPES = {"char", "uchar", "short", "ushort", "int", "uint", "int8", "uint8",
                "int16", "uint16", "int32", "uint32"}


class CloudFormatError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


def _guess_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return "ply-ascii"
    if suffix in (".xyz", ".txt", ".pts"):
        return "xyz"
    raise ValueError(f"cannot infer cloud format from {path.name!r}; pass format explicitly")


def _build(path, rows: list[list[float]], has_normals: bool, first_line: int) -> PointCloud:
    data = np.array(rows, dtype=float).reshape(-1, 6 if has_normals else 3)
    if not np.isfinite(data).all():
        bad = int(np.argwhere(~np.isfinite(data).all(axis=1))[0, 0])
        raise CloudFormatError(path, first_line + bad, "non-finite coordinate")
    pts = data[:, :3]
    normals = None
    if has_normals:
        normals = data[:, 3:]
        norms = np.linalg.norm(normals, axis=1)
        if np.any(norms == 0.0):
            raise CloudFormatError(path, first_line + int(np.argmin(norms)), "zero-length normal")
        # tolerate normals stored at limited precision
        off = np.abs(norms - 1.0) > 1e-12
        normals[off] /= norms[off, None]
    return PointCloud(pts, normals)


def _load_xyz(path: Path) -> PointCloud:
    rows, width, first = [], None, None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            fields = text.replace(",", " ").split()
            if len(fields) not in (3, 6):
                raise CloudFormatError(path, lineno, f"expected 3 or 6 columns, found {len(fields)}")
            if width is None:
                width, first = len(fields), lineno
            elif len(fields) != width:
                raise CloudFormatError(path, lineno, f"expected {width} columns, found {len(fields)}")
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise CloudFormatError(path, lineno, str(exc)) from None
    if not rows:
        raise CloudFormatError(path, 0, "no points")
    return _build(path, rows, width == 6, first)


def _load_ply(path: Path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError(path, 1, "missing 'ply' magic")
    n_vertex, props, element, body = None, [], None, None
    skip_before = 0  # data lines of elements preceding 'vertex'
    for lineno, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise CloudFormatError(path, lineno, f"unsupported PLY format {' '.join(tok[1:])!r}")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise CloudFormatError(path, lineno, "malformed element line")
            element = tok[1]
            try:
                count = int(tok[2])
            except ValueError:
                raise CloudFormatError(path, lineno, f"bad element count {tok[2]!r}") from None
            if element == "vertex":
                n_vertex = count
            elif n_vertex is None:
                skip_before += count
        elif tok[0] == "property":
            if element != "vertex":
                continue
            if len(tok) != 3 or tok[1] == "list":
                raise CloudFormatError(path, lineno, "list properties are not supported on vertices")
            if tok[1] not in _FLOAT_TYPES | _OTHER_TYPES:
                raise CloudFormatError(path, lineno, f"unknown property type {tok[1]!r}")
            props.append(tok[2])
        elif tok[0] == "end_header":
            body = lineno
            break
        else:
            raise CloudFormatError(path, lineno, f"unexpected header keyword {tok[0]!r}")
    if body is None:
        raise CloudFormatError(path, len(lines), "missing end_header")
    if n_vertex is None:
        raise CloudFormatError(path, body, "no vertex element")
    for axis in ("x", "y", "z"):
        if axis not in props:
            raise CloudFormatError(path, body, f"vertex property {axis!r} missing")
    has_normals = all(n in props for n in ("nx", "ny", "nz"))
    wanted = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_normals else [])
    unknown = [p for p in props if p not in wanted]
    if unknown:
        log.warning("%s: skipping vertex properties %s", path, ", ".join(unknown))
    cols = [props.index(p) for p in wanted]

    rows = []
    first = body + 1 + skip_before
    for i in range(n_vertex):
        lineno = first + i
        if lineno > len(lines):
            raise CloudFormatError(path, lineno, f"expected {n_vertex} vertices, file ends after {i}")
        fields = lines[lineno - 1].split()
        if len(fields) != len(props):
            raise CloudFormatError(path, lineno, f"expected {len(props)} values, found {len(fields)}")
        try:
            rows.append([float(fields[c]) for c in cols])
        except ValueError as exc:
            raise CloudFormatError(path, lineno, str(exc)) from None
    if n_vertex == 0:
        raise CloudFormatError(path, body, "no points")
    return _build(path, rows, has_normals, first)


def load_cloud(path, format: str | None = None) -> PointCloud:
    path = Path(path)
    fmt = format or _guess_format(path)
    if fmt == "xyz":
        return _load_xyz(path)
    if fmt == "ply-ascii":
        return _load_ply(path)
    raise ValueError(f"unknown cloud format {fmt!r}")


def _row(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_cloud(cloud: PointCloud, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or _guess_format(path)
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    lines = []
    if fmt == "ply-ascii":
        lines += ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
        names = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.normals is not None else [])
        lines += [f"property double {n}" for n in names]
        lines.append("end_header")
    elif fmt != "xyz":
        raise ValueError(f"unknown cloud format {fmt!r}")
    lines += [_row(r) for r in data]
    path.write_text("\n".join(lines) + "\n")


def write_trace_csv(trace: EnergyTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in trace:
            w.writerow([r.stage, r.iter, repr(float(r.nu)), repr(float(r.energy)), r.accepted,
                        repr(float(r.delta_T_fro)), repr(float(r.wall_ms))])


def read_trace_csv(path) -> EnergyTrace:
    trace = EnergyTrace()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected trace columns {reader.fieldnames}")
        for row in reader:
            trace.append(TraceRecord(
                int(row["stage"]), int(row["iter"]), float(row["nu"]), float(row["energy"]),
                row["accepted"], float(row["delta_T_fro"]), float(row["wall_ms"]),
            ))
    return trace


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_report_json(report: RegistrationReport, path, **extra) -> dict:
    data = {k: _json_safe(v) for k, v in report.to_dict().items()}
    data.update(extra)
    Path(path).write_text(json.dumps(data, indent=2) + "\n")
    return data


def read_report_json(path) -> dict:
    data = json.loads(Path(path).read_text())
    if "final_transform" not in data:
        raise ValueError(f"{path}: not a registration report")
    return data
