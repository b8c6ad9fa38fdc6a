"""ASCII PLY, 4x4 transform files, feature-pair files and run reports."""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import PointCloud, RigidTransform, _project_rotation

_PLY_TYPES = {
    "char": int, "uchar": int, "short": int, "ushort": int, "int": int, "uint": int,
    "int8": int, "uint8": int, "int16": int, "uint16": int, "int32": int, "uint32": int,
    "float": float, "double": float, "float32": float, "float64": float,
}
_COLOR_PROPS = ("red", "green", "blue")


class PlyParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MissingPropertyError(PlyParseError):
    pass


class ColorMismatchError(PlyParseError):
    pass


class NonRigidMatrixError(ValueError):
    pass


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- PLY

def _parse_header(lines):
    if not lines or lines[0].strip() != "ply":
        raise PlyParseError("missing 'ply' magic", 1)
    elements = []  # [name, count, [(prop, type)]]
    fmt_seen = False
    for n, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        key = tok[0]
        if key == "format":
            if len(tok) != 3 or tok[1] != "ascii" or tok[2] != "1.0":
                raise PlyParseError(f"unsupported format {' '.join(tok[1:])!r}", n)
            fmt_seen = True
        elif key == "element":
            if len(tok) != 3:
                raise PlyParseError("malformed element line", n)
            try:
                count = int(tok[2])
            except ValueError:
                raise PlyParseError(f"bad element count {tok[2]!r}", n) from None
            if count < 0:
                raise PlyParseError("negative element count", n)
            elements.append([tok[1], count, []])
        elif key == "property":
            if not elements:
                raise PlyParseError("property before any element", n)
            if len(tok) >= 2 and tok[1] == "list":
                if len(tok) != 5:
                    raise PlyParseError("malformed list property", n)
                elements[-1][2].append((tok[4], "list"))
                continue
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise PlyParseError(f"bad property declaration {raw.strip()!r}", n)
            elements[-1][2].append((tok[2], tok[1]))
        elif key == "end_header":
            if not fmt_seen:
                raise PlyParseError("no format line before end_header", n)
            return elements, n
        else:
            raise PlyParseError(f"unknown header keyword {key!r}", n)
    raise PlyParseError("end_header not found", len(lines))


def read_ply(path) -> PointCloud:
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    elements, header_end = _parse_header(lines)
    lineno = header_end  # 1-based number of the last consumed line
    cloud = None
    for name, count, props in elements:
        if name != "vertex":
            # one line per element regardless of list widths
            lineno += count
            continue
        names = [p for p, _ in props]
        if any(t == "list" for _, t in props):
            raise PlyParseError("list properties on vertex are not supported", header_end)
        for axis in "xyz":
            if axis not in names:
                raise MissingPropertyError(f"vertex has no '{axis}' property", header_end)
        present = [c in names for c in _COLOR_PROPS]
        if any(present) and not all(present):
            raise ColorMismatchError(
                "vertex declares only some of red/green/blue", header_end)
        cols = [names.index(a) for a in "xyz"]
        ccols = [names.index(c) for c in _COLOR_PROPS] if all(present) else None
        rows = np.empty((count, len(names)))
        for k in range(count):
            lineno += 1
            if lineno > len(lines):
                raise PlyParseError(
                    f"expected {count} vertices, file ended after {k}", lineno - 1)
            tok = lines[lineno - 1].split()
            if len(tok) != len(names):
                raise PlyParseError(
                    f"expected {len(names)} values, found {len(tok)}", lineno)
            try:
                rows[k] = [float(v) for v in tok]
            except ValueError:
                raise PlyParseError(f"non-numeric value in {tok!r}", lineno) from None
        if not np.all(np.isfinite(rows[:, cols])):
            raise PlyParseError("non-finite coordinate in vertex data", header_end)
        colors = None
        if ccols is not None:
            c = rows[:, ccols]
            if np.any(c != np.round(c)) or np.any(c < 0) or np.any(c > 255):
                raise ColorMismatchError("color values must be integers in [0, 255]")
            colors = c.astype(np.uint8)
        cloud = PointCloud(rows[:, cols], colors)
    if cloud is None:
        raise MissingPropertyError("no vertex element in header", header_end)
    return cloud


def format_ply(cloud: PointCloud) -> str:
    out = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
           "property double x", "property double y", "property double z"]
    if cloud.has_colors:
        out += ["property uchar red", "property uchar green", "property uchar blue"]
    out.append("end_header")
    body = []
    if cloud.has_colors:
        for p, c in zip(cloud.points, cloud.colors):
            body.append("%.8f %.8f %.8f %d %d %d" % (p[0], p[1], p[2], c[0], c[1], c[2]))
    else:
        for p in cloud.points:
            body.append("%.8f %.8f %.8f" % (p[0], p[1], p[2]))
    return "\n".join(out + body) + "\n"


def write_ply(cloud: PointCloud, path) -> None:
    atomic_write_text(path, format_ply(cloud))


# ---------------------------------------------------------- transforms

def format_transform(t: RigidTransform) -> str:
    m = t.matrix
    m[3] = (0.0, 0.0, 0.0, 1.0)
    return "".join(" ".join("%.17g" % v for v in row) + "\n" for row in m)


def write_transform(t: RigidTransform, path) -> None:
    atomic_write_text(path, format_transform(t))


def parse_transform(text: str) -> RigidTransform:
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    if len(rows) != 4 or any(len(r) != 4 for r in rows):
        raise PlyParseError("transform must be 4 lines of 4 numbers")
    try:
        m = np.array([[float(v) for v in r] for r in rows])
    except ValueError:
        raise PlyParseError("non-numeric transform entry") from None
    if not np.all(np.isfinite(m)):
        raise PlyParseError("non-finite transform entry")
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise NonRigidMatrixError("bottom row must be exactly 0 0 0 1")
    r = m[:3, :3]
    if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6 or abs(np.linalg.det(r) - 1) > 1e-6:
        raise NonRigidMatrixError("upper-left 3x3 is not a rotation")
    if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-12:
        r = _project_rotation(r)
    return RigidTransform(r, m[:3, 3])


def read_transform(path) -> RigidTransform:
    with open(path) as fh:
        return parse_transform(fh.read())


# ------------------------------------------------------- feature pairs

def write_features(pairs: np.ndarray, path) -> None:
    """(N, 2, 3) array of (lidar-frame, kinect-frame) point pairs."""
    pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 2, 3)
    text = "".join(" ".join("%.17g" % v for v in p.ravel()) + "\n" for p in pairs)
    atomic_write_text(path, text)


def read_features(path) -> np.ndarray:
    out = []
    with open(path) as fh:
        for n, ln in enumerate(fh, start=1):
            tok = ln.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) != 6:
                raise PlyParseError(f"expected 6 numbers, found {len(tok)}", n)
            try:
                out.append([float(v) for v in tok])
            except ValueError:
                raise PlyParseError("non-numeric feature coordinate", n) from None
    return np.array(out, dtype=np.float64).reshape(-1, 2, 3)


# ------------------------------------------------------------- reports

@dataclass
class StageRecord:
    name: str
    transform: RigidTransform
    iterations: int = 0
    objective: Optional[float] = None


@dataclass
class RowRecord:
    algorithm: str
    error: Optional[float]
    status: str = "ok"


@dataclass
class Report:
    params: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    feature_error: Optional[float] = None
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)


def _fnum(x: Optional[float]) -> str:
    return "none" if x is None else repr(float(x))


def _pnum(s: str) -> Optional[float]:
    return None if s == "none" else float(s)


def _check_value(v: str) -> str:
    if "\n" in v or "\r" in v:
        raise ValueError("report values must be single-line")
    return v


def format_report(rep: Report) -> str:
    out = ["# fusereg report v1"]
    out += [f"# note: {_check_value(n)}" for n in rep.notes]
    for k, v in rep.params.items():
        if " " in k or "=" in k:
            raise ValueError(f"bad parameter key {k!r}")
        out.append(f"param.{k} = {_check_value(str(v))}")
    for i, s in enumerate(rep.stages):
        out.append(f"stage.{i}.name = {_check_value(s.name)}")
        out.append(f"stage.{i}.transform = " + " ".join(repr(float(v)) for v in s.transform.matrix[:3].ravel()))
        out.append(f"stage.{i}.iterations = {int(s.iterations)}")
        out.append(f"stage.{i}.objective = {_fnum(s.objective)}")
    out.append(f"feature_error_m = {_fnum(rep.feature_error)}")
    for i, r in enumerate(rep.rows):
        out.append(f"row.{i}.algorithm = {_check_value(r.algorithm)}")
        out.append(f"row.{i}.error_m = {_fnum(r.error)}")
        out.append(f"row.{i}.status = {_check_value(r.status)}")
    return "\n".join(out) + "\n"


def parse_report(text: str) -> Report:
    rep = Report()
    stages: dict = {}
    rows: dict = {}
    for n, ln in enumerate(text.splitlines(), start=1):
        if n == 1:
            if ln != "# fusereg report v1":
                raise PlyParseError("not a fusereg report", 1)
            continue
        if ln.startswith("# note: "):
            rep.notes.append(ln[len("# note: "):])
            continue
        if not ln.strip():
            continue
        key, sep, val = ln.partition(" = ")
        if not sep:
            raise PlyParseError(f"expected 'key = value', got {ln!r}", n)
        parts = key.split(".")
        try:
            if parts[0] == "param" and len(parts) == 2:
                rep.params[parts[1]] = val
            elif parts[0] == "stage" and len(parts) == 3:
                st = stages.setdefault(int(parts[1]), {})
                st[parts[2]] = val
            elif parts[0] == "row" and len(parts) == 3:
                rows.setdefault(int(parts[1]), {})[parts[2]] = val
            elif key == "feature_error_m":
                rep.feature_error = _pnum(val)
            else:
                raise PlyParseError(f"unknown key {key!r}", n)
        except ValueError as exc:
            if isinstance(exc, PlyParseError):
                raise
            raise PlyParseError(str(exc), n) from None
    for i in sorted(stages):
        st = stages[i]
        m = np.eye(4)
        m[:3] = np.array([float(v) for v in st["transform"].split()]).reshape(3, 4)
        rep.stages.append(StageRecord(st["name"], RigidTransform.from_matrix(m),
                                      int(st["iterations"]), _pnum(st["objective"])))
    for i in sorted(rows):
        r = rows[i]
        rep.rows.append(RowRecord(r["algorithm"], _pnum(r["error_m"]), r["status"]))
    return rep


def write_report(rep: Report, path) -> None:
    atomic_write_text(path, format_report(rep))


def read_report(path) -> Report:
    with open(path) as fh:
        return parse_report(fh.read())
