import csv
import io as _io
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, List, Union

import numpy as np
import tenacity
from plyfile import PlyData, PlyParseError, PlyHeaderParseError, PlyElementParseError

from config import RESULTS_RETRY_ATTEMPTS
from ..models.cloud import PointCloud, RigidTransform, InvalidTransformError
from ..models.experiment import ResultRow, RESULT_FIELDS
from ..services.geometry import project_to_rotation

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

XYZ_DIGITS = 9
TRANSFORM_DIGITS = 17
HOMOGENEOUS_ROW_TOL = 1e-9
ROTATION_READ_TOL = 1e-6


class FormatError(Exception):
    """Base exception for file format errors."""
    pass

class MalformedFileError(FormatError, ValueError):
    """Raised when a line cannot be parsed; carries the 1-based line number."""

    def __init__(self, path: PathLike, line_number: int, reason: str):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{path}: line {line_number}: {reason}")

class UnsupportedFormatError(FormatError, ValueError):
    """Raised for valid but unsupported variants such as binary PLY."""
    pass

class SchemaError(FormatError, ValueError):
    """Raised when required fields or columns are missing."""
    pass


def _parse_float(token: str, path: PathLike, line_number: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise MalformedFileError(path, line_number, f"'{token}' is not a number")
    if not math.isfinite(value):
        raise MalformedFileError(path, line_number, f"non-finite value '{token}'")
    return value


# ========== XYZ ==========

def read_xyz(path: PathLike) -> PointCloud:
    """One point per line, three whitespace-separated numbers; '#' lines and blank lines are skipped."""
    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            tokens = stripped.split()
            if len(tokens) != 3:
                raise MalformedFileError(path, line_number, f"expected 3 values, found {len(tokens)}")
            rows.append([_parse_float(t, path, line_number) for t in tokens])
    logger.debug(f"Read {len(rows)} points from {path}")
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def write_xyz(cloud: PointCloud, path: PathLike):
    lines = [" ".join(f"{v:.{XYZ_DIGITS}g}" for v in point) for point in cloud.points]
    _atomic_write(path, "".join(line + "\n" for line in lines))


# ========== PLY ==========

def _header_length(path: PathLike) -> int:
    """Number of header lines, 'end_header' included; 1 when the header never ends."""
    with open(path, "rb") as handle:
        for count, line in enumerate(handle, start=1):
            if line.strip() == b"end_header":
                return count
    return 1


def _element_error_line(path: PathLike, error: PlyElementParseError) -> int:
    # Rows map to file lines only for the vertex element, which comes first
    row = getattr(error, "row", None)
    element = getattr(error, "element", None)
    header = _header_length(path)
    if row is None or element is None or element.name != "vertex":
        return header
    return header + row + 1


def read_ply(path: PathLike) -> PointCloud:
    """Vertices (x, y, z) of an ASCII PLY in file order; other elements and properties are ignored."""
    try:
        plydata = PlyData.read(str(path))
    except PlyHeaderParseError as e:
        raise MalformedFileError(path, getattr(e, "line", None) or 1, str(e))
    except PlyElementParseError as e:
        raise MalformedFileError(path, _element_error_line(path, e), str(e))
    except PlyParseError as e:
        raise MalformedFileError(path, _header_length(path), str(e))

    if not plydata.text:
        raise UnsupportedFormatError(f"{path}: binary PLY is not supported; only ASCII PLY can be read.")
    if "vertex" not in [element.name for element in plydata.elements]:
        raise SchemaError(f"{path}: no 'vertex' element found.")

    vertices = plydata["vertex"].data
    names = vertices.dtype.names or ()
    missing = [axis for axis in ("x", "y", "z") if axis not in names]
    if missing:
        raise SchemaError(f"{path}: vertex element lacks properties {missing}.")
    if any(vertices.dtype[axis].kind != "f" for axis in ("x", "y", "z")):
        raise SchemaError(f"{path}: vertex properties x, y, z must be float32 or float64.")

    points = np.column_stack([vertices[axis] for axis in ("x", "y", "z")]).astype(np.float64).reshape(-1, 3)
    bad = np.flatnonzero(~np.isfinite(points).all(axis=1))
    if bad.size:
        raise MalformedFileError(path, _header_length(path) + int(bad[0]) + 1, "non-finite vertex coordinate")
    logger.debug(f"Read {points.shape[0]} vertices from {path}")
    return PointCloud(points)


def read_cloud(path: PathLike) -> PointCloud:
    """Dispatches on the extension: .ply goes to read_ply, anything else is read as .xyz."""
    if Path(path).suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)


# ========== TRANSFORMS ==========

def write_transform(transform: RigidTransform, path: PathLike):
    """Homogeneous 4x4 matrix, row-major, four numbers per line."""
    matrix = transform.as_matrix()
    text = "".join(" ".join(f"{v:.{TRANSFORM_DIGITS}g}" for v in row) + "\n" for row in matrix)
    _atomic_write(path, text)


def read_transform(path: PathLike) -> RigidTransform:
    """
    Reads a 4x4 homogeneous matrix. Rotations within 1e-6 of orthonormal are
    projected back onto SO(3); anything further off, or a reflection, is rejected.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            tokens = stripped.split()
            if len(tokens) != 4:
                raise MalformedFileError(path, line_number, f"expected 4 values, found {len(tokens)}")
            rows.append([_parse_float(t, path, line_number) for t in tokens])
    if len(rows) != 4:
        raise SchemaError(f"{path}: expected 4 matrix rows, found {len(rows)}.")

    matrix = np.array(rows)
    if np.max(np.abs(matrix[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > HOMOGENEOUS_ROW_TOL:
        raise InvalidTransformError(f"{path}: last row must be (0, 0, 0, 1), got {matrix[3].tolist()}.")

    rotation = matrix[:3, :3]
    orthonormality = np.linalg.norm(rotation.T @ rotation - np.eye(3))
    determinant = np.linalg.det(rotation)
    if orthonormality > ROTATION_READ_TOL or abs(determinant - 1.0) > ROTATION_READ_TOL:
        raise InvalidTransformError(
            f"{path}: rotation violates rigid invariants (|RtR - I|_F = {orthonormality:.3e}, det = {determinant:.9f})."
        )
    try:
        return RigidTransform(rotation, matrix[:3, 3])
    except InvalidTransformError:
        projected, _ = project_to_rotation(rotation)
        logger.info(f"Re-orthonormalized rotation read from {path} (deviation {orthonormality:.3e}).")
        return RigidTransform(projected, matrix[:3, 3])


# ========== RESULTS CSV ==========

@tenacity.retry(
    stop=tenacity.stop_after_attempt(RESULTS_RETRY_ATTEMPTS),
    wait=tenacity.wait_exponential(multiplier=0.05, max=1),
    retry=tenacity.retry_if_exception_type(PermissionError),
    reraise=True
)
def _replace(source: str, destination: PathLike):
    """os.replace can fail transiently while another process holds the destination open."""
    os.replace(source, destination)


def _atomic_write(path: PathLike, text: str):
    """Writes to a sibling temporary file, then renames it over `path`."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, temp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(str(path)))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        _replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


def _render_rows(rows: Iterable[ResultRow], with_header: bool) -> str:
    buffer = _io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=RESULT_FIELDS, lineterminator="\n")
    if with_header:
        writer.writeheader()
    for row in rows:
        row.validate()
        writer.writerow(row.to_record())
    return buffer.getvalue()


def _existing_text(path: PathLike) -> str:
    if not os.path.exists(path):
        return ""
    with open(path, "r", encoding="utf-8", newline="") as handle:
        text = handle.read()
    if text:
        header = text.splitlines()[0].split(",")
        if tuple(header) != RESULT_FIELDS:
            raise SchemaError(f"{path}: results header {header} does not match {list(RESULT_FIELDS)}.")
    return text


def append_result(row: ResultRow, path: PathLike):
    """Appends one row, writing the header first when the file is new or empty."""
    existing = _existing_text(path)
    _atomic_write(path, existing + _render_rows([row], with_header=not existing))


def write_results(rows: Iterable[ResultRow], path: PathLike):
    """Replaces `path` with a header plus `rows` in the given order."""
    _atomic_write(path, _render_rows(rows, with_header=True))


def read_results(path: PathLike) -> List[ResultRow]:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != RESULT_FIELDS:
            raise SchemaError(f"{path}: unexpected results header {reader.fieldnames}.")
        return [ResultRow.from_record(record) for record in reader]
