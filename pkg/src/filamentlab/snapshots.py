"""On-disk snapshot formats: binary loop/field files and CSV tables.

Two binary containers, both little-endian:

* ``VFIL`` -- weighted closed polylines (a filament ensemble or any
  1-current).  Header: magic ``b"VFIL"``, version u32, loop count u64.
  Per loop: id u64, weight f64, node count u64, then the node
  coordinates as M x 3 f64.
* ``VFLD`` -- a spectral vorticity field.  Header: magic ``b"VFLD"``,
  version u32, box length f64, resolution u32.  Payload: n^3 x 3
  complex f64 coefficients, row-major over the (kx, ky, kz) grid with
  the vector component fastest.

CSV emission shares one formatting rule (shortest round-trip ``repr``
with ``\\n`` line ends) so that rerunning a configuration reproduces
files byte for byte.
"""

import csv
import struct

import numpy as np

from .errors import InvalidParameterError, SnapshotFormatError

__all__ = [
    "SNAPSHOT_VERSION",
    "write_filaments",
    "read_filaments",
    "write_field",
    "read_field",
    "write_trajectory_csv",
    "write_metric_csv",
    "write_diagnostics_csv",
    "write_csv",
]

SNAPSHOT_VERSION = 1

_MAGIC_FIL = b"VFIL"
_MAGIC_FLD = b"VFLD"
_F64 = np.dtype("<f8")
_C128 = np.dtype("<c16")


# ---------------------------------------------------------------------------
# binary loop files


def _as_loops(obj):
    """Normalize an ensemble or current into (id, alpha, nodes) triples."""
    if hasattr(obj, "filaments"):
        return [(f.id, f.alpha, f.nodes) for f in obj.filaments]
    if hasattr(obj, "loops"):
        return [(i, lo.alpha, lo.nodes) for i, lo in enumerate(obj.loops)]
    raise InvalidParameterError(
        f"expected a filament ensemble or a current, got {type(obj).__name__}"
    )


def write_filaments(path, obj):
    """Write an ensemble or current to a VFIL file.

    Ensembles keep their filament ids; bare currents are numbered by
    loop index.  Node arrays are written as-is (no closing duplicate).
    """
    loops = _as_loops(obj)
    parts = [_MAGIC_FIL, struct.pack("<IQ", SNAPSHOT_VERSION, len(loops))]
    for fid, alpha, nodes in loops:
        nodes = np.ascontiguousarray(nodes, dtype=_F64)
        parts.append(struct.pack("<QdQ", int(fid), float(alpha), nodes.shape[0]))
        parts.append(nodes.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Cursor:
    """Sequential reader over a byte string with honest truncation errors."""

    def __init__(self, buf, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n, what):
        end = self.off + n
        if end > len(self.buf):
            raise SnapshotFormatError(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.off}, file has {len(self.buf)})"
            )
        chunk = self.buf[self.off : end]
        self.off = end
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def done(self, what):
        if self.off != len(self.buf):
            raise SnapshotFormatError(
                f"{self.path}: {len(self.buf) - self.off} trailing bytes after {what}"
            )


def _check_header(cur, magic, kind):
    got = cur.take(4, "magic")
    if got != magic:
        raise SnapshotFormatError(f"{cur.path}: not a {kind} file (magic {got!r})")
    (version,) = cur.unpack("<I", "version")
    if version != SNAPSHOT_VERSION:
        raise SnapshotFormatError(
            f"{cur.path}: unsupported {kind} version {version} "
            f"(this build reads version {SNAPSHOT_VERSION})"
        )


def read_filaments(path):
    """Read a VFIL file back as ``(CurrentPolyline, ids)``.

    The current is the natural common denominator: a file written from
    an ensemble loses its kernel binding, so round-tripping through the
    dynamics requires rebuilding filaments from the returned loops.
    Raises :class:`SnapshotFormatError` on bad magic, an unknown
    version, truncation, or trailing garbage.
    """
    from .currents import CurrentPolyline, Loop

    with open(path, "rb") as fh:
        cur = _Cursor(fh.read(), path)
    _check_header(cur, _MAGIC_FIL, "filament snapshot")
    (n_loops,) = cur.unpack("<Q", "loop count")
    ids, loops = [], []
    for j in range(n_loops):
        fid, alpha, m = cur.unpack("<QdQ", f"loop {j} header")
        raw = cur.take(24 * m, f"loop {j} nodes (M={m})")
        nodes = np.frombuffer(raw, dtype=_F64).reshape(m, 3)
        ids.append(fid)
        loops.append(Loop(alpha=alpha, nodes=nodes))
    cur.done("the last loop")
    return CurrentPolyline(loops=tuple(loops)), tuple(ids)


# ---------------------------------------------------------------------------
# binary field files


def write_field(path, fld):
    """Write a spectral vorticity field to a VFLD file."""
    coeffs = np.ascontiguousarray(np.moveaxis(fld.xi_hat, 0, -1), dtype=_C128)
    with open(path, "wb") as fh:
        fh.write(_MAGIC_FLD)
        fh.write(struct.pack("<IdI", SNAPSHOT_VERSION, fld.box_length, fld.resolution))
        fh.write(coeffs.tobytes())


def read_field(path):
    """Read a VFLD file back as a :class:`PeriodicVorticityField`.

    Construction re-applies the canonical-state pass, so coefficients
    laundered through a file can differ from the originals in the last
    bits (the projection of an already-projected field is not a bitwise
    no-op).
    """
    from .euler_ref import PeriodicVorticityField

    with open(path, "rb") as fh:
        cur = _Cursor(fh.read(), path)
    _check_header(cur, _MAGIC_FLD, "field snapshot")
    box_length, n = cur.unpack("<dI", "grid header")
    raw = cur.take(16 * 3 * n**3, f"coefficients (n={n})")
    cur.done("the coefficient block")
    coeffs = np.frombuffer(raw, dtype=_C128).reshape(n, n, n, 3)
    return PeriodicVorticityField(
        box_length=box_length, resolution=int(n), xi_hat=np.moveaxis(coeffs, -1, 0)
    )


# ---------------------------------------------------------------------------
# CSV tables


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows):
    """Write one CSV table with deterministic bytes.

    Floats are rendered with shortest round-trip ``repr`` and rows end
    in ``\\n`` regardless of platform, so identical data produces an
    identical file.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_trajectory_csv(path, record):
    """Flatten a :class:`TrajectoryRecord` into the node-level table.

    Columns: t, filament_id, node_index, x, y, z -- one row per node
    per snapshot, snapshot-major, filaments in ensemble order.
    """

    def rows():
        for t, state in zip(record.times, record.states):
            for fid, nodes in zip(record.filament_ids, state):
                for m, (x, y, z) in enumerate(nodes):
                    yield (t, fid, m, x, y, z)

    write_csv(path, ("t", "filament_id", "node_index", "x", "y", "z"), rows())


def write_metric_csv(path, rows):
    """Write metric-estimate rows: (t, lower, upper, witness_kind)."""
    write_csv(path, ("t", "lower", "upper", "witness_kind"), rows)


def write_diagnostics_csv(path, rows):
    """Write grid diagnostics rows: (t, l2, hs, energy, max_div)."""
    write_csv(path, ("t", "l2", "hs", "energy", "max_div"), rows)
