"""Little-endian binary checkpoints for kernel tables, fields and trajectories.

Every file starts with a four byte magic and a ``u32`` version. The
payload is row-major ``<f8``.
"""

import struct

import numpy as np

VERSION = 1


class CheckpointError(ValueError):
    pass


def _check_magic(buf, magic):
    if buf[:4] != magic:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")


def _floats(buf, offset, count=None):
    arr = np.frombuffer(buf, dtype="<f8", offset=offset, count=-1 if count is None else count)
    return arr.astype(np.float64)


# -- kernel tables -----------------------------------------------------------

def write_kernel_tables(path, cutoff, resolution, k_table, gamma_table):
    with open(path, "wb") as fh:
        fh.write(b"VXKT" + struct.pack("<III", VERSION, cutoff, resolution))
        fh.write(np.ascontiguousarray(k_table, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(gamma_table, dtype="<f8").tobytes())


def read_kernel_tables(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    _check_magic(buf, b"VXKT")
    cutoff, resolution = struct.unpack_from("<II", buf, 8)
    n = resolution * resolution * 2
    data = _floats(buf, 16)
    if data.size != 2 * n:
        raise CheckpointError("truncated kernel table payload")
    k_table = data[:n].reshape(resolution, resolution, 2)
    gamma_table = data[n:].reshape(resolution, resolution, 2)
    return cutoff, resolution, k_table, gamma_table


# -- 2D / 4D fields ----------------------------------------------------------

def write_field2d(path, values):
    values = np.asarray(values, dtype=np.float64)
    m = values.shape[0]
    with open(path, "wb") as fh:
        fh.write(b"VXF2" + struct.pack("<II", VERSION, m))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_field2d(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    _check_magic(buf, b"VXF2")
    (m,) = struct.unpack_from("<I", buf, 8)
    data = _floats(buf, 12)
    if data.size != m * m:
        raise CheckpointError("truncated 2D field payload")
    return data.reshape(m, m)


def write_field4d(path, values):
    values = np.asarray(values, dtype=np.float64)
    m = values.shape[0]
    with open(path, "wb") as fh:
        fh.write(b"VXF4" + struct.pack("<II", VERSION, m))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_field4d(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    _check_magic(buf, b"VXF4")
    (m,) = struct.unpack_from("<I", buf, 8)
    data = _floats(buf, 12)
    if data.size != m ** 4:
        raise CheckpointError("truncated 4D field payload")
    return data.reshape(m, m, m, m)


# -- trajectories ------------------------------------------------------------

_TRAJ_HEADER = struct.Struct("<4sIIdddd")


def write_trajectory(path, n, alpha_plus, alpha_minus, nu, dt, snapshots):
    """``snapshots`` is an iterable of ``(t, x_plus, x_minus)``."""
    with open(path, "wb") as fh:
        fh.write(_TRAJ_HEADER.pack(b"VXTR", VERSION, n, alpha_plus, alpha_minus, nu, dt))
        for t, xp, xm in snapshots:
            rec = np.concatenate([[t], np.asarray(xp, float).ravel(), np.asarray(xm, float).ravel()])
            fh.write(rec.astype("<f8").tobytes())


def read_trajectory(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    _check_magic(buf, b"VXTR")
    _, _, n, ap, am, nu, dt = _TRAJ_HEADER.unpack_from(buf, 0)
    data = _floats(buf, _TRAJ_HEADER.size)
    rec = 1 + 4 * n
    if data.size % rec:
        raise CheckpointError("truncated trajectory record")
    data = data.reshape(-1, rec)
    snaps = [(row[0], row[1:1 + 2 * n].reshape(n, 2), row[1 + 2 * n:].reshape(n, 2)) for row in data]
    header = {"n": n, "alpha_plus": ap, "alpha_minus": am, "nu": nu, "dt": dt}
    return header, snaps
