"""Dataset ingestion, synthesis and embedding utilities.

Two on-disk formats are supported: a CSV with a header naming input
columns ``x0..`` and target columns ``y0..``, and a compact binary
format ("MACD") holding both matrices as little-endian float64.
"""

import struct

import numpy as np

from .model import Dataset, DimensionMismatchError, MacqpError

MACD_MAGIC = b"MACD"


def save_dataset_f64bin(data, path):
    with open(path, "wb") as fh:
        fh.write(MACD_MAGIC)
        fh.write(struct.pack("<QII", data.n, data.X.shape[1], data.Y.shape[1]))
        fh.write(np.ascontiguousarray(data.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(data.Y, dtype="<f8").tobytes())


def save_dataset_csv(data, path):
    d, dp = data.X.shape[1], data.Y.shape[1]
    header = [f"x{i}" for i in range(d)] + [f"y{i}" for i in range(dp)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for xr, yr in zip(data.X, data.Y):
            fh.write(",".join(repr(float(v)) for v in xr) + ",")
            fh.write(",".join(repr(float(v)) for v in yr) + "\n")


def _load_f64bin(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MACD_MAGIC:
            raise MacqpError(f"{path}: bad magic {magic!r}, expected {MACD_MAGIC!r}")
        n, d, dp = struct.unpack("<QII", fh.read(16))
        X = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d)
        Y = np.frombuffer(fh.read(8 * n * dp), dtype="<f8").reshape(n, dp)
    return Dataset(X.copy(), Y.copy())


def _load_csv(path):
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise MacqpError(f"{path}: missing header row")
        cols = header.split(",")
        d = sum(1 for c in cols if c.startswith("x"))
        dp = sum(1 for c in cols if c.startswith("y"))
        if d == 0 or dp == 0 or d + dp != len(cols):
            raise MacqpError(
                f"{path}: header must name input columns x* then target columns y*"
            )
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != d + dp:
                raise DimensionMismatchError(
                    f"{path}:{lineno}: expected {d + dp} cells, got {len(cells)}"
                )
            vals = []
            for colno, cell in enumerate(cells, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise MacqpError(
                        f"{path}:{lineno}: non-numeric cell in column {colno}: {cell!r}"
                    ) from None
            rows.append(vals)
    arr = np.asarray(rows, dtype=np.float64)
    if arr.size == 0:
        raise MacqpError(f"{path}: no data rows")
    return Dataset(arr[:, :d], arr[:, d:])


def load_dataset(path, fmt):
    """Read a dataset from disk; entries are validated finite."""
    if fmt == "f64bin":
        ds = _load_f64bin(path)
    elif fmt == "csv":
        ds = _load_csv(path)
    else:
        raise MacqpError(f"unknown dataset format {fmt!r}")
    return ds


def synth_manifold_dataset(n, ambient_dim, intrinsic_dim, noise, seed, n_val=0):
    """Autoencoding dataset sampled from a smooth low-dimensional manifold.

    Points come from an affine-plus-sinusoidal embedding of a uniform
    latent cube, with Gaussian noise added and an affine rescale of every
    column into [0, 1].  Targets equal inputs.
    """
    if intrinsic_dim >= ambient_dim:
        raise DimensionMismatchError("intrinsic_dim must be < ambient_dim")
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    rng = np.random.default_rng(seed)
    total = n + n_val
    T = rng.uniform(0.0, 1.0, size=(total, intrinsic_dim))
    B_lin = rng.normal(size=(ambient_dim, intrinsic_dim))
    B_sin = rng.normal(size=(ambient_dim, intrinsic_dim))
    B_cos = rng.normal(size=(ambient_dim, intrinsic_dim))
    X = T @ B_lin.T + np.sin(2 * np.pi * T) @ B_sin.T + np.cos(2 * np.pi * T) @ B_cos.T
    if noise > 0:
        X = X + rng.normal(scale=noise, size=X.shape)
    lo = X.min(axis=0)
    span = X.max(axis=0) - lo
    span[span == 0] = 1.0
    X = (X - lo) / span
    if n_val > 0:
        return Dataset(X[:n], X[:n], X[n:], X[n:])
    return Dataset(X, X)


def pca_embed(X, d):
    """Coordinates of X on its top-d principal directions (deterministic signs)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if d > X.shape[1]:
        raise DimensionMismatchError(f"cannot embed width {X.shape[1]} into {d} dims")
    Xc = X - X.mean(axis=0)
    U, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    # fix each direction's sign by its largest-magnitude component
    for i in range(d):
        j = int(np.argmax(np.abs(Vt[i])))
        if Vt[i, j] < 0:
            Vt[i] = -Vt[i]
            U[:, i] = -U[:, i]
    return U[:, :d] * S[:d]


def write_pgm(path, image):
    """8-bit binary PGM; pixel = round(255 * clamp(v, 0, 1))."""
    image = np.atleast_2d(np.asarray(image, dtype=np.float64))
    px = np.round(255.0 * np.clip(image, 0.0, 1.0)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode())
        fh.write(px.tobytes())
