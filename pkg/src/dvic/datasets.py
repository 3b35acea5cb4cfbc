"""Dataset loading, preprocessing, and the synthetic benchmark generators.

Supports ENVI raster cubes (BSQ/BIL/BIP), flat CSV point clouds with an
optional label column, per-band standardization with band dropping and
duplicate-breaking jitter, and the two synthetic datasets used throughout the
tests: interleaving half-moons and the mixed-pixel triangle.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LoadError, ParameterError
from .graph import PointCloud

__all__ = [
    "DatasetSpec",
    "SyntheticTriangleTruth",
    "load_envi",
    "load_csv",
    "save_csv",
    "load_labels",
    "save_labels",
    "preprocess",
    "synth_moons",
    "synth_triangle",
    "load_dataset",
]

_MASK64 = (1 << 64) - 1

# ENVI data type codes supported: 16-bit signed int, float32, float64
_ENVI_DTYPES = {2: "i2", 4: "f4", 5: "f8"}


@dataclass(frozen=True)
class DatasetSpec:
    """Declarative description of a dataset source plus preprocessing.

    source: one of "envi", "csv", "synthetic-moons", "synthetic-triangle".
    path: input file for the file-backed sources.
    params: generator parameters (e.g. n, noise_sigma for moons).
    band_drop: band indices removed before standardization.
    standardize: per-band z-scoring flag.
    jitter_sigma: optional Gaussian jitter applied before standardization to
        split duplicate spectra.
    seed: RNG seed for generators and jitter.
    """

    source: str
    path: str | None = None
    params: dict = field(default_factory=dict)
    band_drop: tuple = ()
    standardize: bool = False
    jitter_sigma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("envi", "csv", "synthetic-moons", "synthetic-triangle"):
            raise ParameterError(f"unknown dataset source {self.source!r}")
        if self.jitter_sigma is not None and self.jitter_sigma < 0:
            raise ParameterError("jitter_sigma must be nonnegative")
        if any(b < 0 for b in self.band_drop):
            raise ParameterError("band indices must be nonnegative")
        object.__setattr__(self, "band_drop", tuple(int(b) for b in self.band_drop))


@dataclass(frozen=True)
class SyntheticTriangleTruth:
    """Ground truth for the synthetic triangle dataset.

    endmembers: the 3 triangle vertices (3, 2); abundances: barycentric
    coordinates (n, 3); labels: argmax abundance in {1, 2, 3}; source: which
    blob generated each point (0..2 = vertices, 3 = center).
    """

    endmembers: np.ndarray
    abundances: np.ndarray
    labels: np.ndarray
    source: np.ndarray


def _parse_envi_header(path: Path) -> dict:
    header = {}
    text = path.read_text()
    lines = iter(text.splitlines())
    for line in lines:
        if "=" not in line:
            continue
        key, value = line.split("=", 1)
        value = value.strip()
        if value.startswith("{") and "}" not in value:
            while "}" not in value:
                value += " " + next(lines, "}")
        header[key.strip().lower()] = value.strip().strip("{}").strip()
    return header


def _locate_envi_binary(header_path: Path) -> Path:
    base = header_path.with_suffix("")
    candidates = [base] + [base.with_suffix(ext) for ext in (".img", ".dat", ".raw", ".bsq", ".bil", ".bip")]
    for cand in candidates:
        if cand.exists() and cand != header_path:
            return cand
    raise LoadError(f"no raw binary found alongside header {header_path}")


def _read_envi_cube(header_path: Path):
    header = _parse_envi_header(header_path)
    try:
        samples = int(header["samples"])
        lines_ = int(header["lines"])
        bands = int(header["bands"])
        interleave = header["interleave"].lower()
        dtype_code = int(header["data type"])
        byte_order = int(header.get("byte order", "0"))
    except KeyError as exc:
        raise LoadError(f"ENVI header missing required field: {exc}") from exc
    if interleave not in ("bsq", "bil", "bip"):
        raise LoadError(f"unsupported interleave {interleave!r}")
    if dtype_code not in _ENVI_DTYPES:
        raise LoadError(f"unsupported ENVI data type code {dtype_code}")
    offset = int(header.get("header offset", "0"))
    dtype = np.dtype(("<" if byte_order == 0 else ">") + _ENVI_DTYPES[dtype_code])
    binary = _locate_envi_binary(header_path)
    raw = binary.read_bytes()
    expected = offset + samples * lines_ * bands * dtype.itemsize
    if len(raw) != expected:
        raise LoadError(
            f"binary size mismatch for {binary}: expected {expected} bytes, got {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype=dtype, offset=offset)
    if np.issubdtype(flat.dtype, np.floating):
        finite = np.isfinite(flat)
        if not finite.all():
            idx = int(np.flatnonzero(~finite)[0])
            raise LoadError(
                f"non-finite value in {binary} at byte offset {offset + idx * dtype.itemsize}"
            )
    if interleave == "bsq":
        cube = flat.reshape(bands, lines_, samples).transpose(1, 2, 0)
    elif interleave == "bil":
        cube = flat.reshape(lines_, bands, samples).transpose(0, 2, 1)
    else:  # bip
        cube = flat.reshape(lines_, samples, bands)
    return np.ascontiguousarray(cube, dtype=np.float64), (lines_, samples)


def load_envi(header_path, label_path=None) -> PointCloud:
    """Load an ENVI cube as a flat point cloud, row-major pixel order.

    If ``label_path`` is omitted, a single-band integer raster at
    ``<stem>_gt.hdr`` is used as the label map when present (0 = unlabeled).
    """
    header_path = Path(header_path)
    cube, shape = _read_envi_cube(header_path)
    rows, cols = shape
    data = cube.reshape(rows * cols, cube.shape[2])
    labels = None
    if label_path is None:
        cand = header_path.with_name(header_path.stem + "_gt.hdr")
        label_path = cand if cand.exists() else None
    if label_path is not None:
        lab_cube, lab_shape = _read_envi_cube(Path(label_path))
        if lab_shape != shape or lab_cube.shape[2] != 1:
            raise LoadError(
                f"label raster shape {lab_shape}x{lab_cube.shape[2]} does not match cube {shape}x1"
            )
        labels = lab_cube.reshape(rows * cols).astype(np.int64)
    return PointCloud(data=data, shape=shape, labels=labels)


def load_csv(path) -> PointCloud:
    """Load a flat CSV point cloud: one header line, one row per pixel.

    A trailing column named ``label`` is parsed as integer labels
    (0 = unlabeled).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            names = next(reader)
        except StopIteration:
            raise LoadError(f"{path} is empty") from None
        has_labels = names and names[-1].strip() == "label"
        n_cols = len(names)
        rows, labels = [], []
        for r, rec in enumerate(reader, start=2):
            if len(rec) != n_cols:
                raise LoadError(f"{path}:{r}: expected {n_cols} fields, got {len(rec)}")
            body = rec[:-1] if has_labels else rec
            vals = []
            for c, cell in enumerate(body):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise LoadError(f"{path}:{r}: non-numeric value {cell!r} in column {c}") from None
            rows.append(vals)
            if has_labels:
                try:
                    labels.append(int(rec[-1]))
                except ValueError:
                    raise LoadError(
                        f"{path}:{r}: non-integer label {rec[-1]!r}"
                    ) from None
    if not rows:
        raise LoadError(f"{path} has a header but no data rows")
    data = np.array(rows, dtype=np.float64)
    return PointCloud(data=data, labels=np.array(labels, dtype=np.int64) if has_labels else None)


def save_csv(cloud: PointCloud, path, include_labels: bool = True) -> None:
    """Write a point cloud as CSV with round-trip-exact float formatting."""
    path = Path(path)
    with_labels = include_labels and cloud.labels is not None
    names = [f"b{i}" for i in range(cloud.n_bands)] + (["label"] if with_labels else [])
    with path.open("w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for i in range(cloud.n):
            cells = [repr(float(v)) for v in cloud.data[i]]
            if with_labels:
                cells.append(str(int(cloud.labels[i])))
            fh.write(",".join(cells) + "\n")


def load_labels(path) -> np.ndarray:
    """Load a single-column integer label file with a ``label`` header."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "label":
        raise LoadError(f"{path} is not a label file (missing 'label' header)")
    try:
        return np.array([int(v) for v in lines[1:] if v.strip() != ""], dtype=np.int64)
    except ValueError as exc:
        raise LoadError(f"{path}: non-integer label ({exc})") from None


def save_labels(labels: np.ndarray, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write("label\n")
        for v in labels:
            fh.write(f"{int(v)}\n")


def preprocess(cloud: PointCloud, spec: DatasetSpec) -> PointCloud:
    """Band dropping, duplicate-breaking jitter, then per-band z-scoring.

    Standardization maps each retained band to zero mean and unit variance;
    constant bands are left at zero and reported with a warning.
    """
    data = cloud.data
    if spec.band_drop:
        if max(spec.band_drop) >= data.shape[1]:
            raise ParameterError(
                f"band index {max(spec.band_drop)} out of range for D={data.shape[1]}"
            )
        keep = np.setdiff1d(np.arange(data.shape[1]), np.array(spec.band_drop))
        data = data[:, keep]
    else:
        data = data.copy()
    if spec.jitter_sigma:
        rng = np.random.Generator(np.random.Philox(spec.seed & _MASK64))
        data = data + spec.jitter_sigma * rng.standard_normal(data.shape)
    if spec.standardize:
        mean = data.mean(axis=0)
        std = data.std(axis=0)
        constant = std == 0
        if constant.any():
            warnings.warn(
                f"{int(constant.sum())} constant band(s) left at zero after standardization",
                stacklevel=2,
            )
        std_safe = np.where(constant, 1.0, std)
        data = (data - mean) / std_safe
    return PointCloud(data=data, shape=cloud.shape, labels=cloud.labels)


def synth_moons(n: int = 1000, noise_sigma: float = 0.1, seed: int = 0) -> PointCloud:
    """Two interleaving half-circles with isotropic Gaussian noise.

    Unit radius, the second arc shifted down by 0.5 and reflected; labels 1
    and 2 by arc.
    """
    if n < 2:
        raise ParameterError("need n >= 2")
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be nonnegative")
    n_out = n - n // 2
    n_in = n // 2
    t_out = np.linspace(0.0, np.pi, n_out)
    t_in = np.linspace(0.0, np.pi, n_in)
    pts = np.empty((n, 2))
    pts[:n_out, 0] = np.cos(t_out)
    pts[:n_out, 1] = np.sin(t_out)
    pts[n_out:, 0] = 1.0 - np.cos(t_in)
    pts[n_out:, 1] = 0.5 - np.sin(t_in)
    if noise_sigma > 0:
        rng = np.random.Generator(np.random.Philox(seed & _MASK64))
        pts = pts + noise_sigma * rng.standard_normal(pts.shape)
    labels = np.r_[np.ones(n_out, dtype=np.int64), np.full(n_in, 2, dtype=np.int64)]
    return PointCloud(data=pts, labels=labels)


# triangle generator constants: equilateral, centered at the origin, edge sqrt(2)
_TRI_EDGE = np.sqrt(2.0)
_TRI_R = _TRI_EDGE / np.sqrt(3.0)
_TRI_VERTICES = _TRI_R * np.array(
    [
        [np.cos(np.pi / 2), np.sin(np.pi / 2)],
        [np.cos(np.pi * 7 / 6), np.sin(np.pi * 7 / 6)],
        [np.cos(np.pi * 11 / 6), np.sin(np.pi * 11 / 6)],
    ]
)
_TRI_SIGMA_VERTEX = 0.175
_TRI_SIGMA_CENTER = 0.0175
_TRI_N_VERTEX = 1000
_TRI_N_CENTER = 2000


def _barycentric(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    T = np.column_stack([vertices[0] - vertices[2], vertices[1] - vertices[2]])
    Tinv = np.linalg.inv(T)
    b12 = (points - vertices[2]) @ Tinv.T
    b3 = 1.0 - b12.sum(axis=1)
    return np.column_stack([b12, b3])


def _rejection_sample(rng, center, sigma, count, vertices):
    out = []
    got = 0
    while got < count:
        batch = center + sigma * rng.standard_normal((1024, 2))
        bary = _barycentric(batch, vertices)
        keep = batch[np.all(bary >= 0, axis=1)]
        out.append(keep)
        got += keep.shape[0]
    return np.concatenate(out)[:count]


def synth_triangle(seed: int = 0):
    """Mixed-pixel triangle benchmark: 3 vertex blobs and a dense center blob.

    1000 points per vertex from N(vertex, 0.175^2 I) and 2000 from
    N(0, 0.0175^2 I), all rejection-sampled into the convex hull so the
    barycentric abundances are valid; n = 5000 exactly.  Labels are the argmax
    abundance, so the dense center blob splits between all three classes while
    vertex blobs are high purity.  Returns (PointCloud, SyntheticTriangleTruth).
    """
    rng = np.random.Generator(np.random.Philox(seed & _MASK64))
    parts, sources = [], []
    for k in range(3):
        pts = _rejection_sample(rng, _TRI_VERTICES[k], _TRI_SIGMA_VERTEX, _TRI_N_VERTEX, _TRI_VERTICES)
        parts.append(pts)
        sources.append(np.full(_TRI_N_VERTEX, k, dtype=np.int64))
    pts = _rejection_sample(rng, np.zeros(2), _TRI_SIGMA_CENTER, _TRI_N_CENTER, _TRI_VERTICES)
    parts.append(pts)
    sources.append(np.full(_TRI_N_CENTER, 3, dtype=np.int64))
    points = np.concatenate(parts)
    source = np.concatenate(sources)
    abundances = _barycentric(points, _TRI_VERTICES)
    labels = np.argmax(abundances, axis=1).astype(np.int64) + 1
    cloud = PointCloud(data=points, labels=labels)
    truth = SyntheticTriangleTruth(
        endmembers=_TRI_VERTICES.copy(),
        abundances=abundances,
        labels=labels.copy(),
        source=source,
    )
    return cloud, truth


def load_dataset(spec: DatasetSpec):
    """Materialize a DatasetSpec: load or generate, then preprocess.

    Returns (PointCloud, truth-or-None); truth is only available for the
    synthetic triangle.
    """
    truth = None
    if spec.source == "envi":
        cloud = load_envi(spec.path)
    elif spec.source == "csv":
        cloud = load_csv(spec.path)
    elif spec.source == "synthetic-moons":
        cloud = synth_moons(
            n=int(spec.params.get("n", 1000)),
            noise_sigma=float(spec.params.get("noise_sigma", 0.1)),
            seed=spec.seed,
        )
    else:
        cloud, truth = synth_triangle(seed=spec.seed)
    if spec.band_drop or spec.standardize or spec.jitter_sigma:
        cloud = preprocess(cloud, spec)
    return cloud, truth
