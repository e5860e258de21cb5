"""Point-cloud samples: file formats, synthetic primitives, normalization,
corruption protocols and batching.

Directory layout understood by :func:`load_dataset`::

    <root>/<class_name>/train/<files>
    <root>/<class_name>/test/<files>
    <root>/classes.txt          (optional; one class name per line)

Class indices follow sorted class-name order.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pointcaps.autodiff import Tensor
from pointcaps.errors import DomainError, ParseError, SchemaError, UsageError

SHAPES = ("sphere", "cube", "cylinder", "cone", "torus")
OUTLIER_LEVELS = (0, 1, 2, 5, 10, 20, 50, 100)
PERTURB_LEVELS = (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)

BLOB_MAGIC = b"PCAP"
BLOB_VERSION = 1
_BLOB_HEADER = struct.Struct("<4sHIHI")

MESH_SAMPLES = 10_000
TORUS_MAJOR, TORUS_MINOR = 1.0, 0.35

FORMAT_BY_SUFFIX = {".off": "off_mesh", ".xyz": "xyz_points", ".txt": "xyz_points", ".pcap": "binary_blob"}


@dataclass(frozen=True)
class PointCloudSample:
    points: np.ndarray
    label: int

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise DomainError(f"points must be a non-empty N x d array, got shape {pts.shape}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "label", int(self.label))

    @property
    def n_points(self):
        return self.points.shape[0]

    def with_points(self, points):
        return PointCloudSample(points, self.label)


@dataclass(frozen=True)
class CorruptionSpec:
    outlier_count: int = 0
    perturb_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.outlier_count < 0:
            raise UsageError("outlier_count must be >= 0")
        if self.perturb_std < 0:
            raise UsageError("perturb_std must be >= 0")

    @property
    def is_identity(self):
        return self.outlier_count == 0 and self.perturb_std == 0


@dataclass
class SplitDataset:
    train: list
    test: list
    class_names: list = field(default_factory=list)

    @property
    def n_classes(self):
        return len(self.class_names)


# ----------------------------------------------------------------------
# file formats
# ----------------------------------------------------------------------
def _content_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def _floats(path, lineno, tokens, count=None):
    try:
        values = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(path, lineno, f"expected numbers, got {' '.join(tokens)!r}") from None
    if count is not None and len(values) < count:
        raise ParseError(path, lineno, f"expected {count} values, got {len(values)}")
    return values


def read_off(path):
    """Parse an OFF mesh into (vertices V x 3, triangles T x 3).

    Polygons with more than three corners are fan-triangulated. Headers glued
    to the counts (``OFF490 518 0``) are accepted.
    """
    lines = _content_lines(path)
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise ParseError(path, 1, "empty file") from None
    if not head.startswith("OFF"):
        raise ParseError(path, lineno, "missing OFF header")
    rest = head[3:].split()
    if not rest:
        try:
            lineno, counts_line = next(lines)
        except StopIteration:
            raise ParseError(path, lineno, "missing counts line") from None
        rest = counts_line.split()
    try:
        n_vertices, n_faces = int(rest[0]), int(rest[1])
    except (ValueError, IndexError):
        raise ParseError(path, lineno, "malformed counts line") from None

    vertices = []
    for _ in range(n_vertices):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise ParseError(path, lineno + 1, "file ends inside the vertex block") from None
        vertices.append(_floats(path, lineno, line.split(), 3)[:3])
    triangles = []
    for _ in range(n_faces):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise ParseError(path, lineno + 1, "file ends inside the face block") from None
        tokens = line.split()
        try:
            k = int(tokens[0])
            idx = [int(t) for t in tokens[1 : 1 + k]]
        except (ValueError, IndexError):
            raise ParseError(path, lineno, "malformed face") from None
        if len(idx) != k or k < 3 or min(idx) < 0 or max(idx) >= n_vertices:
            raise ParseError(path, lineno, "face references missing vertices")
        for j in range(1, k - 1):
            triangles.append((idx[0], idx[j], idx[j + 1]))
    return np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(triangles, dtype=np.int64).reshape(-1, 3)


def sample_mesh_surface(vertices, triangles, count, rng):
    """Area-weighted uniform samples on a triangle mesh."""
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    if areas.sum() <= 0:
        raise DomainError("mesh has zero surface area")
    face = rng.choice(len(triangles), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))[:, None]
    r2 = rng.random(count)[:, None]
    return (1 - r1) * a[face] + r1 * (1 - r2) * b[face] + r1 * r2 * c[face]


def read_xyz(path):
    """One point per line; whitespace or commas; '#' comments; extra columns ignored."""
    rows = []
    for lineno, line in _content_lines(path):
        rows.append(_floats(path, lineno, line.replace(",", " ").split(), 3)[:3])
    if not rows:
        raise ParseError(path, 1, "no points")
    return np.array(rows, dtype=np.float64)


def write_xyz(path, points):
    np.savetxt(path, np.asarray(points), fmt="%.9g")


def write_blob(path, points, label):
    points = np.asarray(points, dtype="<f4")
    n, d = points.shape
    with open(path, "wb") as fh:
        fh.write(_BLOB_HEADER.pack(BLOB_MAGIC, BLOB_VERSION, n, d, int(label)))
        fh.write(points.tobytes())


def read_blob(path):
    """Returns (points N x d float32, label)."""
    data = Path(path).read_bytes()
    if len(data) < _BLOB_HEADER.size:
        raise ParseError(path, 1, "truncated header")
    magic, version, n, d, label = _BLOB_HEADER.unpack_from(data)
    if magic != BLOB_MAGIC:
        raise ParseError(path, 1, f"bad magic {magic!r}")
    if version != BLOB_VERSION:
        raise ParseError(path, 1, f"unsupported blob version {version}")
    if len(data) != _BLOB_HEADER.size + 4 * n * d:
        raise ParseError(path, 1, f"payload size does not match N={n}, d={d}")
    points = np.frombuffer(data, dtype="<f4", offset=_BLOB_HEADER.size).reshape(n, d)
    return points.astype(np.float32), label


def _subsample(points, n_points, rng):
    if n_points is None or len(points) == n_points:
        return points
    replace = len(points) < n_points
    pick = rng.choice(len(points), size=n_points, replace=replace)
    return points[np.sort(pick)] if not replace else points[pick]


def load_points(path, fmt=None, n_points=None, seed=0, mode="surface"):
    """Read one file into an N x 3 array.

    Meshes are sampled at 10,000 area-weighted surface points and then
    subsampled to ``n_points``; ``mode="vertices"`` samples mesh vertices
    instead.
    """
    fmt = fmt or FORMAT_BY_SUFFIX.get(Path(path).suffix.lower())
    rng = np.random.default_rng(seed)
    if fmt == "off_mesh":
        vertices, triangles = read_off(path)
        if mode == "vertices":
            points = vertices
        else:
            points = sample_mesh_surface(vertices, triangles, MESH_SAMPLES, rng)
    elif fmt == "xyz_points":
        points = read_xyz(path)
    elif fmt == "binary_blob":
        points, _ = read_blob(path)
    else:
        raise SchemaError(f"{path}: unknown point-cloud format {fmt!r}")
    if points.shape[1] != 3:
        raise SchemaError(f"{path}: expected 3 coordinates per point, got {points.shape[1]}")
    return _subsample(points, n_points, rng)


def load_dataset(root, fmt=None, n_points=1024, seed=0, normalize=True):
    """Load the ``<root>/<class>/{train,test}/`` layout into a :class:`SplitDataset`."""
    root = Path(root)
    if not root.is_dir():
        raise SchemaError(f"{root}: dataset root is not a directory")
    found = sorted(p.name for p in root.iterdir() if p.is_dir())
    listed = root / "classes.txt"
    if listed.exists():
        known = [ln.strip() for ln in listed.read_text().splitlines() if ln.strip()]
        unknown = sorted(set(found) - set(known))
        if unknown:
            raise SchemaError(f"{root}: unknown class name(s) {', '.join(unknown)} not in classes.txt")
        names = sorted(known)
    else:
        names = found
    if not names:
        raise SchemaError(f"{root}: no class directories")
    index = {name: i for i, name in enumerate(names)}
    splits = {"train": [], "test": []}
    counter = 0
    for name in names:
        for split in ("train", "test"):
            folder = root / name / split
            if not folder.is_dir():
                continue
            for path in sorted(folder.iterdir()):
                if not path.is_file():
                    continue
                file_fmt = fmt or FORMAT_BY_SUFFIX.get(path.suffix.lower())
                if file_fmt is None:
                    continue
                points = load_points(path, file_fmt, n_points, seed=(seed, counter))
                counter += 1
                if file_fmt == "binary_blob":
                    _, stored = read_blob(path)
                    if stored != index[name]:
                        raise SchemaError(f"{path}: stored label {stored} differs from directory class {name}")
                sample = PointCloudSample(points, index[name])
                splits[split].append(normalize_unit_sphere(sample) if normalize else sample)
    return SplitDataset(splits["train"], splits["test"], names)


def save_dataset(dataset, root):
    """Write a :class:`SplitDataset` as binary blobs in the directory layout."""
    root = Path(root)
    for name in dataset.class_names:
        for split in ("train", "test"):
            (root / name / split).mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in ("train", "test"):
        for sample in getattr(dataset, split):
            name = dataset.class_names[sample.label]
            i = counts.get((name, split), 0)
            counts[(name, split)] = i + 1
            write_blob(root / name / split / f"{name}_{i:04d}.pcap", sample.points, sample.label)


# ----------------------------------------------------------------------
# synthetic primitives
# ----------------------------------------------------------------------
def _unit_vectors(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n):
    return _unit_vectors(rng, n)


def _cube(rng, n):
    # half-edge 1: pick a face uniformly, then a point on it
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = rng.integers(0, 3, size=n)
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = sign
    return pts


def _cylinder(rng, n):
    # radius 1, z in [-1, 1]; side area 4*pi, each cap pi
    part = rng.choice(3, size=n, p=[4 / 6, 1 / 6, 1 / 6])
    theta = rng.uniform(0, 2 * np.pi, size=n)
    radius = np.where(part == 0, 1.0, np.sqrt(rng.random(n)))
    z = np.where(part == 0, rng.uniform(-1, 1, size=n), np.where(part == 1, 1.0, -1.0))
    return np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)


def _cone(rng, n):
    # base radius 1 at z=-1, apex at z=1; side area pi*sqrt(5), base pi
    side = np.sqrt(5.0)
    on_side = rng.random(n) < side / (side + 1.0)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    frac = np.sqrt(rng.random(n))  # distance from apex (side) or centre (base), area-uniform
    radius = frac
    z = np.where(on_side, 1.0 - 2.0 * frac, -1.0)
    return np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)


def _torus(rng, n):
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0, 2 * np.pi, size=m)
        v = rng.uniform(0, 2 * np.pi, size=m)
        keep = rng.random(m) < (TORUS_MAJOR + TORUS_MINOR * np.cos(v)) / (TORUS_MAJOR + TORUS_MINOR)
        u, v = u[keep], v[keep]
        ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)], 1)])
    return out[:n]


_GENERATORS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "cone": _cone, "torus": _torus}


def synthesize(shape, n_points, seed, label=0):
    """Uniform surface samples of a primitive: unit sphere, cube of half-edge 1,
    cylinder and cone of radius 1 spanning z in [-1, 1], torus (R=1, r=0.35)."""
    if shape not in _GENERATORS:
        raise UsageError(f"unknown shape {shape!r}; choose from {', '.join(SHAPES)}")
    if n_points < 8:
        raise UsageError("n_points must be >= 8")
    rng = np.random.default_rng(seed)
    return PointCloudSample(_GENERATORS[shape](rng, n_points), label)


def random_pose(points, rng, scale_range=(0.75, 1.25)):
    """Anisotropic scaling followed by a rotation about the vertical axis."""
    scale = rng.uniform(*scale_range, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return (np.asarray(points, dtype=np.float64) * scale) @ rot.T


def make_synthetic_dataset(shapes, per_class, n_points, seed, train_fraction=0.8, pose=True):
    """Balanced primitives dataset, unit-sphere normalized, split per class."""
    names = sorted(shapes)
    unknown = [name for name in names if name not in _GENERATORS]
    if unknown:
        raise UsageError(f"unknown shape(s) {', '.join(unknown)}; choose from {', '.join(SHAPES)}")
    train, test = [], []
    n_train = int(round(per_class * train_fraction))
    for label, name in enumerate(names):
        for i in range(per_class):
            ss = np.random.SeedSequence([seed, SHAPES.index(name), i])
            shape_seed, pose_seed = ss.spawn(2)
            sample = synthesize(name, n_points, np.random.default_rng(shape_seed), label)
            if pose:
                sample = sample.with_points(random_pose(sample.points, np.random.default_rng(pose_seed)))
            sample = normalize_unit_sphere(sample)
            (train if i < n_train else test).append(sample)
    return SplitDataset(train, test, names)


# ----------------------------------------------------------------------
# normalization and corruption
# ----------------------------------------------------------------------
def normalize_unit_sphere(sample):
    """Subtract the centroid and scale so the farthest point has norm 1."""
    pts = np.asarray(sample.points, dtype=np.float64)
    centred = pts - pts.mean(axis=0)
    scale = np.linalg.norm(centred, axis=1).max()
    if not scale > 0:
        raise DomainError("cannot normalize a cloud whose points are all identical")
    return sample.with_points(centred / scale)


def _rng(seed):
    return np.random.default_rng(seed)


def uniform_ball(rng, n, radius=1.0):
    direction = _unit_vectors(rng, n)
    return direction * (radius * rng.random(n) ** (1.0 / 3.0))[:, None]


def corrupt_outliers(sample, count, seed):
    """Replace ``count`` distinct random points by points uniform in the unit ball."""
    n = sample.n_points
    if count > n:
        raise UsageError(f"outlier count {count} exceeds the {n} points of the sample")
    if count < 0:
        raise UsageError("outlier count must be >= 0")
    if count == 0:
        return sample
    rng = _rng(seed)
    idx = rng.choice(n, size=count, replace=False)
    pts = np.array(sample.points, dtype=np.float32)
    pts[idx] = uniform_ball(rng, count)
    return sample.with_points(pts)


def corrupt_perturb(sample, std, seed):
    """Add i.i.d. N(0, std^2) noise to every coordinate; nothing is clipped."""
    if std < 0:
        raise UsageError("perturbation std must be >= 0")
    if std == 0:
        return sample
    noise = _rng(seed).normal(0.0, std, size=sample.points.shape)
    return sample.with_points(sample.points + noise)


def corrupt(sample, spec, index=0):
    """Apply outliers, then perturbation, with seeds derived from (spec.seed, index)."""
    if spec.is_identity:
        return sample
    outlier_seed, perturb_seed = np.random.SeedSequence([spec.seed, index]).spawn(2)
    out = corrupt_outliers(sample, spec.outlier_count, outlier_seed)
    return corrupt_perturb(out, spec.perturb_std, perturb_seed)


def corrupt_all(samples, spec):
    return [corrupt(s, spec, i) for i, s in enumerate(samples)]


def build_training_mix(clean, spec, seed=None):
    """Clean samples plus one corrupted copy of each, shuffled."""
    mixed = list(clean) + corrupt_all(clean, spec)
    order = _rng(spec.seed if seed is None else seed).permutation(len(mixed))
    return [mixed[i] for i in order]


def batch_iterator(samples, batch_size, shuffle_seed=None, drop_last=True):
    """Yield ``(points B x N x 3 Tensor, labels)``; the short final batch is dropped by default."""
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = _rng(shuffle_seed).permutation(len(samples))
    stop = len(order) - len(order) % batch_size if drop_last else len(order)
    for start in range(0, stop, batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        points = np.stack([s.points for s in chunk])
        labels = np.array([s.label for s in chunk], dtype=np.int64)
        yield Tensor(points), labels
