"""Dataset readers, the synthetic hierarchy generator and matrix/metric serialization."""

from dataclasses import dataclass
import gzip
import json
import os
from pathlib import Path
import struct

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MATRIX_MAGIC = b"SIPMAT01"


class IdxMagicError(ValueError):
    pass


class IdxTruncatedError(ValueError):
    pass


class IdxCountMismatch(ValueError):
    pass


class MatrixFormatError(ValueError):
    pass


class MultilabelParseError(ValueError):
    pass


def _read_bytes(path):
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf, magic, ndim, what):
    if len(buf) < 4:
        raise IdxTruncatedError(f"{what}: file shorter than its header")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IdxMagicError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxTruncatedError(f"{what}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, buf[4:head])
    size = int(np.prod(dims))
    if len(buf) < head + size:
        raise IdxTruncatedError(f"{what}: expected {size} data bytes, found {len(buf) - head}")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(path_images, path_labels):
    """Images scaled to [0, 1] with shape (n, H, W) and integer labels."""
    imgs = _parse_idx(_read_bytes(path_images), IMAGE_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(path_labels), LABEL_MAGIC, 1, "labels")
    if imgs.shape[0] != labels.shape[0]:
        raise IdxCountMismatch(f"{imgs.shape[0]} images but {labels.shape[0]} labels")
    return imgs.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(path_images, path_labels, images, labels):
    """Write uint8 IDX files (used for fixtures and conversions)."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path_images, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(path_labels, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def data_dir(explicit=None):
    if explicit:
        return Path(explicit)
    env = os.environ.get("SIPWARP_DATA_DIR")
    return Path(env) if env else None


_MNIST_NAMES = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
]


def _find(root, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = root / name
        if p.exists():
            return p
        p = root / "mnist" / name
        if p.exists():
            return p
    return None


@dataclass
class ImageSet:
    images: np.ndarray  # (n, H, W) in [0, 1]
    labels: np.ndarray
    source: str


def load_mnist(root=None, allow_bundled=True):
    """MNIST from IDX files under ``root`` / SIPWARP_DATA_DIR.

    Without IDX files, falls back to the 5000-image MNIST subset shipped with
    the ``mlxtend`` package (500 images per digit) when it is installed.
    """
    base = data_dir(root)
    if base is not None:
        parts = []
        for img_name, lab_name in _MNIST_NAMES:
            pi, pl = _find(base, img_name), _find(base, lab_name)
            if pi is not None and pl is not None:
                parts.append(load_idx(pi, pl))
        if parts:
            imgs = np.concatenate([p[0] for p in parts])
            labs = np.concatenate([p[1] for p in parts])
            return ImageSet(imgs, labs, f"idx:{base}")
    if allow_bundled:
        try:
            from mlxtend.data import mnist_data
        except ImportError:
            mnist_data = None
        if mnist_data is not None:
            X, y = mnist_data()
            return ImageSet(X.reshape(-1, 28, 28) / 255.0, y.astype(np.int64), "mlxtend:mnist_5k")
    raise FileNotFoundError(
        "MNIST not found: put the IDX files under SIPWARP_DATA_DIR (or --data-dir), "
        "or install mlxtend for the bundled 5000-image subset"
    )


# multilabel text format


@dataclass
class MultilabelData:
    features: np.ndarray  # dense (n, p)
    labels: list          # list of sets of label ids
    hierarchy: object
    label_ids: list       # original id for each column index


def _parse_data_line(line, lineno):
    if "\t" in line:
        lab, feats = line.split("\t", 1)
    else:
        lab, feats = line, ""
    labs = set()
    for tok in lab.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            labs.add(int(tok))
        except ValueError:
            raise MultilabelParseError(f"line {lineno}: bad label id {tok!r}") from None
    pairs = {}
    for tok in feats.split():
        if ":" not in tok:
            raise MultilabelParseError(f"line {lineno}: malformed feature {tok!r}")
        k, v = tok.split(":", 1)
        try:
            pairs[int(k)] = float(v)
        except ValueError:
            raise MultilabelParseError(f"line {lineno}: malformed feature {tok!r}") from None
    return labs, pairs


def load_multilabel(data_path, hierarchy_path):
    from .multilabelapp import derive_constraints

    rows = []
    with open(data_path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            rows.append(_parse_data_line(line, lineno))
    parent_of = {}
    with open(hierarchy_path) as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise MultilabelParseError(f"hierarchy line {lineno}: expected 'child parent'")
            try:
                c, p = int(parts[0]), int(parts[1])
            except ValueError:
                raise MultilabelParseError(f"hierarchy line {lineno}: non-integer label id") from None
            parent_of[c] = p
    seen = set().union(*(r[0] for r in rows)) if rows else set()
    unknown = (set(parent_of) | set(parent_of.values())) - seen
    if unknown:
        raise MultilabelParseError(f"hierarchy mentions unknown label ids {sorted(unknown)}")
    ids = sorted(seen)
    col = {lab: k for k, lab in enumerate(ids)}
    width = 1 + max((max(r[1]) for r in rows if r[1]), default=-1)
    F = np.zeros((len(rows), width))
    for n, (_, feats) in enumerate(rows):
        for k, v in feats.items():
            F[n, k] = v
    H = derive_constraints({col[c]: col[p] for c, p in parent_of.items()}, m=len(ids))
    labels = [{col[l] for l in r[0]} for r in rows]
    return MultilabelData(F, labels, H, ids)


# synthetic hierarchy


@dataclass
class SynthHierarchical:
    features: np.ndarray
    labels: np.ndarray        # (n, m) 0/1, after noise
    clean_labels: np.ndarray  # (n, m) 0/1, before noise
    leaf: np.ndarray          # generating leaf per example
    parent_of: dict
    hierarchy: object


def synth_hierarchical(seed, m_labels, depth, n_examples, noise, dim=10, spread=1.0):
    """Random label tree, Gaussian clusters per leaf, labels = leaf + ancestors, then flips.

    Label 0 is the root. Cluster centers follow the tree: each child sits at
    its parent's center plus an offset that shrinks with depth, so labels
    that share ancestors also share input structure.
    """
    from .multilabelapp import derive_constraints

    if m_labels < 2 or depth < 1 or n_examples < 1 or not 0 <= noise <= 1:
        raise ValueError("need m_labels >= 2, depth >= 1, n_examples >= 1, noise in [0, 1]")
    rng = np.random.default_rng(seed)
    level = {0: 0}
    parent_of = {}
    for lab in range(1, m_labels):
        # attach to a random node that still has room below it
        open_nodes = [k for k in range(lab) if level[k] < depth]
        par = int(rng.choice(open_nodes))
        parent_of[lab] = par
        level[lab] = level[par] + 1
    children = {k: [c for c, p in parent_of.items() if p == k] for k in range(m_labels)}
    leaves = np.array([k for k in range(m_labels) if not children[k] and k != 0] or [0])
    center = {0: np.zeros(dim)}
    for lab in range(1, m_labels):
        off = rng.standard_normal(dim)
        center[lab] = center[parent_of[lab]] + 3.0 * spread * off / np.linalg.norm(off) / level[lab]
    leaf = leaves[rng.integers(0, len(leaves), size=n_examples)]
    X = np.stack([center[int(l)] for l in leaf]) + 0.5 * spread * rng.standard_normal((n_examples, dim))
    clean = np.zeros((n_examples, m_labels), dtype=np.int64)
    for n, l in enumerate(leaf):
        node = int(l)
        clean[n, node] = 1
        while node in parent_of:
            node = parent_of[node]
            clean[n, node] = 1
    flips = rng.random(clean.shape) < noise
    noisy = np.where(flips, 1 - clean, clean)
    return SynthHierarchical(X, noisy, clean, leaf, parent_of,
                             derive_constraints(parent_of, m=m_labels))


# matrices and metrics


def save_matrix(path, M):
    M = np.ascontiguousarray(np.asarray(M, dtype="<f8"))
    if M.ndim != 2:
        raise MatrixFormatError("only 2-D matrices are supported")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<QQ", M.shape[0], M.shape[1]))
        fh.write(M.tobytes())


def load_matrix(path):
    buf = Path(path).read_bytes()
    if len(buf) < 24 or buf[:8] != MATRIX_MAGIC:
        raise MatrixFormatError("bad magic: not a SIPMAT01 file")
    rows, cols = struct.unpack("<QQ", buf[8:24])
    need = 24 + 8 * rows * cols
    if len(buf) != need:
        raise MatrixFormatError(f"size mismatch: header says {rows}x{cols}, file has {len(buf) - 24} data bytes")
    return np.frombuffer(buf, dtype="<f8", offset=24).reshape(rows, cols).astype(np.float64)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def save_metrics(path, metrics):
    with open(path, "w") as fh:
        json.dump(_jsonable(metrics), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_metrics(path):
    with open(path) as fh:
        return json.load(fh)
