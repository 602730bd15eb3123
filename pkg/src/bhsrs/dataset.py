"""Hyperspectral cube ingestion, train/validation/test splitting and patches."""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

UNLABELED, TRAIN, VALIDATION, TEST = 0, 1, 2, 3
ROLE_NAMES = {UNLABELED: "unlabeled", TRAIN: "train", VALIDATION: "validation", TEST: "test"}

# 4-connectivity, fixed visiting order: up, left, right, down
_NEIGHBOURS = ((-1, 0), (0, -1), (0, 1), (1, 0))

ENVI_DTYPES = {4: "f4", 12: "u2", 2: "i2"}


class EnviParseError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class HyperCube:
    data: np.ndarray  # H x W x C float32
    labels: np.ndarray  # H x W ints, 0 = unlabeled
    class_names: list[str] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"cube data must be H x W x C, got {self.data.shape}")
        if self.labels is None:
            self.labels = np.zeros(self.data.shape[:2], dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != self.data.shape[:2]:
            raise ValueError(f"labels shape {self.labels.shape} != cube spatial shape {self.data.shape[:2]}")
        if self.labels.min(initial=0) < 0:
            raise ValueError("labels must be non-negative")
        if self.class_names is not None and self.labels.any():
            declared = len(self.class_names)
            if self.labels.max() > declared:
                raise ValueError(f"label {self.labels.max()} exceeds the {declared} declared classes")
            missing = sorted(set(range(1, declared + 1)) - set(np.unique(self.labels).tolist()))
            if missing:
                raise ValueError(f"declared classes {missing} have no labelled pixels")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max(initial=0))


# ---------------------------------------------------------------- ENVI


def parse_envi_header(path) -> dict:
    """Parse an ENVI ``.hdr`` into a dict with lower-cased keys.

    Required fields are validated; errors name the offending line.
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip().upper() != "ENVI":
        raise EnviParseError(f"{path}:1: missing 'ENVI' magic line")
    fields: dict[str, str] = {}
    line_of: dict[str, int] = {}
    i = 1
    while i < len(lines):
        raw = lines[i]
        lineno = i + 1
        i += 1
        if not raw.strip() or raw.lstrip().startswith(";"):
            continue
        if "=" not in raw:
            raise EnviParseError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = raw.split("=", 1)
        key = key.strip().lower()
        value = value.strip()
        if value.startswith("{") and "}" not in value:
            parts = [value]
            while i < len(lines) and "}" not in parts[-1]:
                parts.append(lines[i].strip())
                i += 1
            value = " ".join(parts)
        fields[key] = value
        line_of[key] = lineno

    def need_int(key: str) -> int:
        if key not in fields:
            raise EnviParseError(f"{path}: missing required field {key!r}")
        try:
            return int(fields[key])
        except ValueError:
            raise EnviParseError(f"{path}:{line_of[key]}: field {key!r} is not an integer: {fields[key]!r}") from None

    header = {
        "samples": need_int("samples"),
        "lines": need_int("lines"),
        "bands": need_int("bands"),
        "data type": need_int("data type"),
        "header offset": int(fields.get("header offset", "0")),
        "byte order": int(fields.get("byte order", "0")),
        "interleave": fields.get("interleave", "bsq").lower(),
    }
    if header["interleave"] not in ("bsq", "bil", "bip"):
        raise EnviParseError(f"{path}:{line_of.get('interleave', '?')}: unknown interleave {fields['interleave']!r}")
    if header["data type"] not in ENVI_DTYPES:
        raise EnviParseError(f"{path}:{line_of['data type']}: unsupported data type {header['data type']}")
    if header["byte order"] not in (0, 1):
        raise EnviParseError(f"{path}:{line_of['byte order']}: byte order must be 0 or 1")
    if "class names" in fields:
        names = fields["class names"].strip("{} ")
        header["class names"] = [n.strip() for n in names.split(",")]
    return header


def _find_data_file(header_path: Path) -> Path:
    for suffix in (".raw", ".img", ".dat", ".bsq", ".bil", ".bip", ""):
        candidate = header_path.with_suffix(suffix)
        if candidate.exists() and candidate != header_path:
            return candidate
    raise FileNotFoundError(f"no data file found next to {header_path}")


def read_envi(header_path, data_path=None) -> tuple[np.ndarray, dict]:
    """Read an ENVI raster as an ``H x W x C`` float array (native precision kept)."""
    header_path = Path(header_path)
    header = parse_envi_header(header_path)
    data_path = Path(data_path) if data_path is not None else _find_data_file(header_path)
    if not data_path.exists():
        raise FileNotFoundError(f"ENVI data file not found: {data_path}")
    h, w, c = header["lines"], header["samples"], header["bands"]
    dtype = np.dtype(ENVI_DTYPES[header["data type"]]).newbyteorder(">" if header["byte order"] else "<")
    expected = header["header offset"] + h * w * c * dtype.itemsize
    actual = data_path.stat().st_size
    if actual != expected:
        raise IntegrityError(f"{data_path}: size {actual} bytes, header implies {expected}")
    flat = np.fromfile(data_path, dtype=dtype, offset=header["header offset"])
    layout = header["interleave"]
    if layout == "bsq":
        arr = flat.reshape(c, h, w).transpose(1, 2, 0)
    elif layout == "bil":
        arr = flat.reshape(h, c, w).transpose(0, 2, 1)
    else:
        arr = flat.reshape(h, w, c)
    return np.ascontiguousarray(arr.astype(dtype.newbyteorder("="))), header


def write_envi(header_path, array: np.ndarray, interleave: str = "bsq", data_type: int = 4,
               byte_order: int = 0, data_path=None) -> Path:
    """Write ``H x W x C`` (or ``H x W``) data as an ENVI header + raw pair."""
    header_path = Path(header_path)
    data_path = Path(data_path) if data_path is not None else header_path.with_suffix(".raw")
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    dtype = np.dtype(ENVI_DTYPES[data_type]).newbyteorder(">" if byte_order else "<")
    if interleave == "bsq":
        ordered = arr.transpose(2, 0, 1)
    elif interleave == "bil":
        ordered = arr.transpose(0, 2, 1)
    elif interleave == "bip":
        ordered = arr
    else:
        raise ValueError(f"unknown interleave {interleave!r}")
    np.ascontiguousarray(ordered).astype(dtype).tofile(data_path)
    header_path.write_text(
        "ENVI\n"
        f"samples = {w}\nlines = {h}\nbands = {c}\nheader offset = 0\n"
        f"data type = {data_type}\ninterleave = {interleave}\nbyte order = {byte_order}\n"
    )
    return data_path


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM; 16-bit samples are big-endian."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.int64)


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.min(initial=0) < 0:
        raise ValueError("PGM values must be non-negative")
    maxval = max(int(img.max(initial=0)), 1)
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(img.astype(dtype).tobytes())


def load_labels(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    arr, _ = read_envi(path)
    return np.rint(arr[:, :, 0]).astype(np.int64)


def load_envi(header_path, data_path=None, labels_path=None) -> HyperCube:
    data, header = read_envi(header_path, data_path)
    labels = load_labels(labels_path) if labels_path is not None else None
    return HyperCube(data.astype(np.float32), labels, header.get("class names"))


# ---------------------------------------------------------------- splitting


@dataclass
class SplitAssignment:
    roles: np.ndarray  # H x W int8 role codes
    seed: int
    pixels_per_class: int
    policy: str = "cc"
    flags: dict[str, str] = field(default_factory=dict)

    def coords(self, role: int) -> np.ndarray:
        return np.argwhere(self.roles == role)

    def to_json(self) -> str:
        flat = self.roles.ravel()
        change = np.flatnonzero(np.diff(flat)) + 1
        starts = np.concatenate([[0], change])
        lengths = np.diff(np.concatenate([starts, [flat.size]]))
        runs = [[int(flat[s]), int(n)] for s, n in zip(starts, lengths)]
        return json.dumps({
            "seed": self.seed, "pixels_per_class": self.pixels_per_class, "policy": self.policy,
            "shape": list(self.roles.shape), "flags": self.flags, "roles": runs,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        d = json.loads(text)
        values = np.concatenate([np.full(n, v, dtype=np.int8) for v, n in d["roles"]]) if d["roles"] else np.zeros(0, np.int8)
        roles = values.reshape(d["shape"])
        return cls(roles, d["seed"], d["pixels_per_class"], d.get("policy", "cc"),
                   {str(k): v for k, v in d.get("flags", {}).items()})


def _component_bfs(labels: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Pixels of the 4-connected same-class component of ``start``, in BFS order."""
    h, w = labels.shape
    cls = labels[start]
    seen = np.zeros(labels.shape, dtype=bool)
    seen[start] = True
    queue = deque([start])
    order = []
    while queue:
        r, c = queue.popleft()
        order.append((r, c))
        for dr, dc in _NEIGHBOURS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and not seen[rr, cc] and labels[rr, cc] == cls:
                seen[rr, cc] = True
                queue.append((rr, cc))
    return order


def _split_remaining(roles, labels, classes, val_fraction, rng) -> None:
    for cls in classes:
        rest = np.argwhere((labels == cls) & (roles == UNLABELED))
        perm = rng.permutation(len(rest))
        n_val = int(round(val_fraction * len(rest)))
        for k, idx in enumerate(perm):
            roles[tuple(rest[idx])] = VALIDATION if k < n_val else TEST


def _class_ids(labels: np.ndarray) -> list[int]:
    return [int(c) for c in np.unique(labels) if c > 0]


def cc_train_split(labels, pixels_per_class: int = 20, val_fraction: float = 0.1, seed: int = 0,
                   max_redraws: int = 10) -> SplitAssignment:
    """Connected-component training split.

    Per class, a random pixel is drawn and training pixels are taken in BFS
    order from it within its 4-connected same-class component. Components
    smaller than ``pixels_per_class`` trigger a redraw; after
    ``max_redraws`` the largest component is used and the class is flagged.
    Remaining labelled pixels go to validation/test per class.
    """
    labels = labels.labels if isinstance(labels, HyperCube) else np.asarray(labels, dtype=np.int64)
    if pixels_per_class < 1:
        raise SplitError(f"pixels_per_class must be >= 1, got {pixels_per_class}")
    if not 0 <= val_fraction < 1:
        raise SplitError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    classes = _class_ids(labels)
    if not classes:
        raise SplitError("label map has no labelled pixels")
    rng = np.random.default_rng(seed)
    roles = np.zeros(labels.shape, dtype=np.int8)
    flags: dict[str, str] = {}
    for cls in classes:
        pixels = np.argwhere(labels == cls)
        chosen = None
        for _ in range(max_redraws):
            start = tuple(int(v) for v in pixels[rng.integers(len(pixels))])
            comp = _component_bfs(labels, start)
            if len(comp) >= pixels_per_class:
                chosen = comp
                break
        if chosen is None:
            comp_map, n = ndimage.label(labels == cls)
            sizes = np.bincount(comp_map.ravel())[1:]
            largest = np.argwhere(comp_map == int(np.argmax(sizes)) + 1)
            start = tuple(int(v) for v in largest[rng.integers(len(largest))])
            chosen = _component_bfs(labels, start)
            flags[str(cls)] = "largest-component" if len(chosen) >= pixels_per_class else "short"
        for rc in chosen[:pixels_per_class]:
            roles[rc] = TRAIN
    _split_remaining(roles, labels, classes, val_fraction, rng)
    return SplitAssignment(roles, seed, pixels_per_class, "cc", flags)


def random_split(labels, pixels_per_class: int = 20, val_fraction: float = 0.1, seed: int = 0) -> SplitAssignment:
    """Uniformly random training pixels per class (the baseline the CC split improves on)."""
    labels = labels.labels if isinstance(labels, HyperCube) else np.asarray(labels, dtype=np.int64)
    if pixels_per_class < 1:
        raise SplitError(f"pixels_per_class must be >= 1, got {pixels_per_class}")
    classes = _class_ids(labels)
    if not classes:
        raise SplitError("label map has no labelled pixels")
    rng = np.random.default_rng(seed)
    roles = np.zeros(labels.shape, dtype=np.int8)
    flags = {}
    for cls in classes:
        pixels = np.argwhere(labels == cls)
        if len(pixels) < pixels_per_class:
            flags[str(cls)] = "short"
        pick = rng.choice(len(pixels), size=min(pixels_per_class, len(pixels)), replace=False)
        roles[tuple(pixels[pick].T)] = TRAIN
    _split_remaining(roles, labels, classes, val_fraction, rng)
    return SplitAssignment(roles, seed, pixels_per_class, "random", flags)


def validate_split(split: SplitAssignment, labels: np.ndarray) -> None:
    """Raise ``SplitError`` unless the split invariants hold."""
    labels = np.asarray(labels)
    labelled = labels > 0
    if np.any((split.roles != UNLABELED) != labelled):
        raise SplitError("roles must cover exactly the labelled pixels")
    for cls in _class_ids(labels):
        n_train = int(np.sum((labels == cls) & (split.roles == TRAIN)))
        available = int(np.sum(labels == cls))
        if n_train != min(split.pixels_per_class, available) and str(cls) not in split.flags:
            raise SplitError(f"class {cls}: {n_train} train pixels, expected {split.pixels_per_class}")


@dataclass
class OverlapHistogram:
    distances: np.ndarray  # per val/test pixel, Chebyshev distance to nearest same-class train pixel
    thresholds: np.ndarray  # integer distances d = 1..max
    fraction_below: np.ndarray  # fraction of val/test pixels with distance < d
    patch_size: int

    @property
    def headline(self) -> float:
        """Fraction of evaluation pixels whose patch overlaps a same-class training patch."""
        return float(np.mean(self.distances < self.patch_size)) if self.distances.size else 0.0


def chebyshev_distances(split: SplitAssignment, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    evaluation = (split.roles == VALIDATION) | (split.roles == TEST)
    dist = np.full(labels.shape, np.inf)
    for cls in _class_ids(labels):
        train = (labels == cls) & (split.roles == TRAIN)
        targets = evaluation & (labels == cls)
        if not targets.any() or not train.any():
            continue
        d = ndimage.distance_transform_cdt(~train, metric="chessboard").astype(np.float64)
        dist[targets] = d[targets]
    return dist[evaluation]


def overlap_histogram(split: SplitAssignment, labels: np.ndarray, patch_size: int = 9,
                      max_distance: int | None = None) -> OverlapHistogram:
    """Cumulative fraction of val/test pixels within each Chebyshev distance of training pixels.

    Pixels whose class has no training pixel get an infinite distance and
    never count as overlapping; they stay in the denominator.
    """
    distances = chebyshev_distances(split, labels)
    finite = distances[np.isfinite(distances)]
    top = max_distance if max_distance is not None else int(max(finite.max(initial=0) + 1, patch_size))
    thresholds = np.arange(1, top + 1)
    n = max(distances.size, 1)
    fraction = np.array([np.sum(distances < d) / n for d in thresholds])
    return OverlapHistogram(distances, thresholds, fraction, patch_size)


# ---------------------------------------------------------------- patches


@dataclass
class PatchBatch:
    patches: np.ndarray  # N x F x s x s
    labels: np.ndarray  # N ints (0-based class index)
    coords: np.ndarray  # N x 2 (row, col)


def pad_features(features: np.ndarray, patch: int = 9) -> np.ndarray:
    """Mirror-pad an ``H x W x F`` array by ``patch // 2`` on both spatial axes."""
    if patch % 2 != 1:
        raise ValueError(f"patch size must be odd, got {patch}")
    r = patch // 2
    features = np.asarray(features, dtype=np.float64)
    h, w = features.shape[:2]
    mode = "reflect" if min(h, w) > 1 else "symmetric"
    return np.pad(features, ((r, r), (r, r), (0, 0)), mode=mode)


def extract_patches(features: np.ndarray, coords, patch: int = 9, labels: np.ndarray | None = None,
                    padded: np.ndarray | None = None) -> PatchBatch:
    """Cut ``patch x patch`` windows centred on ``coords`` from a mirror-padded ``H x W x F`` array.

    Returned labels are 0-based (ground-truth value minus one) when a label
    map is supplied.
    """
    features = np.asarray(features)
    h, w = features.shape[:2]
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if coords.size and (coords.min() < 0 or np.any(coords[:, 0] >= h) or np.any(coords[:, 1] >= w)):
        raise ValueError(f"coordinates outside the {h}x{w} image")
    if padded is None:
        padded = pad_features(features, patch)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (patch, patch), axis=(0, 1))
    # windows: H x W x F x s x s
    patches = windows[coords[:, 0], coords[:, 1]].astype(np.float64)
    out_labels = np.asarray(labels)[coords[:, 0], coords[:, 1]] - 1 if labels is not None else np.zeros(len(coords), np.int64)
    return PatchBatch(patches, out_labels.astype(np.int64), coords)


def dihedral(patch: np.ndarray, rotation: int, flip: bool) -> np.ndarray:
    """Optional vertical flip, then ``rotation`` quarter turns, over the last two axes."""
    out = np.flip(patch, axis=-2) if flip else patch
    return np.rot90(out, k=rotation, axes=(-2, -1))


def augment(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random element of the 8-element dihedral group (flip x quarter turns)."""
    if patch.shape[-1] != patch.shape[-2]:
        raise ValueError(f"augment needs square patches, got {patch.shape[-2:]}")
    flip = bool(rng.integers(2))
    rotation = int(rng.integers(4))
    return np.ascontiguousarray(dihedral(patch, rotation, flip))


def augment_batch(patches: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(p, rng) for p in patches]) if len(patches) else patches


# ---------------------------------------------------------------- synthetic data


def make_blob_cube(height: int = 64, width: int = 64, bands: int = 8, n_classes: int = 4,
                   regions_per_class: int = 4, class_separation: float = 1.0,
                   noise: float = 0.35, seed: int = 0) -> HyperCube:
    """Synthetic cube: Voronoi regions assigned to classes, Gaussian spectra per class.

    Every class owns ``regions_per_class`` spatially contiguous regions; each
    pixel's spectrum is its class mean plus isotropic Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    n_regions = n_classes * regions_per_class
    centres = rng.uniform([0, 0], [height, width], size=(n_regions, 2))
    rr, cc = np.mgrid[0:height, 0:width]
    d = (rr[..., None] - centres[:, 0]) ** 2 + (cc[..., None] - centres[:, 1]) ** 2
    region = np.argmin(d, axis=-1)
    region_class = rng.permutation(np.repeat(np.arange(n_classes), regions_per_class))
    labels = region_class[region] + 1
    means = rng.normal(0.0, class_separation, size=(n_classes, bands))
    data = means[labels - 1] + rng.normal(0.0, noise, size=(height, width, bands))
    return HyperCube(data.astype(np.float32), labels.astype(np.int64),
                     [f"class{k + 1}" for k in range(n_classes)])
