"""Turn modality data into byte arrays and build the desk-scale datasets.

A byte array is an ``(M, C)`` float array: content channels first, then
position channels. ``position_meta`` records what grid or cloud the
position channels came from; they never depend on content.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DomainError
from .positional import (FourierConfig, concat_position, crop_coordinates, fourier_features,
                         grid_positions, modality_layout, modality_pad)

MANIFEST = "manifest.json"
DATASET_KINDS = ("sign-of-mean", "procedural-shapes-8x8", "two-class-clouds", "two-modality-parity")
SHAPE_CLASSES = ("horizontal", "vertical", "square", "diagonal")


@dataclass
class ByteArray:
    data: np.ndarray
    modality_spans: list = field(default_factory=list)
    position_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DimensionError(f"byte array must be (M, C), got {self.data.shape}")
        if not self.modality_spans:
            self.modality_spans = [("input", 0, self.data.shape[0])]
        cursor = 0
        for _, start, stop in self.modality_spans:
            if start != cursor or stop < start:
                raise DimensionError(f"modality spans do not partition the rows: {self.modality_spans}")
            cursor = stop
        if cursor != self.data.shape[0]:
            raise DimensionError(f"modality spans cover {cursor} of {self.data.shape[0]} rows")

    @property
    def M(self) -> int:
        return self.data.shape[0]

    @property
    def C(self) -> int:
        return self.data.shape[1]

    def span(self, name: str) -> np.ndarray:
        for label, start, stop in self.modality_spans:
            if label == name:
                return self.data[start:stop]
        raise KeyError(name)

    def to_csv(self, path) -> None:
        from .positional import export_csv
        export_csv(self.data, path)


def _rgb_to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 in [0, 255] or float in [0, 1] mapped to [-1, 1]."""
    if np.issubdtype(pixels.dtype, np.integer):
        return pixels.astype(np.float32) / 127.5 - 1.0
    return pixels.astype(np.float32) * 2.0 - 1.0


def image_to_bytes(image: np.ndarray, cfg: FourierConfig, crop: tuple[int, int, int, int] | None = None,
                   relative_to: str = "crop") -> ByteArray:
    """One row per crop pixel: RGB in [-1, 1] then 2-D Fourier features."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise DimensionError(f"image must be H x W x channels, got {image.shape}")
    if cfg.dims != 2:
        raise ConfigError("images need a 2-D Fourier config")
    h_src, w_src = image.shape[:2]
    crop = crop if crop is not None else (0, 0, h_src, w_src)
    positions = crop_coordinates((h_src, w_src), crop, relative_to)
    top, left, h, w = crop
    pixels = _rgb_to_unit(image[top:top + h, left:left + w]).reshape(h * w, -1)
    data = concat_position(pixels, fourier_features(positions, cfg).astype(np.float32))
    meta = {"kind": "grid", "shape": [h, w], "crop": list(crop), "relative_to": relative_to,
            "content_channels": pixels.shape[1]}
    return ByteArray(data, position_meta=meta)


@dataclass
class PermutationSpec:
    """One row order shared by every example of a dataset."""

    seed: int
    permutation: np.ndarray

    @classmethod
    def from_seed(cls, length: int, seed: int) -> "PermutationSpec":
        return cls(seed, np.random.default_rng(seed).permutation(length))

    def inverse(self) -> "PermutationSpec":
        return PermutationSpec(self.seed, np.argsort(self.permutation))


def permute_bytes(b, spec: PermutationSpec):
    """Reorder rows; position channels travel with their rows.

    Accepts a :class:`ByteArray` or a raw ``(..., M, C)`` array.
    """
    perm = spec.permutation
    data = b.data if isinstance(b, ByteArray) else np.asarray(b)
    if len(perm) != data.shape[-2] or not np.array_equal(np.sort(perm), np.arange(len(perm))):
        raise DimensionError(f"permutation of length {len(perm)} does not fit {data.shape[-2]} rows")
    out = np.take(data, perm, axis=-2)
    if isinstance(b, ByteArray):
        meta = dict(b.position_meta, permutation_seed=spec.seed)
        return ByteArray(out, [("input", 0, len(perm))], meta)
    return out


def video_to_patches(video: np.ndarray, patch: tuple[int, int, int], cfg: FourierConfig) -> ByteArray:
    """Space-time patches: each row is a flattened ``t x h x w x 3`` patch in
    [-1, 1] plus 3-D Fourier features of the patch centre."""
    video = np.asarray(video)
    if video.ndim != 4:
        raise DimensionError(f"video must be T x H x W x channels, got {video.shape}")
    if cfg.dims != 3:
        raise ConfigError("video needs a 3-D Fourier config")
    tt, hh, ww, ch = video.shape
    pt, ph, pw = patch
    if min(pt, ph, pw) < 1 or tt % pt or hh % ph or ww % pw:
        raise DomainError(f"patch {patch} does not divide video {video.shape[:3]}")
    nt, nh, nw = tt // pt, hh // ph, ww // pw
    blocks = _rgb_to_unit(video).reshape(nt, pt, nh, ph, nw, pw, ch)
    rows = blocks.transpose(0, 2, 4, 1, 3, 5, 6).reshape(nt * nh * nw, pt * ph * pw * ch)
    positions = grid_positions((nt, nh, nw))
    data = concat_position(rows, fourier_features(positions, cfg).astype(np.float32))
    meta = {"kind": "grid", "shape": [nt, nh, nw], "patch": list(patch), "content_channels": rows.shape[1]}
    return ByteArray(data, position_meta=meta)


def audio_to_segments(waveform: np.ndarray, segment: int, cfg: FourierConfig | None = None,
                      pad: bool = False) -> ByteArray:
    """Cut a 1-D signal into ``segment``-sample rows with 1-D Fourier features
    of each segment's centre time.

    A trailing partial segment is an error unless ``pad`` is set, in which
    case it is zero-filled and the pad length recorded in ``position_meta``.
    """
    if segment <= 0:
        raise ConfigError(f"segment length must be positive, got {segment}")
    wave = np.asarray(waveform, dtype=np.float32).reshape(-1)
    remainder = wave.size % segment
    padded = 0
    if remainder:
        if not pad:
            raise DomainError(f"{wave.size} samples do not split into segments of {segment}")
        padded = segment - remainder
        wave = np.concatenate([wave, np.zeros(padded, dtype=np.float32)])
    rows = wave.reshape(-1, segment)
    positions = grid_positions((rows.shape[0],))
    enc = fourier_features(positions, cfg).astype(np.float32) if cfg is not None else np.zeros((rows.shape[0], 0))
    meta = {"kind": "grid", "shape": [rows.shape[0]], "segment": segment, "padded": padded,
            "content_channels": segment}
    return ByteArray(concat_position(rows, enc), position_meta=meta)


def spectrogram_to_bytes(spectrogram: np.ndarray, cfg: FourierConfig) -> ByteArray:
    """Precomputed ``F x T`` spectrogram: one row per bin with 2-D features."""
    spec = np.asarray(spectrogram, dtype=np.float32)
    if spec.ndim != 2:
        raise DimensionError(f"spectrogram must be F x T, got {spec.shape}")
    positions = grid_positions(spec.shape)
    data = concat_position(spec.reshape(-1, 1), fourier_features(positions, cfg).astype(np.float32))
    return ByteArray(data, position_meta={"kind": "grid", "shape": list(spec.shape), "content_channels": 1})


def normalize_cloud(points: np.ndarray, augment: bool = False,
                    rng: np.random.Generator | None = None, scale_range=(0.99, 1.01)) -> np.ndarray:
    """Zero-centre, optionally rescale each point by a random factor, then
    re-centre and scale so the largest absolute coordinate is 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise DimensionError(f"point cloud must be P x 3 with P >= 1, got {pts.shape}")
    pts = pts - pts.mean(axis=0)
    if augment:
        rng = rng if rng is not None else np.random.default_rng()
        pts = pts * rng.uniform(*scale_range, size=(pts.shape[0], 1))
        pts = pts - pts.mean(axis=0)
    extent = np.abs(pts).max()
    if extent == 0:
        raise DomainError("degenerate point cloud: all points coincide")
    return np.clip(pts / extent, -1.0, 1.0)


def pointcloud_to_bytes(points: np.ndarray, cfg: FourierConfig | None = None, augment: bool = False,
                        rng: np.random.Generator | None = None) -> ByteArray:
    """Rows are 3-D Fourier features of the normalized points; there are no
    content channels."""
    cfg = cfg if cfg is not None else FourierConfig(num_bands=64, max_resolution=1120.0, dims=3)
    if cfg.dims != 3:
        raise ConfigError("point clouds need a 3-D Fourier config")
    coords = normalize_cloud(points, augment, rng)
    data = fourier_features(coords, cfg).astype(np.float32)
    return ByteArray(data, position_meta={"kind": "cloud", "points": coords.shape[0], "content_channels": 0})


def fuse_modalities(arrays: Sequence[ByteArray], names: Sequence[str] | None = None,
                    min_embeds: Sequence[int] | None = None,
                    embeddings: Sequence[np.ndarray] | None = None) -> ByteArray:
    """Pad every modality to one width with its embedding and stack the rows.

    Embeddings default to zeros (plain channel padding). The model-side
    counterpart with trainable embeddings lives in :class:`perceiver.model.Perceiver`.
    """
    if not arrays:
        raise ConfigError("nothing to fuse")
    names = list(names) if names is not None else [f"m{i}" for i in range(len(arrays))]
    min_embeds = list(min_embeds) if min_embeds is not None else [0] * len(arrays)
    width, sizes = modality_layout([a.C for a in arrays], min_embeds)
    if embeddings is None:
        embeddings = [np.zeros(e, dtype=np.float32) for e in sizes]
    for e, size in zip(embeddings, sizes):
        if np.shape(e) != (size,):
            raise ConfigError(f"embedding of shape {np.shape(e)} where {size} channels are needed")
    fused = modality_pad([a.data for a in arrays], embeddings).data
    spans, cursor = [], 0
    for name, a in zip(names, arrays):
        spans.append((name, cursor, cursor + a.M))
        cursor += a.M
    meta = {"kind": "fused", "width": width,
            "modalities": [{"name": n, "channels": a.C, "embed": e, "position_meta": a.position_meta}
                           for n, a, e in zip(names, arrays, sizes)]}
    return ByteArray(fused, spans, meta)


@dataclass
class Dataset:
    kind: str
    x_train: object
    y_train: np.ndarray
    x_test: object
    y_test: np.ndarray
    meta: dict = field(default_factory=dict)
    modalities: list | None = None

    @property
    def input_channels(self) -> int:
        if self.modalities:
            return [a.shape[-1] for a in self.x_train]
        return self.x_train.shape[-1]

    @property
    def index_dim(self) -> int:
        if self.modalities:
            return sum(a.shape[-2] for a in self.x_train)
        return self.x_train.shape[-2]


def _split(x, y, n_train):
    if isinstance(x, list):
        return [a[:n_train] for a in x], y[:n_train], [a[n_train:] for a in x], y[n_train:]
    return x[:n_train], y[:n_train], x[n_train:], y[n_train:]


def _item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _sign_of_mean(n, seed, rows=32, bands=4, max_resolution=None, margin=(0.25, 1.0)):
    cfg = FourierConfig(bands, float(max_resolution or rows), 1)
    enc = fourier_features(grid_positions((rows,)), cfg).astype(np.float32)
    x = np.empty((n, rows, 1 + enc.shape[1]), dtype=np.float32)
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = _item_rng(seed, i)
        label = int(rng.integers(2))
        noise = rng.normal(size=rows)
        values = noise - noise.mean() + (2 * label - 1) * rng.uniform(*margin)
        x[i, :, 0] = values
        x[i, :, 1:] = enc
        y[i] = label
    return x, y, {"rows": rows, "bands": bands}


def render_shape(label: int, rng: np.random.Generator, size: int = 8, noise: float = 0.1) -> np.ndarray:
    """Draw one of the four shape classes at a random place on a size x size grid."""
    img = np.zeros((size, size))
    if label == 0 or label == 1:
        length = int(rng.integers(3, 7))
        r, c = int(rng.integers(size)), int(rng.integers(size - length + 1))
        if label == 0:
            img[r, c:c + length] = 1.0
        else:
            img[c:c + length, r] = 1.0
    elif label == 2:
        side = int(rng.integers(2, 4))
        r, c = int(rng.integers(size - side + 1)), int(rng.integers(size - side + 1))
        img[r:r + side, c:c + side] = 1.0
    elif label == 3:
        length = int(rng.integers(3, 7))
        r, c = int(rng.integers(size - length + 1)), int(rng.integers(size - length + 1))
        idx = np.arange(length)
        if rng.random() < 0.5:
            img[r + idx, c + idx] = 1.0
        else:
            img[r + idx, c + length - 1 - idx] = 1.0
    else:
        raise ValueError(f"unknown shape class {label}")
    return np.clip(img + rng.normal(0, noise, img.shape), 0.0, 1.0)


def _shapes(n, seed, bands=4, size=8, max_resolution=None):
    cfg = FourierConfig(num_bands=bands, max_resolution=float(max_resolution or size), dims=2)
    first = None
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = _item_rng(seed, i)
        label = int(rng.integers(len(SHAPE_CLASSES)))
        img = render_shape(label, rng, size)
        b = image_to_bytes(np.repeat(img[:, :, None], 3, axis=2), cfg)
        if first is None:
            first = np.empty((n, b.M, b.C), dtype=np.float32)
        first[i] = b.data
        y[i] = label
    return first, y, {"grid": [size, size], "bands": bands, "classes": list(SHAPE_CLASSES)}


def _clouds(n, seed, points=64, bands=8, max_resolution=1120.0):
    cfg = FourierConfig(num_bands=bands, max_resolution=max_resolution, dims=3)
    x = np.empty((n, points, cfg.channels), dtype=np.float32)
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = _item_rng(seed, i)
        label = int(rng.integers(2))
        if label == 0:
            pts = rng.normal(size=(points, 3))
            pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        else:
            pts = rng.uniform(-1, 1, size=(points, 3))
            face = rng.integers(3, size=points)
            pts[np.arange(points), face] = rng.choice([-1.0, 1.0], size=points)
        pts = pts * rng.uniform(0.5, 2.0) + rng.normal(size=3)
        x[i] = pointcloud_to_bytes(pts, cfg).data
        y[i] = label
    return x, y, {"points": points, "bands": bands, "max_resolution": max_resolution}


def _parity(n, seed, video_rows=16, video_channels=8, audio_rows=8, audio_channels=4, noise=0.5):
    video = np.empty((n, video_rows, video_channels), dtype=np.float32)
    audio = np.empty((n, audio_rows, audio_channels), dtype=np.float32)
    y = np.empty(n, dtype=np.int64)
    # zero-mean patterns, so per-row layer norm keeps the sign
    pv = np.resize([1.0, -1.0], video_channels)
    pa = np.resize([1.0, -1.0], audio_channels)
    for i in range(n):
        rng = _item_rng(seed, i)
        bv, ba = rng.integers(2, size=2)
        video[i] = (2 * bv - 1) * pv + rng.normal(0, noise, (video_rows, video_channels))
        audio[i] = (2 * ba - 1) * pa + rng.normal(0, noise, (audio_rows, audio_channels))
        y[i] = int(bv ^ ba)
    return [video, audio], y, {"modalities": ["video", "audio"], "noise": noise}


def synthetic_datasets(kind: str, size: int, seed: int = 0, test_fraction: float = 0.2, **options) -> Dataset:
    """Deterministic desk-scale datasets whose labels are solvable by construction.

    ``size`` counts train plus test examples; item ``i`` is drawn from a
    generator seeded with ``(seed, i)``.
    """
    builders = {"sign-of-mean": _sign_of_mean, "procedural-shapes-8x8": _shapes,
                "two-class-clouds": _clouds, "two-modality-parity": _parity}
    if kind not in builders:
        raise ConfigError(f"unknown dataset kind {kind!r}; choose from {DATASET_KINDS}")
    if size < 2:
        raise ConfigError("dataset size must be >= 2")
    x, y, meta = builders[kind](size, seed, **options)
    n_train = size - max(1, int(round(size * test_fraction)))
    xtr, ytr, xte, yte = _split(x, y, n_train)
    meta = dict(meta, kind=kind, seed=seed, size=size, test_fraction=test_fraction, options=options)
    modalities = meta.get("modalities")
    return Dataset(kind, xtr, ytr, xte, yte, meta, modalities)


def permute_dataset(ds: Dataset, seed: int) -> tuple[Dataset, PermutationSpec]:
    """Apply one shared row permutation to every train and test example."""
    if ds.modalities:
        raise ConfigError("row permutation of multimodal datasets is not supported")
    spec = PermutationSpec.from_seed(ds.x_train.shape[-2], seed)
    out = Dataset(ds.kind, permute_bytes(ds.x_train, spec), ds.y_train.copy(),
                  permute_bytes(ds.x_test, spec), ds.y_test.copy(),
                  dict(ds.meta, permutation_seed=seed), None)
    return out, spec


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    """Write ``.npy`` tensors plus a JSON manifest describing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for split in ("train", "test"):
        x = getattr(ds, f"x_{split}")
        xs = x if ds.modalities else [x]
        for k, a in enumerate(xs):
            arrays[f"x_{split}_{k}"] = a
        arrays[f"y_{split}"] = getattr(ds, f"y_{split}")
    entries = {}
    for name, a in arrays.items():
        np.save(directory / f"{name}.npy", a, allow_pickle=False)
        entries[name] = {"file": f"{name}.npy", "shape": list(a.shape), "dtype": a.dtype.name}
    manifest = {"format": "perceiver-dataset", "version": 1, "kind": ds.kind,
                "seed": ds.meta.get("seed"), "modalities": ds.modalities,
                "meta": ds.meta, "arrays": entries}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, default=str), encoding="utf-8")
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    arrays = {}
    for name, entry in manifest["arrays"].items():
        a = np.load(directory / entry["file"], allow_pickle=False)
        if list(a.shape) != entry["shape"] or a.dtype.name != entry["dtype"]:
            raise DimensionError(f"{name}: stored {a.shape}/{a.dtype} disagrees with manifest")
        arrays[name] = a
    modalities = manifest.get("modalities")

    def gather(split):
        keys = sorted((k for k in arrays if k.startswith(f"x_{split}_")), key=lambda k: int(k.rsplit("_", 1)[1]))
        xs = [arrays[k] for k in keys]
        return xs if modalities else xs[0]

    return Dataset(manifest["kind"], gather("train"), arrays["y_train"], gather("test"), arrays["y_test"],
                   manifest.get("meta", {}), modalities)
