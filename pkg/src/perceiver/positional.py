"""Position encodings: Fourier features, crop-relative grids, learned tables
and per-modality channel padding."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError
from .tensor import Tensor

TRUNC_BOUND = 2.0


@dataclass
class FourierConfig:
    """Frequency bank for Fourier position features.

    ``max_resolution`` is either one value shared by every dimension or a
    sequence with one value per dimension. The top band sits at half of it.
    """

    num_bands: int = 64
    max_resolution: float | Sequence[float] = 224.0
    dims: int = 2
    concat_raw_position: bool = True
    spacing: str = "linear"

    def __post_init__(self):
        if self.num_bands < 1:
            raise ConfigError(f"num_bands must be >= 1, got {self.num_bands}")
        if self.dims < 1:
            raise ConfigError(f"dims must be >= 1, got {self.dims}")
        if self.spacing not in ("linear", "log"):
            raise ConfigError(f"spacing must be 'linear' or 'log', got {self.spacing!r}")
        for mu in self.resolutions():
            if mu < 2:
                raise ConfigError(f"max_resolution must be >= 2, got {mu}")

    def resolutions(self) -> list[float]:
        mu = self.max_resolution
        if np.isscalar(mu):
            return [float(mu)] * self.dims
        mu = [float(m) for m in mu]
        if len(mu) != self.dims:
            raise ConfigError(f"{len(mu)} max resolutions for {self.dims} dims")
        return mu

    @property
    def channels(self) -> int:
        per_dim = 2 * self.num_bands + (1 if self.concat_raw_position else 0)
        return self.dims * per_dim


def frequency_bands(num_bands: int, max_resolution: float, spacing: str = "linear") -> np.ndarray:
    """Bands from 1 to max_resolution/2 inclusive; a single band is 1."""
    if num_bands < 1:
        raise ConfigError("num_bands must be >= 1")
    top = max_resolution / 2.0
    if num_bands == 1:
        return np.ones(1)
    if spacing == "log":
        bands = np.geomspace(1.0, top, num_bands)
    else:
        bands = 1.0 + np.arange(num_bands) * ((top - 1.0) / (num_bands - 1))
    bands[0], bands[-1] = 1.0, top
    return bands


def nerf_bands(num_bands: int, dtype=np.float32) -> np.ndarray:
    """Powers-of-two bank (2**k for k = 0..K-1), kept for comparison only."""
    with np.errstate(over="ignore"):
        return np.power(dtype(2.0), np.arange(num_bands, dtype=dtype))


def fourier_features(positions: np.ndarray, cfg: FourierConfig) -> np.ndarray:
    """Encode ``(M, d)`` coordinates in [-1, 1] as ``(M, d(2K+1))`` features.

    Layout: all sines (dimension-major, band-minor), then all cosines in the
    same order, then the raw coordinates.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 1:
        pos = pos[:, None]
    if pos.ndim != 2 or pos.shape[1] != cfg.dims:
        raise DimensionError(f"positions {pos.shape} vs dims={cfg.dims}")
    if pos.size and (pos.min() < -1.0 or pos.max() > 1.0):
        raise DomainError("coordinates must lie in [-1, 1]")
    bands = np.stack([frequency_bands(cfg.num_bands, mu, cfg.spacing) for mu in cfg.resolutions()])
    phase = np.pi * pos[:, :, None] * bands[None]
    m = pos.shape[0]
    parts = [np.sin(phase).reshape(m, -1), np.cos(phase).reshape(m, -1)]
    if cfg.concat_raw_position:
        parts.append(pos)
    return np.concatenate(parts, axis=1)


def grid_positions(shape: Sequence[int]) -> np.ndarray:
    """Row-major ``(prod(shape), len(shape))`` grid, each axis spanning [-1, 1].

    An axis of length 1 sits at 0.
    """
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=1)


def crop_coordinates(source_extent: tuple[int, int], crop_rect: tuple[int, int, int, int],
                     relative_to: str = "crop") -> np.ndarray:
    """Positions for the pixels of ``crop_rect = (top, left, height, width)``.

    Coordinates are (row, column). With ``relative_to="crop"`` (the default)
    the crop corners always land on -1 and +1, so the result does not depend
    on where the crop sits. ``relative_to="image"`` places the crop inside the
    full image's [-1, 1] frame instead.
    """
    h_src, w_src = source_extent
    top, left, h, w = crop_rect
    if h <= 0 or w <= 0:
        raise DomainError("empty crop")
    if top < 0 or left < 0 or top + h > h_src or left + w > w_src:
        raise DomainError(f"crop {crop_rect} outside source extent {source_extent}")
    if relative_to == "crop":
        return grid_positions((h, w))
    if relative_to != "image":
        raise ConfigError(f"relative_to must be 'crop' or 'image', got {relative_to!r}")
    full = grid_positions((h_src, w_src)).reshape(h_src, w_src, 2)
    return full[top:top + h, left:left + w].reshape(-1, 2)


def truncated_normal(shape, std: float, rng: np.random.Generator,
                     bound: float = TRUNC_BOUND, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples, redrawn until they fall inside [-bound, bound]."""
    if std <= 0:
        raise ConfigError(f"initialization scale must be positive, got {std}")
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(dtype)


@dataclass
class LearnedEncoding:
    table: Tensor
    init_scale: float

    @property
    def channels(self) -> int:
        return self.table.shape[1]


def learned_encoding_init(num_positions: int, channels: int, init_scale: float = 1.0,
                          rng: np.random.Generator | None = None, dtype=np.float32) -> LearnedEncoding:
    if num_positions < 1 or channels < 1:
        raise ConfigError("learned encoding needs at least one position and one channel")
    rng = rng if rng is not None else np.random.default_rng(0)
    table = truncated_normal((num_positions, channels), init_scale, rng, dtype=dtype)
    return LearnedEncoding(Tensor(table, requires_grad=True, name="position_table"), init_scale)


def modality_layout(channels: Sequence[int], min_embeds: Sequence[int]) -> tuple[int, list[int]]:
    """Common width and per-modality embedding sizes.

    The width is ``max(C_i + min_embed_i)``; each modality's embedding fills
    the gap up to it.
    """
    if len(channels) != len(min_embeds) or not channels:
        raise ConfigError("need one minimum embedding size per modality")
    if any(e < 0 for e in min_embeds) or any(c < 1 for c in channels):
        raise ConfigError("channel counts must be positive and embeddings non-negative")
    width = max(c + e for c, e in zip(channels, min_embeds))
    return width, [width - c for c in channels]


def modality_pad(arrays: Sequence, embeddings: Sequence) -> Tensor:
    """Tag each modality with its embedding and stack along the index axis.

    ``arrays[i]`` has shape ``(..., M_i, C_i)`` and ``embeddings[i]`` shape
    ``(E_i,)``; every ``C_i + E_i`` must agree. Works on tensors so the
    embeddings can be trained.
    """
    if len(arrays) != len(embeddings) or not arrays:
        raise ConfigError("need one embedding per modality")
    arrays = [T.as_tensor(a) for a in arrays]
    embeddings = [T.as_tensor(e, dtype=arrays[0].dtype) for e in embeddings]
    widths = {a.shape[-1] + e.shape[0] for a, e in zip(arrays, embeddings)}
    if len(widths) != 1:
        raise ConfigError(f"modalities reach different widths {sorted(widths)}")
    lead = arrays[0].shape[:-2]
    rows = []
    for a, e in zip(arrays, embeddings):
        if a.shape[:-2] != lead:
            raise DimensionError("modalities disagree on batch axes")
        if e.shape[0] == 0:
            rows.append(a)
            continue
        tag = T.broadcast_leading(e, a.shape[:-1])
        rows.append(T.concat([a, tag], axis=-1))
    return rows[0] if len(rows) == 1 else T.concat(rows, axis=-2)


def concat_position(features: np.ndarray, encodings: np.ndarray) -> np.ndarray:
    """Feature channels first, then position channels."""
    features = np.asarray(features)
    encodings = np.asarray(encodings)
    if features.shape[0] != encodings.shape[0]:
        raise DimensionError(f"{features.shape[0]} feature rows vs {encodings.shape[0]} position rows")
    if encodings.ndim == 1 or encodings.shape[1] == 0:
        return features.copy()
    return np.concatenate([features, encodings.astype(features.dtype)], axis=1)


def export_csv(array: np.ndarray, path: str | Path, header_prefix: str = "ch") -> None:
    """One row per position, one column per channel."""
    array = np.atleast_2d(np.asarray(array))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"{header_prefix}{i}" for i in range(array.shape[1])])
        for row in array:
            writer.writerow([repr(float(v)) for v in row])
