"""QKV attention and the two blocks the model is built from.

Both blocks are pre-layer-norm and fully residual: attention output is
projected back to the latent width and added to the latent, then a dense
block (layer norm, linear, GELU, linear) is added on top. No masks and no
dropout anywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, StateError
from .positional import truncated_normal
from .tensor import Tensor


class Module:
    """Minimal parameter container.

    Parameters are found by walking attributes in definition order.
    A table reachable under several names (aliasing) is reported once,
    under the first name encountered.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix, seen):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            yield from _walk_value(name, value, seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk_value(name, value, seen):
    if isinstance(value, Tensor):
        if value.requires_grad and id(value) not in seen:
            seen.add(id(value))
            yield name, value
    elif isinstance(value, Module):
        yield from value._walk(name + ".", seen)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_value(f"{name}.{i}", item, seen)


def _param(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    """``y = x @ w + b``. Weights default to truncated normal with std 1/sqrt(fan_in)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, std: float | None = None,
                 dtype=np.float32):
        std = 1.0 / math.sqrt(cin) if std is None else std
        self.w = _param(truncated_normal((cin, cout), std, rng, dtype=dtype))
        self.b = _param(np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)

    @property
    def shape(self):
        return self.w.shape


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = T.DEFAULT_EPS, dtype=np.float32):
        self.gain = _param(np.ones(channels, dtype=dtype))
        self.bias = _param(np.zeros(channels, dtype=dtype))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


class DenseBlock(Module):
    """Residual MLP: ``x + fc2(gelu(fc1(ln(x))))``."""

    def __init__(self, channels: int, widening: float, rng, eps=T.DEFAULT_EPS, dtype=np.float32):
        hidden = max(1, int(round(channels * widening)))
        self.ln = LayerNorm(channels, eps, dtype)
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, self.fc2(T.gelu(self.fc1(self.ln(x)))))


@dataclass
class AttentionBlockConfig:
    num_heads: int
    qk_channels: int
    v_channels: int
    output_channels: int
    dense_widening: float = 1.0

    def __post_init__(self):
        if self.num_heads < 1:
            raise ConfigError("num_heads must be >= 1")
        for field_name in ("qk_channels", "v_channels", "output_channels"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"{field_name} must be >= 1")
        if self.qk_channels % self.num_heads or self.v_channels % self.num_heads:
            raise ConfigError(
                f"qk ({self.qk_channels}) and v ({self.v_channels}) channels must be divisible "
                f"by num_heads ({self.num_heads})")
        if self.dense_widening <= 0:
            raise ConfigError("dense_widening must be positive")

    @classmethod
    def cross(cls, query_channels: int, kv_channels: int, num_heads: int = 1,
              dense_widening: float = 1.0, qk_channels: int | None = None,
              v_channels: int | None = None) -> "AttentionBlockConfig":
        """Queries, keys and values take the smaller of the two input widths."""
        width = min(query_channels, kv_channels)
        qk = qk_channels or width
        return cls(num_heads, qk, v_channels or qk, query_channels, dense_widening)

    @classmethod
    def latent(cls, channels: int, num_heads: int = 8, dense_widening: float = 1.0):
        return cls(num_heads, channels, channels, channels, dense_widening)


@dataclass
class AttentionMaps:
    """Pre-softmax QK^T scores, shape ``(heads, N, M)``."""

    scores: np.ndarray

    @property
    def heads(self) -> int:
        return self.scores.shape[0]

    def grid(self, height: int, width: int) -> np.ndarray:
        h, n, m = self.scores.shape
        if height * width != m:
            raise DimensionError(f"cannot view {m} inputs as {height}x{width}")
        return self.scores.reshape(h, n, height, width)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, c = x.shape
    x = T.reshape(x, (*lead, n, heads, c // heads))
    k = len(lead)
    return T.transpose(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    k = len(lead)
    x = T.transpose(x, (*range(k), k + 1, k, k + 2))
    return T.reshape(x, (*lead, n, h * d))


def qkv_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int = 1,
                  capture: bool = False) -> tuple[Tensor, np.ndarray | None]:
    """``softmax(Q K^T / sqrt(d_head)) V`` per head, heads concatenated.

    Shapes ``(..., N, Dq)``, ``(..., M, Dq)``, ``(..., M, Dv)``. Returns the
    output and, when ``capture`` is set, the raw QK^T scores.
    """
    if num_heads < 1:
        raise ConfigError("num_heads must be >= 1")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"keys {k.shape} and values {v.shape} disagree")
    if q.shape[-1] % num_heads or v.shape[-1] % num_heads:
        raise ConfigError(f"widths {q.shape[-1]}, {v.shape[-1]} not divisible by {num_heads} heads")
    dh = q.shape[-1] // num_heads
    qh, kh, vh = (_split_heads(t, num_heads) for t in (q, k, v))
    nd = kh.ndim
    scores = T.matmul(qh, T.transpose(kh, (*range(nd - 2), nd - 1, nd - 2)))
    captured = scores.data.copy() if capture else None
    weights = T.softmax_last_axis(T.scale(scores, 1.0 / math.sqrt(dh)))
    return _merge_heads(T.matmul(weights, vh)), captured


class _AttentionBase(Module):
    def __init__(self):
        self._capture = False
        self._maps: np.ndarray | None = None

    def enable_capture(self, flag: bool = True) -> None:
        self._capture = flag
        if not flag:
            self._maps = None


class CrossAttention(_AttentionBase):
    """Latent queries attend to the byte array."""

    def __init__(self, cfg: AttentionBlockConfig, kv_channels: int, rng: np.random.Generator,
                 eps: float = T.DEFAULT_EPS, dtype=np.float32):
        super().__init__()
        d = cfg.output_channels
        self.cfg = cfg
        self.ln_q = LayerNorm(d, eps, dtype)
        self.ln_kv = LayerNorm(kv_channels, eps, dtype)
        self.q = Linear(d, cfg.qk_channels, rng, dtype=dtype)
        self.k = Linear(kv_channels, cfg.qk_channels, rng, dtype=dtype)
        self.v = Linear(kv_channels, cfg.v_channels, rng, dtype=dtype)
        self.out = Linear(cfg.v_channels, d, rng, dtype=dtype)
        self.dense = DenseBlock(d, cfg.dense_widening, rng, eps, dtype)

    def __call__(self, latent: Tensor, inputs: Tensor) -> Tensor:
        x = self.ln_kv(inputs)
        attended, maps = qkv_attention(self.q(self.ln_q(latent)), self.k(x), self.v(x),
                                       self.cfg.num_heads, capture=self._capture)
        if self._capture:
            self._maps = maps
        latent = T.add(latent, self.out(attended))
        return self.dense(latent)


class SelfAttention(_AttentionBase):
    """Non-causal multi-head self-attention over the latent, GPT-2 style."""

    def __init__(self, cfg: AttentionBlockConfig, rng: np.random.Generator,
                 eps: float = T.DEFAULT_EPS, dtype=np.float32):
        super().__init__()
        d = cfg.output_channels
        self.cfg = cfg
        self.ln = LayerNorm(d, eps, dtype)
        self.q = Linear(d, cfg.qk_channels, rng, dtype=dtype)
        self.k = Linear(d, cfg.qk_channels, rng, dtype=dtype)
        self.v = Linear(d, cfg.v_channels, rng, dtype=dtype)
        self.out = Linear(cfg.v_channels, d, rng, dtype=dtype)
        self.dense = DenseBlock(d, cfg.dense_widening, rng, eps, dtype)

    def __call__(self, latent: Tensor) -> Tensor:
        x = self.ln(latent)
        attended, maps = qkv_attention(self.q(x), self.k(x), self.v(x), self.cfg.num_heads,
                                       capture=self._capture)
        if self._capture:
            self._maps = maps
        latent = T.add(latent, self.out(attended))
        return self.dense(latent)


def cross_attention_block(latent: Tensor, inputs: Tensor, block: CrossAttention) -> tuple[Tensor, AttentionMaps]:
    """Run ``block`` once with capture on and return the new latent and its maps."""
    prev = block._capture
    block.enable_capture(True)
    try:
        out = block(latent, inputs)
        return out, extract_attention_maps(block)
    finally:
        block._capture = prev


def self_attention_block(latent: Tensor, block: SelfAttention) -> Tensor:
    return block(latent)


def extract_attention_maps(block: _AttentionBase, batch_index: int = 0) -> AttentionMaps:
    """Scores from the block's most recent call. Requires capture to be on."""
    if not block._capture or block._maps is None:
        raise StateError("attention capture was not enabled for this block")
    maps = block._maps
    if maps.ndim == 4:
        maps = maps[batch_index]
    return AttentionMaps(maps.copy())


def zero_output_projections(module: Module) -> None:
    """Zero every ``out`` and ``dense.fc2`` projection, turning blocks into identities."""
    for name, p in module.named_parameters():
        parts = name.split(".")
        if len(parts) >= 2 and (parts[-2] == "out" or parts[-2] == "fc2"):
            p.data[...] = 0


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PGM, minimum mapped to 0 and maximum to 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"PGM needs a 2-D array, got {img.shape}")
    lo, hi = img.min(), img.max()
    if hi > lo:
        pixels = np.round((img - lo) * (255.0 / (hi - lo)))
    else:
        pixels = np.zeros_like(img)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.astype(np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
