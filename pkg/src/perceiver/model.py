"""The full model: learned latent, repeated cross-attends and latent
towers, average-then-project classifier.

Weight sharing is done by aliasing. A shared block is one Python object
listed at several positions, so its tables get one gradient accumulator
that sums the contribution of every use.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import (AttentionBlockConfig, AttentionMaps, CrossAttention, Linear, Module,
                        SelfAttention, extract_attention_maps)
from .errors import ConfigError, DimensionError, StateError
from .positional import modality_layout, modality_pad, truncated_normal
from .tensor import Tensor

ARRANGEMENTS = ("interleaved", "at_start")
TOWER_SHARING = ("all", "after_first")
LOSSES = ("softmax", "sigmoid")
CHECKPOINT_FORMAT = "perceiver-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class PerceiverConfig:
    input_channels: int = 261
    num_cross_attends: int = 8
    self_attends_per_block: int = 6
    blocks_per_cross: int = 1
    latent_index: int = 512
    latent_channels: int = 1024
    share_cross_after_first: bool = True
    share_latent_towers: bool = True
    tower_sharing: str = "all"
    arrangement: str = "interleaved"
    num_classes: int = 1000
    cross_heads: int = 1
    latent_heads: int = 8
    dense_widening: float = 1.0
    cross_qk_channels: int = 0
    latent_init_scale: float = 0.02
    classifier_init_scale: float = 0.02
    layer_norm_eps: float = 1e-5
    learned_pos_index: int = 0
    learned_pos_channels: int = 0
    learned_pos_init_scale: float = 1.0
    modality_channels: tuple = ()
    modality_min_embeds: tuple = ()
    loss: str = "softmax"
    dtype: str = "float32"

    def __post_init__(self):
        self.modality_channels = tuple(int(c) for c in self.modality_channels)
        self.modality_min_embeds = tuple(int(c) for c in self.modality_min_embeds)
        self.validate()

    def validate(self) -> None:
        positive = ("input_channels", "num_cross_attends", "latent_index", "latent_channels",
                    "num_classes", "cross_heads", "latent_heads")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("self_attends_per_block", "blocks_per_cross", "cross_qk_channels",
                     "learned_pos_index", "learned_pos_channels"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.arrangement not in ARRANGEMENTS:
            raise ConfigError(f"arrangement must be one of {ARRANGEMENTS}, got {self.arrangement!r}")
        if self.tower_sharing not in TOWER_SHARING:
            raise ConfigError(f"tower_sharing must be one of {TOWER_SHARING}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.latent_init_scale <= 0 or self.classifier_init_scale <= 0:
            raise ConfigError("initialization scales must be positive")
        if self.dense_widening <= 0:
            raise ConfigError("dense_widening must be positive")
        if bool(self.learned_pos_index) != bool(self.learned_pos_channels):
            raise ConfigError("learned_pos_index and learned_pos_channels must be set together")
        if self.modality_channels:
            if len(self.modality_channels) != len(self.modality_min_embeds):
                raise ConfigError("modality_min_embeds needs one entry per modality")
            width, _ = modality_layout(self.modality_channels, self.modality_min_embeds)
            if width != self.input_channels:
                raise ConfigError(
                    f"modalities pad to {width} channels but input_channels is {self.input_channels}")
        if self.latent_channels % self.latent_heads:
            raise ConfigError(
                f"latent_channels {self.latent_channels} not divisible by latent_heads {self.latent_heads}")
        AttentionBlockConfig.cross(self.latent_channels, self.byte_channels, self.cross_heads,
                                   self.dense_widening, self.cross_qk_channels or None)

    @property
    def byte_channels(self) -> int:
        """Width of the array the cross-attends read."""
        return self.input_channels + self.learned_pos_channels

    @property
    def num_towers(self) -> int:
        return self.num_cross_attends * self.blocks_per_cross

    def cross_config(self) -> AttentionBlockConfig:
        return AttentionBlockConfig.cross(self.latent_channels, self.byte_channels, self.cross_heads,
                                          self.dense_widening, self.cross_qk_channels or None)

    def latent_config(self) -> AttentionBlockConfig:
        return AttentionBlockConfig.latent(self.latent_channels, self.latent_heads, self.dense_widening)

    def layout(self) -> list[tuple[str, int]]:
        """Execution order as ``("cross", i)`` and ``("tower", j)`` steps."""
        steps = []
        if self.arrangement == "interleaved":
            for i in range(self.num_cross_attends):
                steps.append(("cross", i))
                steps.extend(("tower", i * self.blocks_per_cross + b) for b in range(self.blocks_per_cross))
        else:
            steps.extend(("cross", i) for i in range(self.num_cross_attends))
            steps.extend(("tower", j) for j in range(self.num_towers))
        return steps

    def cross_slots(self) -> list[int]:
        """Parameter-set index used by each cross-attend position."""
        if self.share_cross_after_first:
            return [0] + [1] * (self.num_cross_attends - 1)
        return list(range(self.num_cross_attends))

    def tower_slots(self) -> list[int]:
        n = self.num_towers
        if not self.share_latent_towers:
            return list(range(n))
        if self.tower_sharing == "all":
            return [0] * n
        return [0] + [1] * (n - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality_channels"] = list(self.modality_channels)
        d["modality_min_embeds"] = list(self.modality_min_embeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PerceiverConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Perceiver(Module):
    def __init__(self, config: PerceiverConfig, seed: int = 0):
        self._config = config
        dtype = np.dtype(config.dtype).type
        self._dtype = dtype
        rng = np.random.default_rng(seed)
        eps = config.layer_norm_eps
        self.latent = Tensor(truncated_normal((config.latent_index, config.latent_channels),
                                              config.latent_init_scale, rng, dtype=dtype),
                             requires_grad=True, name="latent")
        if config.modality_channels:
            _, sizes = modality_layout(config.modality_channels, config.modality_min_embeds)
            # zero start: every modality initially sees plain channel padding
            self.modality_embeddings = [Tensor(np.zeros(e, dtype=dtype), requires_grad=e > 0)
                                        for e in sizes]
        if config.learned_pos_channels:
            self.position_table = Tensor(
                truncated_normal((config.learned_pos_index, config.learned_pos_channels),
                                 config.learned_pos_init_scale, rng, dtype=dtype),
                requires_grad=True, name="position_table")
        cross_cfg = config.cross_config()
        latent_cfg = config.latent_config()
        cross_sets: dict[int, CrossAttention] = {}
        self.crosses = []
        for slot in config.cross_slots():
            if slot not in cross_sets:
                cross_sets[slot] = CrossAttention(cross_cfg, config.byte_channels, rng, eps, dtype)
            self.crosses.append(cross_sets[slot])
        tower_sets: dict[int, list[SelfAttention]] = {}
        self.towers = []
        for slot in config.tower_slots():
            if slot not in tower_sets:
                tower_sets[slot] = [SelfAttention(latent_cfg, rng, eps, dtype)
                                    for _ in range(config.self_attends_per_block)]
            self.towers.append(tower_sets[slot])
        self.head = Linear(config.latent_channels, config.num_classes, rng,
                           std=config.classifier_init_scale, dtype=dtype)

    @property
    def config(self) -> PerceiverConfig:
        return self._config

    @property
    def dtype(self):
        return self._dtype

    def embed_inputs(self, inputs) -> Tensor:
        """Turn raw model input into the byte array the cross-attends read."""
        cfg = self._config
        if cfg.modality_channels:
            if isinstance(inputs, (np.ndarray, Tensor)):
                raise DimensionError("multimodal model expects one array per modality")
            if len(inputs) != len(cfg.modality_channels):
                raise DimensionError(f"expected {len(cfg.modality_channels)} modalities, got {len(inputs)}")
            arrays = [T.as_tensor(np.asarray(a, dtype=self._dtype) if not isinstance(a, Tensor) else a)
                      for a in inputs]
            for a, c in zip(arrays, cfg.modality_channels):
                if a.shape[-1] != c:
                    raise DimensionError(f"modality width {a.shape[-1]} != configured {c}")
            x = modality_pad(arrays, self.modality_embeddings)
        else:
            x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=self._dtype))
        if x.ndim < 2:
            raise DimensionError(f"inputs need shape (..., M, C), got {x.shape}")
        if x.shape[-1] != cfg.input_channels:
            raise DimensionError(f"input has {x.shape[-1]} channels, model was built for {cfg.input_channels}")
        if cfg.learned_pos_channels:
            if x.shape[-2] != cfg.learned_pos_index:
                raise DimensionError(f"learned positions cover {cfg.learned_pos_index} rows, got {x.shape[-2]}")
            x = T.concat([x, T.broadcast_leading(self.position_table, x.shape[:-2])], axis=-1)
        return x

    def forward(self, inputs, capture: bool = False) -> tuple[Tensor, list[AttentionMaps]]:
        """Logits of shape ``(..., num_classes)`` plus captured cross-attention maps.

        Captures hold one entry per cross-attend use (batch item 0 when batched).
        """
        x = self.embed_inputs(inputs)
        lead = x.shape[:-2]
        z = T.broadcast_leading(self.latent, lead)
        captures: list[AttentionMaps] = []
        for kind, idx in self._config.layout():
            if kind == "cross":
                block = self.crosses[idx]
                block.enable_capture(capture)
                z = block(z, x)
                if capture:
                    captures.append(extract_attention_maps(block))
                    block.enable_capture(False)
            else:
                for layer in self.towers[idx]:
                    z = layer(z)
        logits = self.head(T.mean_over_index(z))
        return logits, captures

    __call__ = forward

    def latent_summary(self, inputs) -> Tensor:
        """The pooled latent that feeds the classifier (used by shape checks)."""
        x = self.embed_inputs(inputs)
        z = T.broadcast_leading(self.latent, x.shape[:-2])
        for kind, idx in self._config.layout():
            if kind == "cross":
                z = self.crosses[idx](z, x)
            else:
                for layer in self.towers[idx]:
                    z = layer(z)
        return z

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise StateError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: shape {arr.shape} vs {p.shape}")
            p.data[...] = arr


def build(config: PerceiverConfig, seed: int = 0) -> Perceiver:
    return Perceiver(config, seed)


def loss(logits: Tensor, target, mode: str = "softmax") -> Tensor:
    """Softmax cross-entropy on class indices, or sigmoid cross-entropy on
    multi-hot targets (summed over classes)."""
    if mode == "softmax":
        return T.cross_entropy(logits, target)
    if mode == "sigmoid":
        return T.sigmoid_cross_entropy(logits, target)
    raise ConfigError(f"unknown loss mode {mode!r}")


def accuracy(logits: Tensor | np.ndarray, target) -> float:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float(np.mean(z.argmax(axis=-1) == np.asarray(target)))


def video_dropout(arrays: Sequence[np.ndarray], names: Sequence[str], p: float,
                  rng: np.random.Generator, video: str = "video",
                  training: bool = True) -> tuple[list[np.ndarray], np.ndarray]:
    """Zero the whole video stream of each example with probability ``p``.

    ``arrays`` are per-modality feature arrays of shape ``(B, M_i, C_i)``
    (or ``(M_i, C_i)`` for one example), before any modality embedding is
    attached. Returns the new arrays and the boolean drop mask.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"drop probability must be in [0, 1], got {p}")
    names = list(names)
    if video not in names:
        raise ConfigError(f"unknown modality label {video!r}; have {names}")
    arrays = [np.asarray(a) for a in arrays]
    k = names.index(video)
    single = arrays[k].ndim == 2
    batch = 1 if single else arrays[k].shape[0]
    if not training or p == 0.0:
        return [a.copy() for a in arrays], np.zeros(batch, dtype=bool)
    drop = rng.random(batch) < p
    out = [a.copy() for a in arrays]
    if single:
        if drop[0]:
            out[k][...] = 0
    else:
        out[k][drop] = 0
    return out, drop


class ByteTransformer(Module):
    """Baseline: self-attention directly over the M input rows.

    A linear map lifts inputs to ``channels``; the head averages and projects
    like the Perceiver. Cost grows with M squared.
    """

    def __init__(self, input_channels: int, channels: int, depth: int, num_heads: int,
                 num_classes: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.embed = Linear(input_channels, channels, rng, dtype=dtype)
        cfg = AttentionBlockConfig.latent(channels, num_heads)
        self.blocks = [SelfAttention(cfg, rng, dtype=dtype) for _ in range(depth)]
        self.head = Linear(channels, num_classes, rng, std=0.02, dtype=dtype)
        self._dtype = dtype

    def forward(self, inputs) -> Tensor:
        x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=self._dtype))
        z = self.embed(x)
        for block in self.blocks:
            z = block(z)
        return self.head(T.mean_over_index(z))

    __call__ = forward


class Conv1DProbe:
    """Locality-exploiting reference model: two 1-D convolutions along the
    row axis (kernel 3, zero padded), GELU, max pooling and a linear head.

    Its output depends on which rows are neighbours, so it changes when the
    rows are permuted.
    """

    def __init__(self, input_channels: int, hidden: int = 32, num_classes: int = 10, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.k1 = rng.normal(0, 1 / np.sqrt(3 * input_channels), (3, input_channels, hidden))
        self.k2 = rng.normal(0, 1 / np.sqrt(3 * hidden), (3, hidden, hidden))
        self.w = rng.normal(0, 1 / np.sqrt(hidden), (hidden, num_classes))

    @staticmethod
    def _conv(x, kernel):
        pad = np.zeros_like(x[..., :1, :])
        left = np.concatenate([pad, x[..., :-1, :]], axis=-2)
        right = np.concatenate([x[..., 1:, :], pad], axis=-2)
        return left @ kernel[0] + x @ kernel[1] + right @ kernel[2]

    @staticmethod
    def _gelu(x):
        from scipy.special import erf
        return 0.5 * x * (1 + erf(x / np.sqrt(2)))

    def __call__(self, inputs) -> np.ndarray:
        x = np.asarray(inputs, dtype=np.float64)
        h = self._gelu(self._conv(x, self.k1))
        h = self._gelu(self._conv(h, self.k2))
        return h.max(axis=-2) @ self.w


def save_checkpoint(path: str | Path, model: Perceiver, step: int = 0, extra: dict | None = None) -> None:
    """Write a versioned ``.npz`` container: one array per named parameter
    table plus a JSON header holding the model config."""
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "step": int(step),
            "config": model.config.to_dict(), "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[Perceiver, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data.files:
            raise StateError(f"{path} is not a checkpoint")
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise StateError(f"{path}: unexpected format {meta.get('format')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise StateError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        state = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    model = Perceiver(PerceiverConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    return model, meta
