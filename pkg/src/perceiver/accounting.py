"""Closed-form parameter and FLOP counts.

FLOPs are per single forward pass of one example, with multiplies and
accumulates counted separately: an ``(a x b) @ (b x c)`` product costs
``2abc``. Bias adds, residual adds and the attention scale cost one FLOP per
output scalar; softmax, layer norm and GELU cost the per-scalar constants in
:data:`perceiver.tensor.FLOPS_PER_ELEMENT`. Position-feature generation is
not counted; the classifier head is.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionBlockConfig
from .errors import ConfigError
from .model import PerceiverConfig
from .positional import modality_layout
from .tensor import FLOPS_PER_ELEMENT as FPE
from .tensor import FlopCounter


@dataclass
class LayerCount:
    name: str
    params: int
    flops: int


@dataclass
class CountReport:
    rows: list[LayerCount] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def fused_flops(self) -> int:
        """Figure under the fused multiply-add convention (half the unfused one)."""
        return self.flops // 2

    def add(self, name: str, params: int, flops: int) -> None:
        self.rows.append(LayerCount(name, int(params), int(flops)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "params", "flops"])
        for r in self.rows:
            w.writerow([r.name, r.params, r.flops])
        return buf.getvalue()

    def total_line(self) -> str:
        return (f"total params={self.params} ({self.params / 1e6:.1f}M) "
                f"flops={self.flops} ({self.flops / 1e9:.1f}B unfused, "
                f"{self.fused_flops / 1e9:.1f}B fused)")


def _linear(rows: int, cin: int, cout: int) -> tuple[int, int]:
    return cin * cout + cout, 2 * rows * cin * cout + rows * cout


def _layer_norm(rows: int, c: int) -> tuple[int, int]:
    return 2 * c, FPE["layer_norm"] * rows * c


def _attend(n: int, m: int, qk: int, v: int, heads: int) -> int:
    scores = 2 * n * m * qk
    pointwise = (FPE["scale"] + FPE["softmax"]) * heads * n * m
    return scores + pointwise + 2 * n * m * v


def _dense(n: int, d: int, widening: float) -> tuple[int, int]:
    hidden = max(1, int(round(d * widening)))
    p_ln, f_ln = _layer_norm(n, d)
    p1, f1 = _linear(n, d, hidden)
    p2, f2 = _linear(n, hidden, d)
    return p_ln + p1 + p2, f_ln + f1 + FPE["gelu"] * n * hidden + f2 + FPE["add"] * n * d


def _cross_rows(report, name, cfg: AttentionBlockConfig, n, m, c, widening, with_params):
    d, qk, v = cfg.output_channels, cfg.qk_channels, cfg.v_channels
    keep = 1 if with_params else 0
    p_lq, f_lq = _layer_norm(n, d)
    p_lkv, f_lkv = _layer_norm(m, c)
    report.add(f"{name}.layer_norms", keep * (p_lq + p_lkv), f_lq + f_lkv)
    pq, fq = _linear(n, d, qk)
    pk, fk = _linear(m, c, qk)
    pv, fv = _linear(m, c, v)
    report.add(f"{name}.q_proj", keep * pq, fq)
    report.add(f"{name}.kv_proj", keep * (pk + pv), fk + fv)
    report.add(f"{name}.attend", 0, _attend(n, m, qk, v, cfg.num_heads))
    po, fo = _linear(n, v, d)
    report.add(f"{name}.out_proj", keep * po, fo + FPE["add"] * n * d)
    pd, fd = _dense(n, d, widening)
    report.add(f"{name}.dense", keep * pd, fd)


def _self_rows(report, name, n, d, heads, widening, with_params):
    keep = 1 if with_params else 0
    p_ln, f_ln = _layer_norm(n, d)
    pl, fl = _linear(n, d, d)
    report.add(f"{name}.layer_norm", keep * p_ln, f_ln)
    report.add(f"{name}.qkv_proj", keep * 3 * pl, 3 * fl)
    report.add(f"{name}.attend", 0, _attend(n, n, d, d, heads))
    report.add(f"{name}.out_proj", keep * pl, fl + FPE["add"] * n * d)
    pd, fd = _dense(n, d, widening)
    report.add(f"{name}.dense", keep * pd, fd)


def count(config: PerceiverConfig, index_dim: int, input_channels: int | None = None) -> CountReport:
    """Parameters and forward FLOPs for ``config`` on an ``index_dim``-row input."""
    if index_dim < 1:
        raise ConfigError(f"input index dimension must be >= 1, got {index_dim}")
    if input_channels is not None and input_channels != config.input_channels:
        config = PerceiverConfig.from_dict({**config.to_dict(), "input_channels": input_channels})
    n, d, m = config.latent_index, config.latent_channels, index_dim
    c = config.byte_channels
    report = CountReport()
    if config.modality_channels:
        _, sizes = modality_layout(config.modality_channels, config.modality_min_embeds)
        report.add("inputs.modality_embeddings", sum(sizes), 0)
    if config.learned_pos_channels:
        report.add("inputs.position_table", config.learned_pos_index * config.learned_pos_channels, 0)
    report.add("latent", n * d, 0)
    cross_cfg = config.cross_config()
    cross_slots, tower_slots = config.cross_slots(), config.tower_slots()
    seen_cross: set[int] = set()
    seen_tower: set[int] = set()
    for kind, idx in config.layout():
        if kind == "cross":
            slot = cross_slots[idx]
            _cross_rows(report, f"cross{idx}", cross_cfg, n, m, c, config.dense_widening,
                        slot not in seen_cross)
            seen_cross.add(slot)
        else:
            slot = tower_slots[idx]
            for k in range(config.self_attends_per_block):
                _self_rows(report, f"tower{idx}.self{k}", n, d, config.latent_heads,
                           config.dense_widening, slot not in seen_tower)
            seen_tower.add(slot)
    ph, fh = _linear(1, d, config.num_classes)
    report.add("head", ph, FPE["mean"] * n * d + fh)
    return report


def count_params(config: PerceiverConfig, input_channels: int | None = None) -> CountReport:
    """Same rows as :func:`count`; FLOPs there are for a one-row input."""
    return count(config, 1, input_channels)


def count_flops(config: PerceiverConfig, input_channels: int | None, index_dim: int) -> CountReport:
    return count(config, index_dim, input_channels)


def count_transformer(input_channels: int, channels: int, depth: int, num_heads: int,
                      num_classes: int, index_dim: int) -> CountReport:
    """Byte-level Transformer baseline: self-attention over all M input rows."""
    if index_dim < 1:
        raise ConfigError("input index dimension must be >= 1")
    m, d = index_dim, channels
    report = CountReport()
    pe, fe = _linear(m, input_channels, d)
    report.add("embed", pe, fe)
    for k in range(depth):
        _self_rows(report, f"block{k}", m, d, num_heads, 1.0, True)
    ph, fh = _linear(1, d, num_classes)
    report.add("head", ph, FPE["mean"] * m * d + fh)
    return report


def measure_flops(forward, inputs) -> int:
    """FLOPs tallied by the tensor primitives while ``forward(inputs)`` runs."""
    with FlopCounter() as counter:
        forward(inputs)
    return counter.total


def linear_fit_r2(xs, ys) -> float:
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    total = ((ys - ys.mean()) ** 2).sum()
    return 1.0 - resid.dot(resid) / total if total > 0 else 1.0
