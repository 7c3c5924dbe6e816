"""Command-line entry point.

Run configs are flat ``key = value`` text files; ``#`` starts a comment.
Every key has a fixed type and unknown keys are rejected. Model keys are
the :class:`~perceiver.model.PerceiverConfig` field names; the rest are
listed in :data:`RUN_DEFAULTS`.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import tensor as T
from .accounting import count, count_transformer, linear_fit_r2
from .attention import write_pgm
from .errors import ConfigError, DivergenceError, PerceiverError
from .ingestion import DATASET_KINDS, Dataset, load_dataset, permute_dataset, synthetic_datasets
from .model import Conv1DProbe, Perceiver, PerceiverConfig, load_checkpoint, save_checkpoint
from .optim import Lamb, Schedule, evaluate, train
from .positional import modality_layout

log = logging.getLogger("perceiver")

AUTO = "auto"

RUN_DEFAULTS: dict[str, object] = {
    "seed": 0,
    "deterministic": True,
    "output_dir": "runs/default",
    "dataset": "",
    "dataset_path": "",
    "dataset_size": 2500,
    "dataset_seed": 0,
    "test_fraction": 0.2,
    "permutation_seed": -1,
    "fourier_bands": 4,
    "fourier_max_resolution": 0.0,
    "index_dim": 50176,
    "lr": 0.004,
    "decay_epochs": (),
    "decay_factor": 0.1,
    "epoch_length": 100,
    "steps": 1000,
    "batch_size": 32,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-6,
    "weight_decay": 0.0,
    "trust_ratio": True,
    "checkpoint_every": 0,
    "video_dropout": 0.0,
    "drop_modality": "",
}

MODEL_DEFAULTS: dict[str, object] = {f.name: f.default for f in fields(PerceiverConfig)}
# may be left for the dataset to decide
AUTO_KEYS = {"input_channels", "modality_channels"}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    if key in AUTO_KEYS and raw == AUTO:
        return AUTO
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            value = float(raw)
            if not np.isfinite(value):
                raise ValueError(raw)
            return value
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError:
        kind = "list of integers" if isinstance(default, tuple) else type(default).__name__
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from None
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Every knob of one run: model, position features, optimizer, data, seed."""

    SCHEMA = {**MODEL_DEFAULTS, **RUN_DEFAULTS}

    def __init__(self, values: dict | None = None):
        self.values = dict(self.SCHEMA)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in self.SCHEMA:
            raise ConfigError(f"{key}: unknown config key")
        default = self.SCHEMA[key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse_value(key, value, default)
        elif isinstance(default, tuple) and value != AUTO:
            value = tuple(value)
        self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg, seen = cls(), set()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in cls.SCHEMA:
                raise ConfigError(f"{source}:{lineno}: {key}: unknown config key")
            if key in seen:
                raise ConfigError(f"{source}:{lineno}: {key}: given twice")
            seen.add(key)
            cfg.values[key] = _parse_value(key, raw, cls.SCHEMA[key])
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            bundled = bundled_config_path(str(path))
            if bundled is None:
                raise ConfigError(f"config: no such file {path}")
            path = bundled
        return cls.parse(path.read_text(encoding="utf-8"), str(path))

    def dump(self) -> str:
        lines = ["# resolved run config"]
        lines += [f"{k} = {_format_value(v)}" for k, v in self.values.items()]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")

    def copy(self) -> "RunConfig":
        return RunConfig(self.values)

    def model_config(self) -> PerceiverConfig:
        model = {k: self.values[k] for k in MODEL_DEFAULTS}
        for key in AUTO_KEYS:
            if model[key] == AUTO:
                raise ConfigError(f"{key}: 'auto' needs a dataset to resolve against")
        try:
            return PerceiverConfig(**model)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def schedule(self) -> Schedule:
        return Schedule(self["lr"], list(self["decay_epochs"]), self["decay_factor"], self["epoch_length"])

    def resolve(self, ds: Dataset) -> "RunConfig":
        """Fill ``auto`` keys from the dataset's shapes."""
        out = self.copy()
        if ds.modalities:
            chans = tuple(a.shape[-1] for a in ds.x_train)
            if out["modality_channels"] == AUTO:
                out.values["modality_channels"] = chans
            if len(out["modality_min_embeds"]) != len(chans):
                raise ConfigError(f"modality_min_embeds: need {len(chans)} entries for modalities {ds.modalities}")
            if out["input_channels"] == AUTO:
                out.values["input_channels"] = modality_layout(out["modality_channels"],
                                                               out["modality_min_embeds"])[0]
        else:
            if out["modality_channels"] == AUTO:
                out.values["modality_channels"] = ()
            if out["input_channels"] == AUTO:
                out.values["input_channels"] = int(ds.x_train.shape[-1])
            elif out["input_channels"] != ds.x_train.shape[-1]:
                raise ConfigError(f"input_channels: config says {out['input_channels']}, "
                                  f"dataset rows have {ds.x_train.shape[-1]} channels")
        return out


def bundled_config_path(name: str) -> Path | None:
    base = resources.files("perceiver") / "configs"
    for candidate in (name, f"{name}.cfg"):
        p = base / candidate
        if p.is_file():
            return Path(str(p))
    return None


def bundled_configs() -> list[str]:
    base = resources.files("perceiver") / "configs"
    return sorted(p.name for p in base.iterdir() if p.name.endswith(".cfg"))


def load_run_dataset(cfg: RunConfig) -> Dataset:
    if cfg["dataset_path"]:
        path = Path(cfg["dataset_path"])
        if not (path / "manifest.json").is_file():
            raise ConfigError(f"dataset_path: no dataset at {path}")
        ds = load_dataset(path)
    elif cfg["dataset"]:
        kind = cfg["dataset"]
        if kind not in DATASET_KINDS:
            raise ConfigError(f"dataset: unknown kind {kind!r}; choose from {', '.join(DATASET_KINDS)}")
        options = {}
        if kind != "two-modality-parity":
            options["bands"] = cfg["fourier_bands"]
            if cfg["fourier_max_resolution"] > 0:
                options["max_resolution"] = cfg["fourier_max_resolution"]
        ds = synthetic_datasets(kind, cfg["dataset_size"], cfg["dataset_seed"], cfg["test_fraction"], **options)
    else:
        raise ConfigError("dataset: set either dataset (a synthetic kind) or dataset_path")
    if cfg["permutation_seed"] >= 0:
        ds, _ = permute_dataset(ds, cfg["permutation_seed"])
    return ds


def _test_inputs(cfg: RunConfig, ds: Dataset):
    x = ds.x_test
    if ds.modalities and cfg["drop_modality"]:
        k = ds.modalities.index(cfg["drop_modality"])
        x = [np.zeros_like(a) if i == k else a for i, a in enumerate(x)]
    return x


def _write_rows(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def cmd_train(cfg: RunConfig, out_dir: str | Path | None = None) -> dict:
    """Train, evaluate on the test split and write everything under the run directory."""
    out = Path(out_dir or cfg["output_dir"])
    ds = load_run_dataset(cfg)
    cfg = cfg.resolve(ds)
    model_cfg = cfg.model_config()
    if cfg["drop_modality"] and (not ds.modalities or cfg["drop_modality"] not in ds.modalities):
        raise ConfigError(f"drop_modality: {cfg['drop_modality']!r} is not a modality of this dataset")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.cfg")
    T.set_deterministic(cfg["deterministic"])
    model = Perceiver(model_cfg, seed=cfg["seed"])
    names = [n for n, _ in model.named_parameters()]
    opt = Lamb(model.parameters(), cfg["beta1"], cfg["beta2"], cfg["eps"], cfg["weight_decay"],
               cfg["trust_ratio"], names)
    rows = train(model, ds, cfg.schedule(), cfg["steps"], cfg["batch_size"], seed=cfg["seed"], optimizer=opt,
                 metrics_path=out / "metrics.csv",
                 checkpoint_dir=out / "checkpoints" if cfg["checkpoint_every"] else None,
                 checkpoint_every=cfg["checkpoint_every"], video_dropout_p=cfg["video_dropout"],
                 drop_modality=cfg["drop_modality"] or "video",
                 permanent_drop=bool(cfg["drop_modality"]))
    save_checkpoint(out / "final.npz", model, cfg["steps"])
    result = evaluate(model, _test_inputs(cfg, ds), ds.y_test, loss_mode=model_cfg.loss)
    tail = rows[-min(len(rows), 50):] if rows else []
    summary = {"status": "ok", "steps": cfg["steps"],
               "train_accuracy": float(np.mean([r["accuracy"] for r in tail])) if tail else float("nan"),
               "final_loss": rows[-1]["loss"] if rows else float("nan"),
               "test_accuracy": result["accuracy"], "test_loss": result["loss"],
               "params": model.num_parameters()}
    _write_rows(out / "eval.csv", ["step", "split", "accuracy", "loss"],
                [{"step": cfg["steps"], "split": "test", "accuracy": result["accuracy"], "loss": result["loss"]}])
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


def cmd_evaluate(checkpoint: str | Path, cfg: RunConfig | None = None) -> dict:
    checkpoint = Path(checkpoint)
    if cfg is None:
        cfg_path = checkpoint.parent / "config.cfg"
        if not cfg_path.is_file():
            raise ConfigError(f"config: none given and no config.cfg beside {checkpoint}")
        cfg = RunConfig.load(cfg_path)
    if not checkpoint.is_file():
        raise ConfigError(f"checkpoint: no such file {checkpoint}")
    T.set_deterministic(cfg["deterministic"])
    model, meta = load_checkpoint(checkpoint)
    ds = load_run_dataset(cfg)
    result = evaluate(model, _test_inputs(cfg, ds), ds.y_test, loss_mode=model.config.loss)
    return {"checkpoint": str(checkpoint), "step": meta["step"], **result}


def cmd_count(cfg: RunConfig, index_dim: int | None = None):
    m = cfg["index_dim"] if index_dim is None else index_dim
    if m < 1:
        raise ConfigError(f"index_dim: must be >= 1, got {m}")
    if AUTO in (cfg["input_channels"], cfg["modality_channels"]):
        cfg = cfg.resolve(load_run_dataset(cfg))
    return count(cfg.model_config(), m)


def _median_forward_seconds(model: Perceiver, m: int, repeats: int, seed: int) -> float:
    x = np.random.default_rng(seed).uniform(-1, 1, (m, model.config.input_channels)).astype(model.dtype)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.forward(x)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_bench(cfg: RunConfig, ms: list[int], repeats: int = 5, wall: bool = True,
              baseline_channels: int | None = None, baseline_depth: int | None = None) -> list[dict]:
    """Counted FLOPs for the Perceiver and a byte-level Transformer at each M,
    plus the median forward wall time of the Perceiver."""
    if not ms or any(m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
        raise ConfigError(f"M list must be positive and strictly ascending, got {ms}")
    model_cfg = cfg.model_config()
    channels = baseline_channels or model_cfg.latent_channels
    depth = baseline_depth or max(1, model_cfg.num_towers * model_cfg.self_attends_per_block)
    model = Perceiver(model_cfg, seed=cfg["seed"]) if wall else None
    rows, prev = [], None
    for m in ms:
        pf = count(model_cfg, m).flops
        tf = count_transformer(model_cfg.input_channels, channels, depth, model_cfg.latent_heads,
                               model_cfg.num_classes, m).flops
        row = {"M": m, "perceiver_flops": pf, "transformer_flops": tf,
               "perceiver_ratio": pf / prev[0] if prev else "",
               "transformer_ratio": tf / prev[1] if prev else "",
               "wall_median_s": _median_forward_seconds(model, m, repeats, cfg["seed"]) if wall else ""}
        rows.append(row)
        prev = (pf, tf)
    return rows


BENCH_FIELDS = ["M", "perceiver_flops", "transformer_flops", "perceiver_ratio", "transformer_ratio",
                "wall_median_s"]


def cmd_permute_eval(cfg: RunConfig, out_dir: str | Path | None = None, permutation_seed: int | None = None) -> dict:
    """Train on the dataset as given and on a row-permuted copy; compare test
    accuracy. Also report how far a fresh model's logits and a convolutional
    probe's outputs move under the permutation."""
    out = Path(out_dir or cfg["output_dir"])
    seed = cfg["seed"] + 1 if permutation_seed is None else permutation_seed
    plain = cfg.copy()
    plain.set("permutation_seed", -1)
    shuffled = cfg.copy()
    shuffled.set("permutation_seed", seed)
    a = cmd_train(plain, out / "original")
    b = cmd_train(shuffled, out / "permuted")

    ds = load_run_dataset(plain)
    resolved = plain.resolve(ds)
    perm_ds, _ = permute_dataset(ds, seed)
    T.set_deterministic(True)
    model = Perceiver(resolved.model_config(), seed=cfg["seed"])
    k = min(50, len(ds.y_test))
    base = model.forward(ds.x_test[:k])[0].data
    moved = model.forward(perm_ds.x_test[:k])[0].data
    probe = Conv1DProbe(ds.x_test.shape[-1], num_classes=resolved["num_classes"], seed=cfg["seed"])
    pb, pm = probe(ds.x_test[:k]), probe(perm_ds.x_test[:k])
    result = {"original_accuracy": a["test_accuracy"], "permuted_accuracy": b["test_accuracy"],
              "accuracy_gap": abs(a["test_accuracy"] - b["test_accuracy"]),
              "init_logit_rel_change": relative_change(base, moved),
              "conv_probe_rel_change": relative_change(pb, pm)}
    _write_rows(out / "permute_eval.csv", list(result), [result])
    return result


def relative_change(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max|a|``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.abs(a).max()
    return float(np.abs(a - b).max() / scale) if scale > 0 else float(np.abs(b).max())


def _selection(spec: str, limit: int, what: str) -> list[int]:
    if spec == "all":
        return list(range(limit))
    try:
        picks = [int(v) for v in spec.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what}: cannot read {spec!r}") from None
    bad = [p for p in picks if not 0 <= p < limit]
    if bad or not picks:
        raise ConfigError(f"{what}: {bad or spec} out of range 0..{limit - 1}")
    return picks


def cmd_attmaps(checkpoint: str | Path, cfg: RunConfig | None = None, item: int = 0, layers: str = "all",
                latents: str = "0", out_dir: str | Path | None = None) -> list[Path]:
    """Export pre-softmax cross-attention maps of one test item.

    Writes ``attend{i}_head{h}_latent{n}.csv`` for every selection and, when
    the input rows form a 2-D grid, a matching min-max normalized ``.pgm``.
    """
    checkpoint = Path(checkpoint)
    if cfg is None:
        cfg_path = checkpoint.parent / "config.cfg"
        if not cfg_path.is_file():
            raise ConfigError(f"config: none given and no config.cfg beside {checkpoint}")
        cfg = RunConfig.load(cfg_path)
    if not checkpoint.is_file():
        raise ConfigError(f"checkpoint: no such file {checkpoint}")
    model, _ = load_checkpoint(checkpoint)
    ds = load_run_dataset(cfg)
    if not 0 <= item < len(ds.y_test):
        raise ConfigError(f"item: {item} out of range 0..{len(ds.y_test) - 1}")
    x = [a[item] for a in ds.x_test] if ds.modalities else ds.x_test[item]
    attends = _selection(layers, model.config.num_cross_attends, "layers")
    picks = _selection(latents, model.config.latent_index, "latents")
    _, maps = model.forward(x, capture=True)
    grid = ds.meta.get("grid")
    if cfg["permutation_seed"] >= 0 or ds.modalities or not grid or len(grid) != 2:
        grid = None
    out = Path(out_dir) if out_dir else checkpoint.parent / "attmaps"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in attends:
        for h in range(maps[i].heads):
            for n in picks:
                scores = maps[i].scores[h, n]
                stem = f"attend{i}_head{h}_latent{n}"
                np.savetxt(out / f"{stem}.csv", scores[None, :], delimiter=",", fmt="%.8g")
                written.append(out / f"{stem}.csv")
                if grid is not None:
                    write_pgm(out / f"{stem}.pgm", scores.reshape(grid))
                    written.append(out / f"{stem}.pgm")
    return written


def _sweep_point(args) -> dict:
    base_values, key, value, out = args
    cfg = RunConfig(base_values)
    cfg.set(key, value)
    row = {"axis": key, "value": value, "status": "ok", "train_accuracy": "", "test_accuracy": "",
           "final_loss": "", "message": ""}
    try:
        summary = cmd_train(cfg, out)
        row.update(train_accuracy=summary["train_accuracy"], test_accuracy=summary["test_accuracy"],
                   final_loss=summary["final_loss"])
    except DivergenceError as exc:
        row.update(status="diverged", message=str(exc))
    except (PerceiverError, ValueError, RuntimeError, FloatingPointError) as exc:
        row.update(status="failed", message=str(exc))
    return row


SWEEP_FIELDS = ["axis", "value", "status", "train_accuracy", "test_accuracy", "final_loss", "message"]


def parse_axis(spec: str) -> tuple[str, list[str]]:
    if "=" not in spec:
        raise ConfigError(f"axis: expected key=v1,v2,... got {spec!r}")
    key, raw = (s.strip() for s in spec.split("=", 1))
    if key not in RunConfig.SCHEMA:
        raise ConfigError(f"axis: {key}: unknown config key")
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if not values:
        raise ConfigError(f"axis: no values given for {key}")
    for v in values:
        _parse_value(key, v, RunConfig.SCHEMA[key])
    return key, values


def cmd_sweep(cfg: RunConfig, axis: str, out_dir: str | Path | None = None, jobs: int = 1) -> list[dict]:
    """One training run per axis value; failures are recorded, not raised."""
    key, values = parse_axis(axis)
    out = Path(out_dir or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    points = [(cfg.values, key, v, out / f"{key}={v}") for v in values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_point, points))
    else:
        rows = [_sweep_point(p) for p in points]
    _write_rows(out / "sweep.csv", SWEEP_FIELDS, rows)
    return rows


def _apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        cfg.set(key, value)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perceiver", description="Train, count and inspect Perceiver models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=True):
        if required:
            sp.add_argument("config", help="config file or bundled config name")
        else:
            sp.add_argument("--config", default=None)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    sp = sub.add_parser("train")
    with_config(sp)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("evaluate")
    sp.add_argument("checkpoint")
    with_config(sp, required=False)

    sp = sub.add_parser("count")
    with_config(sp)
    sp.add_argument("--index-dim", "-M", type=int, default=None)
    sp.add_argument("--out", default=None, help="also write the CSV here")

    sp = sub.add_parser("bench")
    with_config(sp)
    sp.add_argument("--m", required=True, help="comma-separated ascending M values")
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--no-wall", action="store_true")
    sp.add_argument("--baseline-channels", type=int, default=None)
    sp.add_argument("--baseline-depth", type=int, default=None)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("permute-eval")
    with_config(sp)
    sp.add_argument("--permutation-seed", type=int, default=None)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("attmaps")
    sp.add_argument("checkpoint")
    with_config(sp, required=False)
    sp.add_argument("--item", type=int, default=0)
    sp.add_argument("--layers", default="all")
    sp.add_argument("--latents", default="0")
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("sweep")
    with_config(sp)
    sp.add_argument("--axis", required=True, metavar="KEY=V1,V2,...")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out", default=None)

    sub.add_parser("list-configs")
    return p


def _config(args) -> RunConfig | None:
    path = getattr(args, "config", None)
    if path is None:
        return None
    return _apply_overrides(RunConfig.load(path), args.set)


def run(args) -> None:
    cmd = args.command
    if cmd == "list-configs":
        print("\n".join(bundled_configs()))
        return
    cfg = _config(args)
    if cfg is None and getattr(args, "set", None):
        raise ConfigError("--set needs --config")
    if cmd == "train":
        summary = cmd_train(cfg, args.out)
        print(json.dumps(summary))
    elif cmd == "evaluate":
        print(json.dumps(cmd_evaluate(args.checkpoint, cfg)))
    elif cmd == "count":
        report = cmd_count(cfg, args.index_dim)
        sys.stdout.write(report.to_csv())
        print(report.total_line())
        if args.out:
            Path(args.out).write_text(report.to_csv(), encoding="utf-8")
    elif cmd == "bench":
        try:
            ms = [int(v) for v in args.m.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"m: cannot read {args.m!r}") from None
        rows = cmd_bench(cfg, ms, args.repeats, not args.no_wall, args.baseline_channels, args.baseline_depth)
        writer = csv.DictWriter(sys.stdout, fieldnames=BENCH_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        print(f"perceiver linear-fit R2={linear_fit_r2([r['M'] for r in rows], [r['perceiver_flops'] for r in rows]):.6f}")
        if args.out:
            _write_rows(Path(args.out), BENCH_FIELDS, rows)
    elif cmd == "permute-eval":
        print(json.dumps(cmd_permute_eval(cfg, args.out, args.permutation_seed)))
    elif cmd == "attmaps":
        for path in cmd_attmaps(args.checkpoint, cfg, args.item, args.layers, args.latents, args.out):
            print(path)
    elif cmd == "sweep":
        rows = cmd_sweep(cfg, args.axis, args.out, args.jobs)
        writer = csv.DictWriter(sys.stdout, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (PerceiverError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
