"""Run orchestration: data, network presets, per-mode execution and run manifests.

Every run directory holds ``config.txt`` (a config file that reproduces the
run), ``manifest.txt`` (status, seed, input hashes, headline numbers) and the
mode's CSV and checkpoint outputs.
"""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import BlockNet, freeze
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, parse_config
from .data import (Dataset, dump_csv, gen_spiral, gen_textured_patches, load_cifar10_binary,
                   split_dataset)
from .errors import ConfigError, DimensionError, HKTError
from .etm import build_stages
from .gradcheck import grad_check
from .train import (LossWeights, MetricsWriter, accuracy_native, combined_loss, hkt_forward,
                    train_loop)

log = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
CONFIG_ECHO = "config.txt"

# Default topologies by stage count. Children keep the parent's layout at 1/8 width.
VECTOR_PRESETS = {
    1: ("head:128,256,128,{k}", "head:16,32,16,{k}"),
    2: ("mlp:128,256,128|head:64,{k}", "mlp:16,32,16|head:8,{k}"),
    3: ("mlp:128,256,128|mlp:128,64|head:{k}", "mlp:16,32,16|mlp:16,8|head:{k}"),
}
IMAGE_PRESETS = {
    1: ("conv:32,64/2|head:64,{k}", "conv:4,8/2|head:8,{k}"),
    2: ("conv:32,64/2|conv:64/2|head:64,{k}", "conv:4,8/2|conv:8/2|head:8,{k}"),
    3: ("conv:32,64/2|conv:64,64/2|head:64,{k}", "conv:4,8/2|conv:8,8/2|head:8,{k}"),
}
# Tiny two-stage instances used by grad-check mode.
GRADCHECK_PRESETS = {
    "vector": ("mlp:8,8|head:{k}", "mlp:4|head:{k}"),
    "image": ("conv:4/2|head:{k}", "conv:2/2|head:{k}"),
}


DATA_KEYS = ("data", "data_dir", "data_seed", "split_seed", "val_fraction", "n_per_class", "classes", "noise",
             "turns", "patch_n", "patch_size")


def data_key(cfg: ExperimentConfig) -> tuple:
    """The config values that determine the datasets."""
    return tuple(getattr(cfg, k) for k in DATA_KEYS)


def load_data(cfg: ExperimentConfig):
    """(train, val) datasets for the configured source."""
    if cfg.data == "spiral":
        ds = gen_spiral(cfg.n_per_class, cfg.classes, cfg.noise, cfg.data_seed, turns=cfg.turns)
        return split_dataset(ds, cfg.val_fraction, cfg.split_seed)
    if cfg.data == "patches":
        ds = gen_textured_patches(cfg.patch_n, cfg.patch_size, cfg.classes, cfg.data_seed, noise_std=cfg.noise)
        return split_dataset(ds, cfg.val_fraction, cfg.split_seed)
    train, test = load_cifar10_binary(cfg.data_dir)
    return train, Dataset(test.inputs, test.labels, test.class_count, "val")


def _presets(cfg: ExperimentConfig, sample_shape) -> dict:
    return IMAGE_PRESETS if len(sample_shape) == 3 else VECTOR_PRESETS


def net_specs(cfg: ExperimentConfig, sample_shape, classes: int) -> tuple:
    """(parent spec, child spec): explicit config values or the preset for ``stages``."""
    presets = _presets(cfg, sample_shape)
    if (not cfg.parent or not cfg.child) and cfg.stages not in presets:
        raise ConfigError(f"no preset for {cfg.stages} stages; give parent and child specs", key="stages",
                          line=cfg.sources.get("stages"))
    default_p, default_c = presets.get(cfg.stages, ("", ""))
    parent = cfg.parent or default_p.format(k=classes)
    child = cfg.child or default_c.format(k=classes)
    return parent, child


def build_nets(cfg: ExperimentConfig, sample_shape, classes: int, seed: int):
    """Parent and child networks; raises ConfigError if they do not fit the data or each other."""
    parent_spec, child_spec = net_specs(cfg, sample_shape, classes)
    try:
        parent = BlockNet.build("parent", parent_spec, sample_shape, cfg.parent_seed)
        child = BlockNet.build("child", child_spec, sample_shape, seed)
    except (DimensionError, ValueError) as exc:
        raise ConfigError(str(exc), key="parent" if cfg.parent else "stages") from None
    for name, net in (("parent", parent), ("child", child)):
        if net.n_stages != cfg.stages:
            raise ConfigError(f"{name} has {net.n_stages} stages but stages = {cfg.stages}", key="stages",
                              line=cfg.sources.get("stages"))
        if net.output_shape != (classes,):
            raise ConfigError(f"{name} outputs {net.output_shape}, data has {classes} classes", key=name,
                              line=cfg.sources.get(name))
    build_stages(parent, child, cfg.lam)  # shape alignment check
    return parent, child


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def inputs_hash(cfg: ExperimentConfig, train: Dataset, val: Dataset, parent_file=None) -> str:
    """Content hash of everything a run reads: config (minus output path), data and parent weights."""
    h = hashlib.sha256()
    h.update(cfg.replace(out="").to_text().encode())
    h.update(train.content_hash().encode())
    h.update(val.content_hash().encode())
    if parent_file is not None:
        h.update(Path(parent_file).read_bytes())
    return h.hexdigest()


def write_manifest(out_dir, entries: dict) -> Path:
    path = Path(out_dir) / MANIFEST
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _begin(cfg: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_ECHO).write_text(cfg.to_text())
    write_manifest(out_dir, {"mode": cfg.mode, "status": "running", "seed": cfg.seed})
    return out_dir


def _dump(cfg, out_dir, train, val):
    if cfg.dump_data:
        dump_csv(train, Path(out_dir) / "data_train.csv")
        dump_csv(val, Path(out_dir) / "data_val.csv")


def train_parent(cfg: ExperimentConfig, out_dir, train, val) -> dict:
    out_dir = _begin(cfg.replace(mode="train-parent", seed=cfg.parent_seed), out_dir)
    parent, _ = build_nets(cfg, train.sample_shape, train.class_count, cfg.parent_seed)
    report = train_loop("parent", parent, cfg, train, val, out_dir)
    entries = {
        "mode": "train-parent", "status": "complete", "method": "parent", "seed": cfg.parent_seed,
        "inputs_sha256": inputs_hash(cfg, train, val),
        "param_count": parent.param_count(),
        "best_val_acc_native": repr(report.best_val_acc_native),
        "final_val_acc_native": repr(report.final_val_acc_native),
        "steps": report.steps, "checkpoint": "parent_best.hktc",
    }
    write_manifest(out_dir, entries)
    return entries


def _parent_for(cfg: ExperimentConfig, out_dir, train, val) -> Path:
    """Parent checkpoint path, training one under ``out_dir/parent`` if none is configured."""
    if cfg.parent_ckpt:
        return Path(cfg.parent_ckpt)
    path = Path(out_dir) / "parent" / "parent_best.hktc"
    if not (Path(out_dir) / "parent" / MANIFEST).is_file() or read_manifest(path.parent).get("status") != "complete":
        train_parent(cfg, path.parent, train, val)
    return path


def train_child(cfg: ExperimentConfig, method: str, out_dir, train, val, parent_file=None) -> dict:
    """Train one child with ``method`` in ('solo', 'kd', 'hkt') and record its manifest."""
    out_dir = _begin(cfg, out_dir)
    parent = None
    _, child = build_nets(cfg, train.sample_shape, train.class_count, cfg.seed)
    if method in ("kd", "hkt"):
        parent = load_checkpoint(parent_file)
        freeze(parent)
    parent_hash = parent.param_hash() if parent is not None else ""
    report = train_loop(method, child, cfg, train, val, out_dir, parent=parent)
    if parent is not None and parent.param_hash() != parent_hash:
        raise HKTError("parent parameters changed during training")
    entries = {
        "mode": cfg.mode, "status": "complete", "method": method, "seed": cfg.seed,
        "inputs_sha256": inputs_hash(cfg, train, val, parent_file if parent is not None else None),
        "parent_checkpoint": str(parent_file) if parent is not None else "",
        "parent_param_sha256": parent_hash,
        "param_count": child.param_count(),
        "best_val_acc_native": repr(report.best_val_acc_native),
        "final_val_acc_native": repr(report.final_val_acc_native),
        "final_val_acc_fused": "" if report.final_val_acc_fused is None else repr(report.final_val_acc_fused),
        "steps": report.steps, "checkpoint": "child_final.hktc",
    }
    write_manifest(out_dir, entries)
    return entries


def run_eval(cfg: ExperimentConfig, out_dir, train, val) -> dict:
    net = load_checkpoint(cfg.checkpoint)
    if tuple(net.input_shape) != tuple(val.sample_shape):
        raise ConfigError(f"checkpoint expects inputs {net.input_shape}, data has {val.sample_shape}",
                          key="checkpoint")
    out_dir = _begin(cfg, out_dir)
    acc = accuracy_native(net, val)
    writer = MetricsWriter(out_dir / "metrics.csv")
    writer.row(step=0, epoch=0, val_acc_native=acc)
    writer.close()
    entries = {
        "mode": "eval", "status": "complete", "method": "eval", "seed": cfg.seed,
        "inputs_sha256": inputs_hash(cfg, train, val, cfg.checkpoint),
        "checkpoint": str(cfg.checkpoint), "param_count": net.param_count(),
        "val_acc_native": repr(acc),
    }
    write_manifest(out_dir, entries)
    return entries


def gradcheck_instance(cfg: ExperimentConfig, val: Dataset):
    """Loss closure and trainable parameters of a tiny two-stage HKT instance."""
    kind = "image" if len(val.sample_shape) == 3 else "vector"
    p_spec, c_spec = (s.format(k=val.class_count) for s in GRADCHECK_PRESETS[kind])
    parent = BlockNet.build("parent", p_spec, val.sample_shape, cfg.parent_seed)
    child = BlockNet.build("child", c_spec, val.sample_shape, cfg.seed)
    freeze(parent)
    stages = build_stages(parent, child, cfg.lam, cfg.seed)
    x = T.Tensor(val.inputs[:cfg.gradcheck_batch])
    labels = val.labels[:cfg.gradcheck_batch]
    weights = LossWeights(*cfg.alphas)
    params = child.parameters() + [p for s in stages for p in s.parameters()]

    def loss():
        outs = hkt_forward(parent, child, stages, x, labels, weights, cfg.task_loss)
        return combined_loss(outs, weights)

    return loss, params


def run_grad_check(cfg: ExperimentConfig, out_dir, train, val) -> dict:
    out_dir = _begin(cfg, out_dir)
    loss, params = gradcheck_instance(cfg, val)
    err = grad_check(loss, params, cfg.gradcheck_eps)
    with T.no_grad():
        value = loss().item()
    writer = MetricsWriter(out_dir / "metrics.csv")
    writer.row(step=0, epoch=0, L_HKT=value)
    writer.close()
    passed = err < 1e-4
    entries = {
        "mode": "grad-check", "status": "complete", "seed": cfg.seed,
        "inputs_sha256": inputs_hash(cfg, train, val),
        "param_count": sum(p.size for p in params),
        "max_rel_error": repr(err), "passed": str(passed).lower(),
    }
    write_manifest(out_dir, entries)
    return entries


def _compare_job(args):
    cfg, method, out_dir, parent_file = args
    train, val = load_data(cfg)
    train_child(cfg, method, out_dir, train, val, parent_file)
    return str(out_dir)


def run_compare(cfg: ExperimentConfig, out_dir, train, val) -> list:
    """Train the parent once, then every (method, seed) child; return the run directories."""
    out_dir = _begin(cfg, out_dir)
    parent_file = _parent_for(cfg, out_dir, train, val)
    parent_acc = accuracy_native(load_checkpoint(parent_file), val)
    log.info("parent validation accuracy %.4f", parent_acc)
    jobs = []
    for method in cfg.methods:
        for seed in cfg.seeds:
            run_cfg = cfg.replace(mode=f"train-{method}", seed=seed, out=str(out_dir / method / f"seed{seed}"),
                                  parent_ckpt=str(parent_file))
            jobs.append((run_cfg, method, Path(run_cfg.out), parent_file))
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            dirs = list(pool.map(_compare_job, jobs))
    else:
        dirs = []
        for run_cfg, method, run_dir, pf in jobs:
            log.info("training %s child, seed %d", method, run_cfg.seed)
            train_child(run_cfg, method, run_dir, train, val, pf)
            dirs.append(str(run_dir))
    write_manifest(out_dir, {
        "mode": "compare", "status": "complete", "seed": cfg.seed,
        "inputs_sha256": inputs_hash(cfg, train, val, parent_file),
        "parent_checkpoint": str(parent_file), "parent_val_acc": repr(parent_acc),
        "runs": ",".join(str(Path(d).relative_to(out_dir)) for d in dirs),
    })
    return dirs


def prepare(cfg: ExperimentConfig):
    """Load data and check network compatibility without touching the output directory."""
    train, val = load_data(cfg)
    if cfg.mode not in ("eval", "grad-check"):
        build_nets(cfg, train.sample_shape, train.class_count, cfg.seed)
    return train, val


def run(cfg: ExperimentConfig) -> dict | list:
    """Execute ``cfg.mode``; everything is validated before the output directory is created."""
    train, val = prepare(cfg)
    out = Path(cfg.out)
    if cfg.mode == "train-parent":
        result = train_parent(cfg, out, train, val)
    elif cfg.mode in ("train-solo", "train-kd", "train-hkt"):
        method = cfg.mode.split("-", 1)[1]
        parent_file = _parent_for(cfg, out, train, val) if method != "solo" else None
        result = train_child(cfg, method, out, train, val, parent_file)
    elif cfg.mode == "eval":
        result = run_eval(cfg, out, train, val)
    elif cfg.mode == "grad-check":
        result = run_grad_check(cfg, out, train, val)
    else:
        result = run_compare(cfg, out, train, val)
    _dump(cfg, out, train, val)
    return result


def config_from_run(run_dir) -> ExperimentConfig:
    return parse_config(Path(run_dir) / CONFIG_ECHO)


def median_inference_seconds(net: BlockNet, x: np.ndarray, repeats: int = 5) -> float:
    """Median wall time of a native forward pass over ``x``."""
    times = []
    with T.no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            net.forward(T.Tensor(x))
            times.append(time.perf_counter() - t0)
    return float(np.median(times))

