"""Training, evaluation, benchmarking, and the ablation driver.

Metrics land in a versioned CSV (schema fngd-metrics-v1): one train row
and, when a test split exists, one test row per epoch.  Every column
except wall_ms is deterministic for a fixed config, seed, and numpy
build; wall_ms is wall-clock and marked non-deterministic in the
header.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import core, data, nn, optim
from .config import ConfigError, ModelSpec, TrainConfig

__all__ = [
    "METRICS_VERSION",
    "METRICS_COLUMNS",
    "TrainResult",
    "build_network",
    "load_datasets",
    "evaluate",
    "run_train",
    "run_bench",
    "run_ablate",
]

METRICS_VERSION = "fngd-metrics-v1"
METRICS_COLUMNS = ("epoch", "step", "split", "loss", "accuracy", "wall_ms", "optimizer")

BENCH_VERSION = "fngd-bench-v1"
ABLATE_VERSION = "fngd-ablate-v1"


def build_network(model: ModelSpec, seed: int) -> nn.Network:
    """Instantiate the layer stack with He-normal seeded weights.

    Spatial shapes flow through conv layers from model.input_shape;
    dense layers flatten whatever precedes them.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    if len(model.input_shape) == 3:
        spatial = model.input_shape
        flat = spatial[0] * spatial[1] * spatial[2]
    else:
        spatial = None
        flat = model.input_shape[0]
    layers = []
    for i, spec in enumerate(model.layers):
        if spec.kind == "relu":
            layers.append(nn.Relu())
            continue
        if spec.kind == "dense":
            in_dim, out_dim = spec.dims
            if in_dim != flat:
                raise ConfigError(
                    f"model.layer[{i}]: dense expects {in_dim} inputs but the "
                    f"previous layer provides {flat}"
                )
            layers.append(nn.Dense.create(in_dim, out_dim, rng, bias=spec.bias))
            flat, spatial = out_dim, None
            continue
        in_ch, out_ch, kernel = spec.dims
        if spatial is None:
            raise ConfigError(
                f"model.layer[{i}]: conv needs a spatial input; give model.input "
                f"as '<channels> <height> <width>'"
            )
        if in_ch != spatial[0]:
            raise ConfigError(
                f"model.layer[{i}]: conv expects {in_ch} channels but the previous "
                f"layer provides {spatial[0]}"
            )
        layer = nn.Conv2d.create(in_ch, out_ch, kernel, spec.padding,
                                 spatial[1], spatial[2], rng, bias=spec.bias)
        layers.append(layer)
        spatial = (out_ch, layer.out_h, layer.out_w)
        flat = layer.flat_out
    return nn.Network(layers, model.loss)


def load_datasets(cfg: TrainConfig) -> tuple[data.Dataset, data.Dataset | None]:
    """Training split plus an optional held-out split.

    Synthetic data draws n + test_n samples in one seeded pass (shared
    cluster means) and cuts off the tail as the test set.
    """
    ds = cfg.dataset
    if ds.kind == "synthetic":
        total = ds.n + ds.test_n
        full = data.synthetic_classification(total, ds.features, ds.classes, cfg.seed)
        if ds.test_n == 0:
            return full, None
        return data.split(full, ds.n)
    inputs = data.load_idx(ds.images)
    labels = data.load_idx(ds.labels)
    if ds.limit is not None:
        inputs, labels = inputs[:, : ds.limit], labels[: ds.limit]
    train = data.Dataset(inputs, labels, num_classes=ds.classes)
    test = None
    if ds.test_images:
        test = data.Dataset(data.load_idx(ds.test_images), data.load_idx(ds.test_labels),
                            num_classes=ds.classes)
    return train, test


def evaluate(net: nn.Network, ds: data.Dataset) -> tuple[float, float | None]:
    """Full-pass loss and, for classification, top-1 accuracy."""
    outputs = nn.forward(net, ds.inputs).outputs
    loss = nn.loss_value(net.loss, outputs, ds.targets)
    if not ds.is_classification:
        return loss, None
    acc = float((outputs.argmax(axis=0) == ds.targets).mean())
    return loss, acc


def _take_targets(targets: np.ndarray, idx: np.ndarray):
    return targets[idx] if targets.ndim == 1 else targets[:, idx]


class _Runner:
    """Binds one optimizer kind to its state for the epoch loop."""

    def __init__(self, cfg: TrainConfig, net: nn.Network,
                 table: core.CoefficientTable | None = None):
        self.cfg = cfg
        self.net = net
        self.kind = cfg.optim.kind
        o = cfg.optim
        self.rule = core.DampingRule(alpha=o.alpha, floor=o.lam_floor, fixed=o.fixed_damping)
        self.state = None
        self.table = None
        self.mods = None
        if self.kind in ("fngd", "fngd_explicit"):
            self.table = table if table is not None else core.CoefficientTable()
            if o.fngd_momentum or o.fngd_weight_decay:
                self.mods = core.PostModifiers(o.fngd_momentum, o.fngd_weight_decay)
        elif table is not None:
            raise ValueError(f"a coefficient table only applies to fngd, not {self.kind}")
        if self.kind == "sgd_momentum":
            self.state = optim.MomentumState(beta=o.momentum)
        elif self.kind == "adamw":
            self.state = optim.AdamWState(beta1=o.beta1, beta2=o.beta2, eps=o.eps,
                                          weight_decay=o.weight_decay)

    def step(self, x: np.ndarray, y, lr: float) -> float:
        if self.kind in ("fngd", "fngd_explicit"):
            explicit = self.kind == "fngd_explicit"
            if not self.table.finalized:
                return core.epoch_one_step(self.net, x, y, self.table, lr, self.rule,
                                           mods=self.mods, explicit_u=explicit)
            return core.shared_step(self.net, x, y, self.table, lr,
                                    mods=self.mods, explicit_u=explicit)
        if self.kind == "ngd_smw":
            return optim.ngd_smw_step(self.net, x, y, lr, self.rule)
        fwd = nn.forward(self.net, x)
        bwd = nn.backward(self.net, fwd, y)
        grads = nn.weight_gradients(self.net, fwd)
        grads.update(bwd.bias_grads)
        params = self.net.parameters()
        if self.kind == "sgd":
            optim.sgd_step(params, grads, lr)
        elif self.kind == "sgd_momentum":
            optim.sgd_momentum_step(self.state, params, grads, lr)
        else:
            optim.adamw_step(self.state, params, grads, lr)
        return bwd.loss

    def end_epoch(self) -> None:
        if self.table is not None and not self.table.finalized:
            self.table.finalize()


class _MetricsWriter:
    def __init__(self, path: Path, kind: str):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.kind = kind
        self.fh = open(path, "w", newline="")
        self.fh.write(f"# {METRICS_VERSION} wall_ms=nondeterministic\n")
        self.fh.write(",".join(METRICS_COLUMNS) + "\n")
        self.fh.flush()

    def row(self, epoch: int, step: int, split: str, loss: float,
            accuracy: float | None, wall_ms: float) -> None:
        acc = "" if accuracy is None else repr(float(accuracy))
        self.fh.write(
            f"{epoch},{step},{split},{float(loss)!r},{acc},{float(wall_ms)!r},{self.kind}\n"
        )
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


@dataclass
class TrainResult:
    metrics_path: Path | None
    final: dict[str, float]
    epoch_times_ms: list[float]
    net: nn.Network
    table: core.CoefficientTable | None


def _dump_grams(net: nn.Network, x: np.ndarray, y, out_dir: Path) -> None:
    from . import persample

    fwd = nn.forward(net, x)
    nn.backward(net, fwd, y)
    for i in net.preconditioned():
        cap = fwd.captures[i]
        if cap.kind == "dense":
            stats = persample.gram_dense(cap)
        else:
            stats = persample.gram_conv(persample.build_u_conv(cap), layer=i)
        persample.write_gram_csv(stats, out_dir / f"gram_layer{i}.csv")


def _train_loop(cfg: TrainConfig, train_ds: data.Dataset,
                test_ds: data.Dataset | None, writer: _MetricsWriter | None,
                table: core.CoefficientTable | None = None,
                log=None) -> TrainResult:
    net = build_network(cfg.model, cfg.seed)
    if train_ds.feature_dim != net.in_dim:
        raise ConfigError(
            f"model.input: network expects {net.in_dim} features, dataset "
            f"provides {train_ds.feature_dim}"
        )
    runner = _Runner(cfg, net, table)
    sched = optim.make_lr_schedule(cfg.optim.lr, cfg.epochs, cfg.milestones, cfg.lr_decay)
    if cfg.gram_dump_dir is not None and runner.kind in ("fngd", "fngd_explicit", "ngd_smw"):
        first = data.batches(train_ds.n, cfg.batch_size, cfg.seed)[0]
        _dump_grams(net, train_ds.inputs[:, first],
                    _take_targets(train_ds.targets, first), cfg.gram_dump_dir)

    times: list[float] = []
    steps_done = 0
    final: dict[str, float] = {}
    for epoch in range(cfg.epochs):
        lr = optim.schedule_lr(sched, epoch)
        plan = data.batches(train_ds.n, cfg.batch_size, cfg.seed + epoch)
        start = time.perf_counter()
        loss_sum = 0.0
        for idx in plan:
            loss_sum += runner.step(train_ds.inputs[:, idx],
                                    _take_targets(train_ds.targets, idx), lr)
            steps_done += 1
        runner.end_epoch()
        wall_ms = (time.perf_counter() - start) * 1e3
        times.append(wall_ms)

        mean_loss = loss_sum / max(len(plan), 1)
        _, train_acc = evaluate(net, train_ds)
        final["train_loss"] = mean_loss
        if train_acc is not None:
            final["train_accuracy"] = train_acc
        if writer is not None:
            writer.row(epoch + 1, steps_done, "train", mean_loss, train_acc, wall_ms)
        line = f"epoch {epoch + 1}/{cfg.epochs} loss={mean_loss:.6f}"
        if test_ds is not None:
            t0 = time.perf_counter()
            test_loss, test_acc = evaluate(net, test_ds)
            eval_ms = (time.perf_counter() - t0) * 1e3
            final["test_loss"] = test_loss
            if test_acc is not None:
                final["test_accuracy"] = test_acc
            if writer is not None:
                writer.row(epoch + 1, steps_done, "test", test_loss, test_acc, eval_ms)
            if test_acc is not None:
                line += f" test_acc={test_acc:.4f}"
        if log is not None:
            log(line + f" ({wall_ms:.1f} ms)")
    return TrainResult(None, final, times, net, runner.table)


def run_train(cfg: TrainConfig, save_coeffs=None, load_coeffs=None,
              log=None) -> TrainResult:
    """Train once per the config; write metrics and optional coefficients."""
    if load_coeffs is not None and cfg.optim.kind not in ("fngd", "fngd_explicit"):
        raise ValueError(f"loaded coefficients only apply to fngd, not {cfg.optim.kind}")
    table = core.CoefficientTable.load(load_coeffs) if load_coeffs else None
    train_ds, test_ds = load_datasets(cfg)
    writer = _MetricsWriter(cfg.metrics_path, cfg.optim.kind)
    try:
        result = _train_loop(cfg, train_ds, test_ds, writer, table=table, log=log)
    finally:
        writer.close()
    result.metrics_path = cfg.metrics_path

    coeffs_out = save_coeffs if save_coeffs is not None else cfg.coeffs_path
    if coeffs_out is not None and result.table is not None:
        result.table.save(coeffs_out)
        if log is not None:
            log(f"coefficients saved to {coeffs_out}")
    if log is not None:
        log("final: " + " ".join(f"{k}={v:.6f}" for k, v in sorted(result.final.items())))
    return result


BENCH_KINDS = ("sgd", "fngd", "ngd_smw", "fngd_explicit")


def _with_kind(cfg: TrainConfig, kind: str, **optim_fields) -> TrainConfig:
    return replace(cfg, optim=replace(cfg.optim, kind=kind, **optim_fields))


def run_bench(cfg: TrainConfig, log=None) -> Path:
    """Per-epoch wall time for sgd, fngd (both phases), recompute ngd,
    and the explicit-U route, all on identical data and init.

    Writes schema fngd-bench-v1: optimizer, phase, epochs_timed,
    median_epoch_ms, ratio_vs_sgd.
    """
    if cfg.epochs < 4:
        raise ValueError(f"bench needs at least 4 epochs for stable medians, got {cfg.epochs}")
    train_ds, test_ds = load_datasets(cfg)
    rows = []
    sgd_median = None
    for kind in BENCH_KINDS:
        result = _train_loop(_with_kind(cfg, kind), train_ds, test_ds, writer=None)
        times = result.epoch_times_ms
        if kind in ("fngd", "fngd_explicit"):
            phases = [("epoch1", [times[0]]), ("shared", times[1:])]
        else:
            phases = [("all", times)]
        for phase, sample in phases:
            med = statistics.median(sample)
            rows.append([kind, phase, len(sample), med])
            if kind == "sgd":
                sgd_median = med
    out = cfg.bench_path
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        fh.write(f"# {BENCH_VERSION} median_epoch_ms=nondeterministic\n")
        fh.write("optimizer,phase,epochs_timed,median_epoch_ms,ratio_vs_sgd\n")
        for kind, phase, n_timed, med in rows:
            ratio = med / sgd_median
            fh.write(f"{kind},{phase},{n_timed},{med:.3f},{ratio:.3f}\n")
            if log is not None:
                log(f"{kind:14s} {phase:7s} median {med:9.2f} ms  {ratio:5.2f}x sgd")
    return out


ABLATE_VARIANTS = (
    ("full", "fngd", {}),
    ("no_sharing", "ngd_smw", {}),
    ("no_acceleration", "fngd_explicit", {}),
    ("fixed_damping", "fngd", {"fixed_damping": 0.3}),
)


def run_ablate(cfg: TrainConfig, log=None) -> Path:
    """Train each design variant to completion on identical data.

    Writes schema fngd-ablate-v1 with one row per variant: final test
    accuracy, median per-epoch time, and the time ratio against the
    full method.
    """
    train_ds, test_ds = load_datasets(cfg)
    measured = []
    for name, kind, fields in ABLATE_VARIANTS:
        result = _train_loop(_with_kind(cfg, kind, **fields), train_ds, test_ds,
                             writer=None)
        med = statistics.median(result.epoch_times_ms)
        acc = result.final.get("test_accuracy", result.final.get("train_accuracy"))
        measured.append([name, kind, acc, med])
    base = measured[0][3]
    out = cfg.ablate_path
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        fh.write(f"# {ABLATE_VERSION} median_epoch_ms=nondeterministic\n")
        fh.write("variant,optimizer,final_test_accuracy,median_epoch_ms,time_ratio_vs_full\n")
        for name, kind, acc, med in measured:
            acc_s = "" if acc is None else f"{acc:.4f}"
            fh.write(f"{name},{kind},{acc_s},{med:.3f},{med / base:.3f}\n")
            if log is not None:
                log(f"{name:16s} acc={acc_s:6s} median {med:9.2f} ms  {med / base:5.2f}x full")
    return out
