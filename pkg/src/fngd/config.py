"""Run configuration: a line-oriented text format and its typed form.

Grammar, in full:

* blank lines and lines starting with ``#`` or ``;`` are ignored;
* ``[section]`` opens a section; every key needs one;
* everything else must be ``key = value`` (first ``=`` splits);
* repeating a key appends, so list-valued keys (``layer``) just repeat.

Values are plain strings until the typed loader casts them; errors out
of the loader always name ``section.key``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

__all__ = [
    "ConfigError",
    "parse_config",
    "parse_config_file",
    "LayerSpec",
    "ModelSpec",
    "DatasetSpec",
    "OptimSpec",
    "TrainConfig",
    "load_train_config",
]

OPTIMIZERS = ("sgd", "sgd_momentum", "adamw", "ngd_smw", "fngd", "fngd_explicit")


class ConfigError(ValueError):
    pass


def parse_config(text: str, where: str = "<config>") -> dict[str, dict[str, list[str]]]:
    sections: dict[str, dict[str, list[str]]] = {}
    current: dict[str, list[str]] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"{where}:{lineno}: empty section name")
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{lineno}: expected 'key = value', got {line!r}")
        if current is None:
            raise ConfigError(f"{where}:{lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        current.setdefault(key.strip(), []).append(value.strip())
    return sections


def parse_config_file(path) -> dict[str, dict[str, list[str]]]:
    path = Path(path)
    return parse_config(path.read_text(), where=str(path))


@dataclass(frozen=True)
class LayerSpec:
    kind: str                        # dense | conv | relu
    dims: tuple[int, ...] = ()       # dense: (in, out); conv: (in_ch, out_ch, kernel)
    padding: str = "same"
    bias: bool = True


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]     # (features,) or (channels, height, width)
    layers: tuple[LayerSpec, ...]
    loss: str = "cross_entropy"


@dataclass(frozen=True)
class DatasetSpec:
    kind: str                        # synthetic | idx
    n: int = 2000
    features: int = 20
    classes: int = 2
    test_n: int = 400
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    limit: int | None = None


@dataclass(frozen=True)
class OptimSpec:
    kind: str
    lr: float = 0.1
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    alpha: float = 0.005
    lam_floor: float = 1e-12
    fixed_damping: float | None = None
    fngd_momentum: float = 0.0
    fngd_weight_decay: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    dataset: DatasetSpec
    model: ModelSpec
    optim: OptimSpec
    epochs: int
    batch_size: int
    seed: int
    lr_decay: float = 0.1
    milestones: tuple[float, ...] = (0.5, 0.75)
    metrics_path: Path = Path("out/metrics.csv")
    coeffs_path: Path | None = None
    gram_dump_dir: Path | None = None
    bench_path: Path = Path("out/bench.csv")
    ablate_path: Path = Path("out/ablate.csv")


_REQUIRED = object()


def _one(sections, section: str, key: str, default=_REQUIRED, cast=str):
    values = sections.get(section, {}).get(key)
    if values is None:
        if default is _REQUIRED:
            raise ConfigError(f"{section}.{key}: required key is missing")
        return default
    if len(values) > 1:
        raise ConfigError(f"{section}.{key}: given {len(values)} times, expected once")
    try:
        return cast(values[0])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{key}: bad value {values[0]!r} ({exc})") from exc


def _boolean(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_layer(raw: str, index: int) -> LayerSpec:
    where = f"model.layer[{index}]"
    parts = raw.split()
    if not parts:
        raise ConfigError(f"{where}: empty layer line")
    kind = parts[0]
    rest = parts[1:]
    bias = True
    if rest and rest[-1] == "nobias":
        bias = False
        rest = rest[:-1]
    if kind == "relu":
        if rest:
            raise ConfigError(f"{where}: relu takes no arguments, got {raw!r}")
        return LayerSpec("relu")
    if kind == "dense":
        if len(rest) != 2:
            raise ConfigError(f"{where}: expected 'dense <in> <out> [nobias]', got {raw!r}")
        try:
            dims = (int(rest[0]), int(rest[1]))
        except ValueError as exc:
            raise ConfigError(f"{where}: bad dimension in {raw!r}") from exc
        if min(dims) < 1:
            raise ConfigError(f"{where}: dimensions must be positive, got {dims}")
        return LayerSpec("dense", dims, bias=bias)
    if kind == "conv":
        if len(rest) not in (3, 4):
            raise ConfigError(
                f"{where}: expected 'conv <in_ch> <out_ch> <kernel> [same|valid] [nobias]', "
                f"got {raw!r}"
            )
        padding = "same"
        if len(rest) == 4:
            padding = rest[3]
            if padding not in ("same", "valid"):
                raise ConfigError(f"{where}: padding must be same or valid, got {padding!r}")
        try:
            dims = (int(rest[0]), int(rest[1]), int(rest[2]))
        except ValueError as exc:
            raise ConfigError(f"{where}: bad dimension in {raw!r}") from exc
        if min(dims) < 1:
            raise ConfigError(f"{where}: dimensions must be positive, got {dims}")
        return LayerSpec("conv", dims, padding=padding, bias=bias)
    raise ConfigError(f"{where}: unknown layer kind {kind!r}")


def _parse_model(sections) -> ModelSpec:
    model = sections.get("model")
    if not model:
        raise ConfigError("model: section is missing")
    raw_input = _one(sections, "model", "input")
    try:
        shape = tuple(int(p) for p in raw_input.split())
    except ValueError as exc:
        raise ConfigError(f"model.input: bad shape {raw_input!r}") from exc
    if len(shape) not in (1, 3) or min(shape) < 1:
        raise ConfigError(
            f"model.input: expected '<features>' or '<channels> <height> <width>', "
            f"got {raw_input!r}"
        )
    raw_layers = model.get("layer")
    if not raw_layers:
        raise ConfigError("model.layer: need at least one layer")
    layers = tuple(_parse_layer(raw, i) for i, raw in enumerate(raw_layers))
    loss = _one(sections, "model", "loss", default="cross_entropy")
    if loss not in ("cross_entropy", "squared_error"):
        raise ConfigError(f"model.loss: unknown loss {loss!r}")
    return ModelSpec(shape, layers, loss)


def _parse_dataset(sections) -> DatasetSpec:
    kind = _one(sections, "dataset", "kind", default="synthetic")
    if kind not in ("synthetic", "idx"):
        raise ConfigError(f"dataset.kind: expected synthetic or idx, got {kind!r}")
    spec = DatasetSpec(
        kind=kind,
        n=_one(sections, "dataset", "n", default=2000, cast=int),
        features=_one(sections, "dataset", "features", default=20, cast=int),
        classes=_one(sections, "dataset", "classes", default=2, cast=int),
        test_n=_one(sections, "dataset", "test_n", default=400, cast=int),
        images=_one(sections, "dataset", "images", default=None),
        labels=_one(sections, "dataset", "labels", default=None),
        test_images=_one(sections, "dataset", "test_images", default=None),
        test_labels=_one(sections, "dataset", "test_labels", default=None),
        limit=_one(sections, "dataset", "limit", default=None,
                   cast=lambda s: int(s)),
    )
    if kind == "synthetic":
        if spec.n < 1:
            raise ConfigError(f"dataset.n: must be positive, got {spec.n}")
        if spec.classes < 2:
            raise ConfigError(f"dataset.classes: need at least 2, got {spec.classes}")
        if spec.test_n < 0:
            raise ConfigError(f"dataset.test_n: must be non-negative, got {spec.test_n}")
    else:
        if not spec.images:
            raise ConfigError("dataset.images: required for idx datasets")
        if not spec.labels:
            raise ConfigError("dataset.labels: required for idx datasets")
        for key in ("images", "labels", "test_images", "test_labels"):
            value = getattr(spec, key)
            if value and not Path(value).exists():
                raise ConfigError(f"dataset.{key}: file not found: {value}")
        if (spec.test_images is None) != (spec.test_labels is None):
            raise ConfigError("dataset.test_images/test_labels: give both or neither")
    return spec


def load_train_config(path, out_dir=None,
                      expect_loaded_coeffs: bool = False) -> TrainConfig:
    """Parse and validate a full training config.

    out_dir, when given, redirects every output path into that
    directory (file names kept); expect_loaded_coeffs relaxes the
    two-epoch minimum since a preloaded table skips the coefficient
    phase.
    """
    sections = parse_config_file(path)
    dataset = _parse_dataset(sections)
    model = _parse_model(sections)

    kind = _one(sections, "train", "optimizer", default="fngd")
    if kind not in OPTIMIZERS:
        raise ConfigError(f"train.optimizer: unknown optimizer {kind!r}")
    optim = OptimSpec(
        kind=kind,
        lr=_one(sections, "train", "lr", default=0.1, cast=float),
        momentum=_one(sections, "train", "momentum", default=0.9, cast=float),
        beta1=_one(sections, "train", "beta1", default=0.9, cast=float),
        beta2=_one(sections, "train", "beta2", default=0.999, cast=float),
        eps=_one(sections, "train", "eps", default=1e-8, cast=float),
        weight_decay=_one(sections, "train", "weight_decay", default=0.0, cast=float),
        alpha=_one(sections, "train", "alpha", default=0.005, cast=float),
        lam_floor=_one(sections, "train", "lam_floor", default=1e-12, cast=float),
        fixed_damping=_one(sections, "train", "fixed_damping", default=None, cast=float),
        fngd_momentum=_one(sections, "train", "fngd_momentum", default=0.0, cast=float),
        fngd_weight_decay=_one(sections, "train", "fngd_weight_decay", default=0.0,
                               cast=float),
    )
    if optim.lr <= 0.0:
        raise ConfigError(f"train.lr: must be positive, got {optim.lr}")
    if optim.alpha <= 0.0:
        raise ConfigError(f"train.alpha: must be positive, got {optim.alpha}")

    epochs = _one(sections, "train", "epochs", default=_REQUIRED, cast=int)
    batch_size = _one(sections, "train", "batch_size", default=_REQUIRED, cast=int)
    seed = _one(sections, "train", "seed", default=0, cast=int)
    if epochs < 1:
        raise ConfigError(f"train.epochs: must be positive, got {epochs}")
    if batch_size < 1:
        raise ConfigError(f"train.batch_size: must be positive, got {batch_size}")

    preconditioned = kind in ("fngd", "fngd_explicit", "ngd_smw")
    if preconditioned and batch_size < 2:
        raise ConfigError(
            f"train.batch_size: {kind} needs at least 2 samples per batch, got {batch_size}"
        )
    if kind in ("fngd", "fngd_explicit") and epochs < 2 and not expect_loaded_coeffs:
        raise ConfigError(
            f"train.epochs: {kind} needs at least 2 epochs (epoch one computes "
            f"the shared coefficients), got {epochs}"
        )

    lr_decay = _one(sections, "train", "lr_decay", default=0.1, cast=float)
    raw_stones = _one(sections, "train", "milestones", default="0.5 0.75")
    try:
        milestones = tuple(float(p) for p in raw_stones.split())
    except ValueError as exc:
        raise ConfigError(f"train.milestones: bad value {raw_stones!r}") from exc
    if any(not 0.0 < s < 1.0 for s in milestones):
        raise ConfigError(f"train.milestones: fractions must be in (0, 1): {milestones}")
    if not 0.0 < lr_decay <= 1.0:
        raise ConfigError(f"train.lr_decay: must be in (0, 1], got {lr_decay}")

    metrics_path = Path(_one(sections, "output", "metrics", default="out/metrics.csv"))
    bench_path = Path(_one(sections, "output", "bench", default="out/bench.csv"))
    ablate_path = Path(_one(sections, "output", "ablate", default="out/ablate.csv"))
    raw_coeffs = _one(sections, "output", "coeffs", default=None)
    coeffs_path = Path(raw_coeffs) if raw_coeffs else None
    raw_dump = _one(sections, "output", "gram_dump", default=None)
    gram_dump_dir = Path(raw_dump) if raw_dump else None
    if out_dir is not None:
        out_dir = Path(out_dir)
        metrics_path = out_dir / metrics_path.name
        bench_path = out_dir / bench_path.name
        ablate_path = out_dir / ablate_path.name
        if coeffs_path is not None:
            coeffs_path = out_dir / coeffs_path.name
        if gram_dump_dir is not None:
            gram_dump_dir = out_dir / gram_dump_dir.name

    return TrainConfig(
        dataset=dataset,
        model=model,
        optim=optim,
        epochs=epochs,
        batch_size=batch_size,
        seed=seed,
        lr_decay=lr_decay,
        milestones=milestones,
        metrics_path=metrics_path,
        coeffs_path=coeffs_path,
        gram_dump_dir=gram_dump_dir,
        bench_path=bench_path,
        ablate_path=ablate_path,
    )
