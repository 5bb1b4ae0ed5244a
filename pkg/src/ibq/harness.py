"""Experiment orchestration: configs, presets, repetitions, retries.

A repetition is fully determined by ``(config, master_seed, repetition
index, attempt)``; every random draw inside it comes from seeds derived
from those values with :func:`ibq.rng.derive_seed`.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import data as data_mod
from . import infoplane as ip
from . import qnet
from .rng import derive_seed

log = logging.getLogger(__name__)

RETRY_OFFSET = 1 << 32
DEFAULT_RETRY_THRESHOLD = 0.55
DEFAULT_MAX_RETRIES = 10
DEFAULT_MNIST_DIR = "data/mnist"
MI_MODES = ("exact", "binned", "both")

SYN_HIDDEN = (10, 7, 5, 4, 3)


class ConfigError(ValueError):
    pass


class UnknownPresetError(KeyError):
    def __str__(self):
        return f"unknown preset {self.args[0]!r}"


class RetryBudgetExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: dict  # {"kind": "synthetic", "seed": 0, "path": None} | {"kind": "mnist", "dir": ...}
    layers: tuple  # LayerSpec dicts, input to output
    input_shape: tuple
    quant_bits: int | None = 8
    epochs: int = 8000
    repetitions: int = 50
    mi_mode: str = "exact"
    bins: int | None = None
    bounds_policy: str = "standard"  # tanh [-1,1], softmax [0,1], relu [0, max over the run]
    bin_quantized: bool = False
    mi_stride: int = 1
    prefit_epochs: int = 0
    retry_threshold: float | None = DEFAULT_RETRY_THRESHOLD
    max_retries: int = DEFAULT_MAX_RETRIES
    master_seed: int = 0
    batch_size: int = 256
    lr: float = 1e-4
    train_fraction: float = 0.8
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(dict(x) for x in self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    def validate(self) -> None:
        if self.repetitions < 1 or self.epochs < 1 or self.mi_stride < 1:
            raise ConfigError("repetitions, epochs and mi_stride must all be >= 1")
        if self.prefit_epochs < 0:
            raise ConfigError("prefit_epochs must be >= 0")
        if self.mi_mode not in MI_MODES:
            raise ConfigError(f"mi_mode must be one of {MI_MODES}")
        if self.mi_mode in ("binned", "both"):
            if not self.bins or self.bins < 1:
                raise ConfigError("binned MI needs bins >= 1")
            if self.bounds_policy != "standard":
                raise ConfigError(f"unknown bounds policy {self.bounds_policy!r}")
            if self.mi_mode == "binned" and self.quant_bits is not None and not self.bin_quantized:
                raise ConfigError("binning quantized activations needs bin_quantized=true")
        if self.mi_mode in ("exact", "both") and self.quant_bits is None:
            raise ConfigError("exact MI needs quantization (quant_bits is off)")
        if self.dataset.get("kind") not in ("synthetic", "mnist"):
            raise ConfigError(f"unknown dataset kind {self.dataset.get('kind')!r}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")
        try:
            self.network_spec().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def network_spec(self, seed: int = 0) -> qnet.NetworkSpec:
        return qnet.NetworkSpec(
            tuple(qnet.LayerSpec.from_dict(x) for x in self.layers),
            self.input_shape, self.quant_bits, seed,
        )

    @property
    def total_epochs(self) -> int:
        return self.prefit_epochs + self.epochs

    def logged_epochs(self) -> list[int]:
        """Epoch numbers (1-based, prefit included) at which MI is measured."""
        total = self.total_epochs
        out = list(range(1, total + 1, self.mi_stride))
        if out[-1] != total:
            out.append(total)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [dict(x) for x in self.layers]
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        d = json.load(f)
    cfg = ExperimentConfig.from_dict(d)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# presets


def _dense_layers(hidden, activation, num_classes):
    layers = [qnet.dense(w, activation) for w in hidden] + [qnet.dense(num_classes, "softmax")]
    return tuple(layer.to_dict() for layer in layers)


def _mnist_dataset():
    return {"kind": "mnist", "dir": os.environ.get("IBQ_MNIST_DIR", DEFAULT_MNIST_DIR)}


def _build_presets() -> dict:
    presets = {}
    syn = {"kind": "synthetic", "seed": 0, "path": None}
    for act in ("tanh", "relu"):
        tag = act.upper()
        base = ExperimentConfig(
            name=f"SYN-{tag}-8BIT", dataset=syn, layers=_dense_layers(SYN_HIDDEN, act, 2),
            input_shape=(12,), quant_bits=8, epochs=8000, repetitions=50,
        )
        presets[base.name] = base
        for bits in (4, 32):
            presets[f"SYN-{tag}-{bits}BIT"] = replace(
                base, name=f"SYN-{tag}-{bits}BIT", quant_bits=bits, repetitions=30)
        for m in (30, 100, 256):
            presets[f"SYN-{tag}-BINS-{m}"] = replace(
                base, name=f"SYN-{tag}-BINS-{m}", quant_bits=None, mi_mode="binned", bins=m)
        presets[f"SYN-{tag}-PREFIT"] = replace(
            base, name=f"SYN-{tag}-PREFIT", repetitions=20, prefit_epochs=1000)
    mnist_archs = {
        "MNIST-BN2": (16, 8, 4, 2),
        "MNIST-BN4": (16, 12, 8, 4),
        "MNIST-HOURGLASS": (16, 8, 4, 2, 4, 8),
        "MNIST-4x10": (10, 10, 10, 10),
    }
    for name, hidden in mnist_archs.items():
        presets[name] = ExperimentConfig(
            name=name, dataset=_mnist_dataset(), layers=_dense_layers(hidden, "relu", 10),
            input_shape=(784,), quant_bits=8, epochs=3000, repetitions=20,
        )
    conv_layers = (
        qnet.conv(3, 3, 2, "relu"), qnet.maxpool(2, 2),
        qnet.conv(3, 3, 2, "relu"), qnet.maxpool(2, 2),
        qnet.flatten(), qnet.dense(20, "relu"), qnet.dense(10, "softmax"),
    )
    presets["MNIST-CONV"] = ExperimentConfig(
        name="MNIST-CONV", dataset=_mnist_dataset(),
        layers=tuple(x.to_dict() for x in conv_layers), input_shape=(1, 28, 28),
        quant_bits=8, epochs=3000, repetitions=20,
    )
    return presets


def preset_names() -> list[str]:
    return list(_build_presets())


def preset(name: str) -> ExperimentConfig:
    presets = _build_presets()
    if name not in presets:
        raise UnknownPresetError(name)
    return presets[name]


def desk_scale(config: ExperimentConfig, factor: float) -> ExperimentConfig:
    """Shrink repetitions and epochs (each at least 1) by ``factor``."""
    if not (0.0 < factor <= 1.0) or math.isnan(factor):
        raise ConfigError(f"scale factor must be in (0, 1], got {factor}")
    if factor == 1.0:
        return config
    scale = lambda v: max(1, math.floor(v * factor + 0.5))
    meta = dict(config.metadata)
    meta["desk_scale"] = factor
    return replace(
        config,
        repetitions=scale(config.repetitions),
        epochs=scale(config.epochs),
        prefit_epochs=scale(config.prefit_epochs) if config.prefit_epochs else 0,
        metadata=meta,
    )


# ---------------------------------------------------------------------------
# running


def load_dataset(spec: dict) -> data_mod.Dataset:
    if spec["kind"] == "synthetic":
        if spec.get("path"):
            return data_mod.load_synthetic(spec["path"])
        return data_mod.gen_synthetic(int(spec.get("seed", 0)))
    ds = data_mod.load_mnist(spec["dir"])
    if spec.get("subset"):
        ds = ds.subset(np.arange(int(spec["subset"])), ds.name)
    return ds


def repetition_seed(master_seed: int, rep: int, attempt: int = 0) -> int:
    return derive_seed(master_seed, rep + attempt * RETRY_OFFSET)


def prefit_random_labels(network, dataset, epochs: int, seed: int, quant=None,
                         batch_size: int = 256, lr: float = 1e-4, on_epoch=None):
    """Train on a label-shuffled copy of ``dataset`` for ``epochs`` epochs.

    ``on_epoch(epoch, stats)`` is called after each epoch (1-based) so callers
    can measure MI against the true labels meanwhile.
    """
    quant = quant if quant is not None else qnet.QuantState.for_spec(network.spec)
    shuffled = data_mod.shuffle_labels(dataset, derive_seed(seed, 4))
    for e in range(1, epochs + 1):
        stats = qnet.train_epoch(network, shuffled, quant, batch_size, lr, derive_seed(seed, 3), e)
        if on_epoch is not None:
            on_epoch(e, stats)
    return network


def _training_run(config: ExperimentConfig, dataset, seed: int, keep_continuous: bool):
    """Yield ``(epoch, record, stats, split)`` after every logged epoch."""
    spec = config.network_spec(seed)
    sp = data_mod.split(dataset, config.train_fraction, derive_seed(seed, 1))
    net = qnet.init_network(spec, derive_seed(seed, 2))
    quant = qnet.QuantState.for_spec(spec)
    logged = set(config.logged_epochs())
    train_seed = derive_seed(seed, 3)
    shuffled = (data_mod.shuffle_labels(sp.train, derive_seed(seed, 4))
                if config.prefit_epochs else None)
    for e in range(1, config.total_epochs + 1):
        train_data = shuffled if e <= config.prefit_epochs else sp.train
        stats = qnet.train_epoch(net, train_data, quant, config.batch_size, config.lr, train_seed, e)
        if e in logged:
            rec = qnet.record_states(net, dataset, quant, keep_continuous=keep_continuous, epoch=e)
            yield e, rec, stats, sp


def _accuracies(rec, labels, sp):
    pred = rec.probs.argmax(axis=1)
    hit = pred == labels
    return float(hit[sp.train_indices].mean()), float(hit[sp.test_indices].mean())


def run_repetition(config: ExperimentConfig, dataset, rep: int, attempt: int = 0,
                   on_record=None) -> ip.InfoTrajectory:
    """Train one repetition and measure MI at every logged epoch.

    ``on_record(rep, attempt, epoch, record)`` is called with each StateRecord
    of the first pass, e.g. for extra instrumentation.
    """
    seed = repetition_seed(config.master_seed, rep, attempt)
    labels = dataset.labels
    binned = config.mi_mode in ("binned", "both")
    exact = config.mi_mode in ("exact", "both")
    activations = config.network_spec().activations
    needs_replay = binned and "relu" in activations

    epochs, xt, ty, bxt, bty, tr_acc, te_acc, losses = [], [], [], [], [], [], [], []
    relu_max = [0.0 if a == "relu" else None for a in activations]
    dead = []
    for e, rec, stats, sp in _training_run(config, dataset, seed, keep_continuous=binned):
        epochs.append(e)
        if on_record is not None:
            on_record(rep, attempt, e, rec)
        a_tr, a_te = _accuracies(rec, labels, sp)
        tr_acc.append(a_tr)
        te_acc.append(a_te)
        losses.append(float(stats.loss))
        if exact:
            x, y = ip.mi_exact(rec, labels)
            xt.append(x)
            ty.append(y)
        if binned:
            conts = rec.continuous
            for j, a in enumerate(activations):
                if a == "relu":
                    relu_max[j] = max(relu_max[j], float(conts[j].max()))
            if not needs_replay:
                x, y = ip.mi_binned(conts, labels, config.bins, ip.binning_bounds(activations))
                bxt.append(x)
                bty.append(y)
        dead = qnet.detect_dead_layer(rec)

    if needs_replay:
        # relu bin edges depend on the maximum over the whole run, so the
        # (deterministic) run is replayed once that maximum is known
        bounds = ip.binning_bounds(activations, relu_max)
        for k, (e, rec, _, sp) in enumerate(_training_run(config, dataset, seed, keep_continuous=True)):
            if _accuracies(rec, labels, sp) != (tr_acc[k], te_acc[k]):
                raise RuntimeError("replayed run diverged from the original")
            x, y = ip.mi_binned(rec.continuous, labels, config.bins, bounds)
            bxt.append(x)
            bty.append(y)

    meta = {"rep": rep, "attempt": attempt, "seed": seed, "dead_layers": dead}
    if binned:
        meta["bin_bounds"] = ip.binning_bounds(activations, relu_max if "relu" in activations else None)
    arr = lambda v: np.array(v, dtype=np.float64)
    if exact:
        traj = ip.InfoTrajectory(rep, np.array(epochs), arr(xt), arr(ty), arr(tr_acc), arr(te_acc), arr(losses), meta)
        if binned:
            traj.binned_i_xt, traj.binned_i_ty = arr(bxt), arr(bty)
    else:
        traj = ip.InfoTrajectory(rep, np.array(epochs), arr(bxt), arr(bty), arr(tr_acc), arr(te_acc), arr(losses), meta)
    return traj


def _run_with_retries(config: ExperimentConfig, dataset, rep: int, on_record=None):
    retry_log = []
    for attempt in range(config.max_retries + 1):
        traj = run_repetition(config, dataset, rep, attempt, on_record)
        final = float(traj.test_acc[-1])
        if config.retry_threshold is None or final >= config.retry_threshold:
            return traj, retry_log
        reason = "test accuracy below threshold"
        if traj.metadata["dead_layers"]:
            reason += f"; dead relu layers {traj.metadata['dead_layers']}"
        retry_log.append({
            "repetition": rep, "attempt": attempt, "seed": traj.metadata["seed"],
            "final_test_accuracy": final, "reason": reason,
        })
        log.info("repetition %d attempt %d: accuracy %.4f < %.2f, retrying",
                 rep, attempt, final, config.retry_threshold)
    raise RetryBudgetExhausted(
        f"repetition {rep} stayed below accuracy {config.retry_threshold} "
        f"after {config.max_retries} retries"
    )


_WORKER_DATASET = None


def _worker_init(dataset_spec):
    global _WORKER_DATASET
    _WORKER_DATASET = load_dataset(dataset_spec)


def _worker_run(args):
    config, rep = args
    return _run_with_retries(config, _WORKER_DATASET, rep)


@dataclass(eq=False)
class AccuracySummary:
    epochs: np.ndarray
    train_mean: np.ndarray
    train_ci: np.ndarray  # half-width of the 95% interval
    test_mean: np.ndarray
    test_ci: np.ndarray


def accuracy_summary(trajectories) -> AccuracySummary:
    """Per-epoch mean accuracy with normal-approximation 95% intervals."""
    tr = np.stack([t.train_acc for t in trajectories])
    te = np.stack([t.test_acc for t in trajectories])
    n = tr.shape[0]

    def half(a):
        if n < 2:
            return np.zeros(a.shape[1])
        return 1.96 * a.std(axis=0, ddof=1) / math.sqrt(n)

    return AccuracySummary(trajectories[0].epochs.copy(), tr.mean(axis=0), half(tr), te.mean(axis=0), half(te))


@dataclass(eq=False)
class RunArtifacts:
    config: ExperimentConfig
    trajectories: list
    aggregate: ip.Aggregate
    accuracy: AccuracySummary
    retry_log: list
    metadata: dict = field(default_factory=dict)

    @property
    def mean_trajectory(self) -> ip.InfoTrajectory:
        traj = self.aggregate.mean_trajectory(self.trajectories[0])
        traj.train_acc = self.accuracy.train_mean
        traj.test_acc = self.accuracy.test_mean
        traj.loss = np.mean([t.loss for t in self.trajectories], axis=0)
        return traj


def assemble(config: ExperimentConfig, trajectories, retry_log, metadata=None) -> RunArtifacts:
    meta = {
        "splits": "independent train/test split per repetition",
        "logged_epochs": len(trajectories[0].epochs),
        "layer_widths": config.network_spec().widths,
        "activations": config.network_spec().activations,
    }
    meta.update(metadata or {})
    return RunArtifacts(config, trajectories, ip.aggregate_runs(trajectories),
                        accuracy_summary(trajectories), retry_log, meta)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("IBQ_WORKERS", "1")))
    except ValueError:
        return 1


def run_experiment(config: ExperimentConfig, workers: int | None = None, dataset=None,
                   progress=None, on_record=None) -> RunArtifacts:
    """Run every repetition (retrying failures) and aggregate the results.

    ``progress(rep, total)`` is called as repetitions finish. ``on_record`` is
    forwarded to :func:`run_repetition`; it forces serial execution.
    """
    config.validate()
    workers = default_workers() if workers is None else max(1, workers)
    if on_record is not None:
        workers = 1
    if dataset is None:
        dataset = load_dataset(config.dataset)
    results = {}
    if workers == 1 or config.repetitions == 1:
        for rep in range(config.repetitions):
            results[rep] = _run_with_retries(config, dataset, rep, on_record)
            if progress:
                progress(rep, config.repetitions)
    else:
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(config.dataset,)) as pool:
            for rep, res in zip(range(config.repetitions),
                                pool.map(_worker_run, [(config, r) for r in range(config.repetitions)])):
                results[rep] = res
                if progress:
                    progress(rep, config.repetitions)
    trajectories = [results[r][0] for r in range(config.repetitions)]
    retry_log = [entry for r in range(config.repetitions) for entry in results[r][1]]
    return assemble(config, trajectories, retry_log, {"dataset_size": len(dataset)})


def phase_summary(artifacts: RunArtifacts, mode: str = "mean", theta_fit: float = ip.THETA_FIT,
                  theta_comp: float = ip.THETA_COMP) -> list[ip.Phases]:
    """Per-layer phases of the mean trajectory, or a majority vote over runs."""
    if mode == "mean":
        agg = artifacts.aggregate
        return [ip.detect_phases(agg.epochs, agg.mean_xt[:, j], agg.mean_ty[:, j], theta_fit, theta_comp)
                for j in range(agg.mean_xt.shape[1])]
    if mode != "vote":
        raise ValueError(f"unknown phase mode {mode!r}")
    out = []
    for j in range(artifacts.trajectories[0].num_layers):
        per_run = [ip.detect_phases(t.epochs, t.i_xt[:, j], t.i_ty[:, j], theta_fit, theta_comp)
                   for t in artifacts.trajectories]
        half = len(per_run) / 2
        out.append(ip.Phases(
            sum(p.fitting for p in per_run) > half,
            sum(p.compression for p in per_run) > half,
            int(np.median([p.peak_epoch for p in per_run])),
            float(np.mean([p.fit_gain for p in per_run])),
            float(np.mean([p.compression_drop for p in per_run])),
        ))
    return out
