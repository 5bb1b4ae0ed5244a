"""Discrete entropy and mutual information of layer states.

A layer's state for a sample is its whole row of integer codes. Because
each layer is a deterministic function of the input and every input in the
dataset is distinct, ``I(X;T) = H(T)`` and ``I(T;Y) = H(T) - H(T|Y)``, both
computed from exact state counts over the full dataset. All values are in
bits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DPI_TOL = 1e-9
THETA_FIT = 0.05
THETA_COMP = 0.05
_ID_LIMIT = 1 << 62


@dataclass(frozen=True)
class InfoPoint:
    epoch: int
    layer: int
    i_xt: float
    i_ty: float


@dataclass(eq=False)
class InfoTrajectory:
    run_id: int
    epochs: np.ndarray  # (E,)
    i_xt: np.ndarray  # (E, L)
    i_ty: np.ndarray  # (E, L)
    train_acc: np.ndarray  # (E,)
    test_acc: np.ndarray  # (E,)
    loss: np.ndarray  # (E,) mean training loss of the epoch
    metadata: dict = field(default_factory=dict)
    # secondary estimate when both exact and binned MI are requested
    binned_i_xt: np.ndarray | None = None
    binned_i_ty: np.ndarray | None = None

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.int64)
        if self.epochs.size > 1 and not (np.diff(self.epochs) > 0).all():
            raise ValueError("epochs must be strictly increasing")
        if self.i_xt.shape != self.i_ty.shape or self.i_xt.shape[0] != self.epochs.size:
            raise ValueError("MI arrays must be (epochs, layers)")

    @property
    def num_layers(self) -> int:
        return self.i_xt.shape[1]

    def points(self, layer: int) -> list[InfoPoint]:
        return [
            InfoPoint(int(e), layer, float(x), float(y))
            for e, x, y in zip(self.epochs, self.i_xt[:, layer], self.i_ty[:, layer])
        ]


# ---------------------------------------------------------------------------
# entropies


def entropy(counts) -> float:
    """Shannon entropy in bits of the distribution given by ``counts``."""
    c = np.asarray(counts, dtype=np.float64).ravel()
    if (c < 0).any():
        raise ValueError("counts must be nonnegative")
    n = c.sum()
    if n <= 0:
        raise ValueError("entropy of an all-zero count vector is undefined")
    p = c[c > 0] / n
    h = float(-(p * np.log2(p)).sum())
    return h if h > 0.0 else 0.0


def conditional_entropy(joint_counts) -> float:
    """``H(rows | columns)`` for a count matrix indexed ``[row value, column value]``."""
    j = np.asarray(joint_counts, dtype=np.float64)
    n = j.sum()
    if n <= 0:
        raise ValueError("joint counts have zero total")
    h = 0.0
    for col in j.T:
        s = col.sum()
        if s > 0:
            h += s / n * entropy(col)
    return h


def state_ids(codes) -> np.ndarray:
    """Dense integer id per row, equal iff the rows are equal.

    Columns are folded in mixed radix; whenever the id range would leave
    int64 the ids are re-densified with ``np.unique``, so no two distinct
    rows can ever share an id.
    """
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[:, None]
    n = codes.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    ids = np.zeros(n, dtype=np.int64)
    bound = 1
    for c in range(codes.shape[1]):
        col = codes[:, c].astype(np.int64)
        base = int(col.max()) + 1
        if bound * base >= _ID_LIMIT:
            _, ids = np.unique(ids, return_inverse=True)
            ids = ids.astype(np.int64).ravel()
            bound = int(ids.max()) + 1
            if bound == n:
                # all rows already distinct; further columns cannot merge them
                return ids
        ids = ids * base + col
        bound *= base
    _, ids = np.unique(ids, return_inverse=True)
    return ids.astype(np.int64).ravel()


def mi_from_states(ids: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(H(T), H(T) - H(T|Y)) for state ids and integer labels."""
    ids = np.asarray(ids)
    labels = np.asarray(labels)
    if ids.shape[0] != labels.shape[0]:
        raise ValueError(f"{ids.shape[0]} states but {labels.shape[0]} labels")
    h_t = entropy(np.bincount(ids))
    n = labels.shape[0]
    h_t_given_y = 0.0
    for y in np.unique(labels):
        sel = ids[labels == y]
        h_t_given_y += sel.size / n * entropy(np.bincount(sel))
    return h_t, max(h_t - h_t_given_y, 0.0)


def mi_exact(record, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer ``(I(X;T), I(T;Y))`` from a record's quantization codes.

    ``record`` is a :class:`~ibq.qnet.StateRecord` or a list of code matrices.
    """
    layers = getattr(record, "codes", record)
    if any(c is None for c in layers):
        raise ValueError("record holds no quantization codes (quantization off?)")
    out = np.array([mi_from_states(state_ids(c), labels) for c in layers])
    return out[:, 0], out[:, 1]


# ---------------------------------------------------------------------------
# binning estimator


def bin_activations(values, m: int, b_l: float, b_u: float) -> np.ndarray:
    """Index of the uniform bin (of ``m`` in ``[b_l, b_u]``) holding each value."""
    if not b_l < b_u:
        raise ValueError(f"invalid bin bounds [{b_l}, {b_u}]")
    if m < 1:
        raise ValueError("need at least one bin")
    v = np.clip(np.asarray(values, dtype=np.float64), b_l, b_u)
    idx = np.floor((v - b_l) / (b_u - b_l) * m).astype(np.int64)
    return np.minimum(idx, m - 1)


def binning_bounds(activations, relu_max=None) -> list[tuple[float, float]]:
    """Standard bounds: tanh [-1, 1], softmax [0, 1], relu [0, max observed].

    ``relu_max`` gives the per-layer maximum over the whole run; layers whose
    maximum is 0 get the unit interval so every value lands in bin 0.
    """
    bounds = []
    for j, act in enumerate(activations):
        if act == "tanh":
            bounds.append((-1.0, 1.0))
        elif act == "softmax":
            bounds.append((0.0, 1.0))
        elif act == "relu":
            if relu_max is None or relu_max[j] is None:
                raise ValueError(f"relu layer {j} needs an upper bound")
            bounds.append((0.0, float(relu_max[j]) if relu_max[j] > 0 else 1.0))
        else:
            raise ValueError(f"no binning rule for activation {act!r}")
    return bounds


def mi_binned(continuous, labels, m: int, bounds) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer MI after binning each neuron into ``m`` uniform bins."""
    if len(bounds) != len(continuous):
        raise ValueError(f"{len(continuous)} layers but {len(bounds)} bounds")
    res = []
    for a, bound in zip(continuous, bounds):
        if bound is None:
            raise ValueError("missing bounds for a layer")
        res.append(mi_from_states(state_ids(bin_activations(a, m, *bound)), labels))
    res = np.array(res)
    return res[:, 0], res[:, 1]


# ---------------------------------------------------------------------------
# analysis


@dataclass(frozen=True)
class Violation:
    quantity: str  # "i_xt" or "i_ty"
    layer: int  # the later layer of the offending pair
    before: float
    after: float


def check_dpi(i_xt, i_ty, tol: float = DPI_TOL) -> list[Violation]:
    """Adjacent layer pairs (input to output order) where MI increases."""
    out = []
    for name, seq in (("i_xt", i_xt), ("i_ty", i_ty)):
        seq = np.asarray(seq, dtype=np.float64)
        for layer in range(1, seq.size):
            if seq[layer] > seq[layer - 1] + tol:
                out.append(Violation(name, layer, float(seq[layer - 1]), float(seq[layer])))
    return out


@dataclass(frozen=True)
class Phases:
    fitting: bool
    compression: bool
    peak_epoch: int
    fit_gain: float
    compression_drop: float


def detect_phases(epochs, i_xt, i_ty, theta_fit: float = THETA_FIT,
                  theta_comp: float = THETA_COMP) -> Phases:
    """Fitting: I(T;Y) rose by at least ``theta_fit`` bits over its start.
    Compression: I(X;T) ended at least ``theta_comp`` (a fraction) below its peak."""
    epochs = np.asarray(epochs)
    i_xt = np.asarray(i_xt, dtype=np.float64)
    i_ty = np.asarray(i_ty, dtype=np.float64)
    if epochs.size < 2:
        raise ValueError("phase detection needs at least two points")
    fit_gain = float(i_ty.max() - i_ty[0])
    peak = int(np.argmax(i_xt))
    drop = float(i_xt[peak] - i_xt[-1])
    return Phases(
        fit_gain >= theta_fit,
        drop >= theta_comp * i_xt[peak] and drop > 0,
        int(epochs[peak]),
        fit_gain,
        drop,
    )


@dataclass(eq=False)
class Aggregate:
    epochs: np.ndarray
    mean_xt: np.ndarray
    mean_ty: np.ndarray
    var_xt: np.ndarray
    var_ty: np.ndarray
    distances: np.ndarray  # L2 distance of each run from the mean
    median_run: int  # run_id of the median-deviating repetition

    def mean_trajectory(self, template: InfoTrajectory | None = None) -> InfoTrajectory:
        e = self.epochs.size
        return InfoTrajectory(
            -1, self.epochs, self.mean_xt, self.mean_ty,
            np.zeros(e), np.zeros(e), np.zeros(e),
            dict(template.metadata) if template else {},
        )


def aggregate_runs(trajectories: list[InfoTrajectory]) -> Aggregate:
    if not trajectories:
        raise ValueError("no trajectories to aggregate")
    first = trajectories[0]
    for t in trajectories[1:]:
        if t.i_xt.shape != first.i_xt.shape or not np.array_equal(t.epochs, first.epochs):
            raise ValueError("trajectories differ in epochs or layers")
    xt = np.stack([t.i_xt for t in trajectories])
    ty = np.stack([t.i_ty for t in trajectories])
    mean_xt, mean_ty = xt.mean(axis=0), ty.mean(axis=0)
    dist = np.sqrt(((xt - mean_xt) ** 2).sum(axis=(1, 2)) + ((ty - mean_ty) ** 2).sum(axis=(1, 2)))
    # the median distance (lower middle for even counts); ties go to the lowest run id
    target = np.sort(dist)[(len(dist) - 1) // 2]
    median = min((r for r in range(len(trajectories)) if dist[r] == target),
                 key=lambda r: trajectories[r].run_id)
    return Aggregate(
        first.epochs.copy(), mean_xt, mean_ty, xt.var(axis=0), ty.var(axis=0),
        dist, trajectories[median].run_id,
    )
