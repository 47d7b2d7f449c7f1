"""Fixed fan-in connectivity search: prune/regrow training and mask files.

The trainable object is a nonnegative magnitude matrix theta with a frozen
random sign matrix; a connection is active while its theta stays positive.
The two-phase update keeps gradient pressure on magnitudes, regrows rows
that fall under their fan-in budget, and only enforces the budget as a
hard structural constraint in the final phase, so early training explores
freely instead of greedily locking in the first surviving connections.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SparseParams",
    "SparsityHyper",
    "init_sparse_weights",
    "sparse_update_step",
    "deepr_star_step",
    "extract_mask",
    "random_mask",
    "mask_density_heatmap",
    "block_means",
    "centrality_ratio",
    "ConnectivityMask",
]


@dataclass
class SparseParams:
    """Magnitude/sign decomposition of one layer's candidate weights.

    theta:  (rows, cols) nonnegative magnitudes, 0 at inactive entries
    sign:   (rows, cols) frozen +-1, sampled once at init
    is_con: (rows, cols) the initial connectivity draw (kept for reference)
    active: (rows, cols) bool, the live connection set

    rows = adders * out_count (sub-neuron major within a neuron),
    cols = layer input width.
    """

    theta: np.ndarray
    sign: np.ndarray
    is_con: np.ndarray
    active: np.ndarray

    def effective_weights(self) -> np.ndarray:
        return self.theta * self.sign * self.active

    def row_counts(self) -> np.ndarray:
        return self.active.sum(axis=1)


@dataclass(frozen=True)
class SparsityHyper:
    """Knobs for the prune/regrow schedule.

    phase_switch is in epochs: while epoch < phase_switch, over-budget rows
    only get a magnitude penalty (eps2) on their weakest connections; from
    phase_switch on, the weakest are structurally removed each step.
    noise_std is the std of the exploration noise added (scaled by lr) to
    active magnitudes; the default makes the per-step noise displacement
    lr * noise_std equal to 1e-5.
    """

    target_fanin: int
    lr: float
    phase_switch: int
    eps1: float = 1e-12
    eps2: float = 5e-5
    alpha: float = 1e-4
    noise_std: float | None = None

    def __post_init__(self):
        if self.target_fanin < 1:
            raise ValueError(f"target_fanin must be >= 1, got {self.target_fanin}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.phase_switch < 1:
            raise ValueError(f"phase_switch must be >= 1, got {self.phase_switch}")
        if self.eps1 <= 0 or self.eps2 <= 0:
            raise ValueError("eps1 and eps2 must be positive")

    @property
    def noise(self) -> float:
        return self.noise_std if self.noise_std is not None else 1e-5 / self.lr


def init_sparse_weights(rows: int, cols: int, init_fanin: int, rng) -> SparseParams:
    """Random magnitudes with init_fanin active connections per row.

    Magnitudes come from |N(0,1)| draws; signs are sampled uniformly for
    every entry (active or not) and stay fixed for the whole search, so a
    connection regrown later reuses its original sign.
    """
    if not 1 <= init_fanin <= cols:
        raise ValueError(f"init_fanin {init_fanin} outside [1, {cols}]")
    w0 = rng.normal(0.0, 1.0, size=(rows, cols))
    sign = np.where(rng.random((rows, cols)) < 0.5, -1.0, 1.0)
    is_con = np.zeros((rows, cols), dtype=np.int8)
    if init_fanin == cols:
        is_con[:] = 1
    else:
        for r in range(rows):
            is_con[r, rng.choice(cols, size=init_fanin, replace=False)] = 1
    theta = np.abs(w0) * is_con
    active = theta > 0.0
    theta = np.where(active, theta, 0.0)
    return SparseParams(theta=theta, sign=sign, is_con=is_con, active=active)


def _rank_lowest(theta, active) -> np.ndarray:
    """Per-row ascending rank of active magnitudes, ties broken by index.

    Inactive entries rank after every active one. Stable sort on theta
    gives the (theta, index) order the schedule's determinism contract
    promises.
    """
    masked = np.where(active, theta, np.inf)
    order = np.argsort(masked, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(theta.shape[0])[:, None]
    ranks[rows, order] = np.arange(theta.shape[1])[None, :]
    return ranks


def _grow_rows(p: SparseParams, deficits: np.ndarray, eps1: float, rng) -> int:
    """Activate `deficits[r]` uniformly-chosen inactive entries per row."""
    grown = 0
    for r in np.nonzero(deficits > 0)[0]:
        pool = np.nonzero(~p.active[r])[0]
        pick = rng.choice(pool, size=int(deficits[r]), replace=False)
        p.active[r, pick] = True
        p.theta[r, pick] = eps1
        grown += int(deficits[r])
    return grown


def sparse_update_step(p: SparseParams, grad_w, h: SparsityHyper, epoch: int, rng,
                       maintain: bool = True):
    """One magnitude update plus connectivity maintenance.

    grad_w is the loss gradient w.r.t. the effective weights; the chain
    rule through w = theta * sign makes the magnitude gradient
    sign * grad_w. Active magnitudes move by
    -lr * grad_theta - lr * alpha + lr * noise, then anything driven
    negative is deactivated. Maintenance then tops up under-budget rows at
    eps1 and, depending on the phase, either penalizes (eps2) or removes
    the weakest surplus connections.

    Returns (params, info) where info carries the step's bookkeeping
    (connections dropped/grown/removed and the pre-maintenance row-count
    spread, which is the evidence that phase one really relaxes fan-in).
    """
    grad_w = np.asarray(grad_w, dtype=np.float64)
    if grad_w.shape != p.theta.shape:
        raise ValueError(f"grad shape {grad_w.shape} vs theta shape {p.theta.shape}")
    noise = rng.normal(0.0, h.noise, size=p.theta.shape)
    grad_theta = p.sign * grad_w
    stepped = p.theta - h.lr * grad_theta - h.lr * h.alpha + h.lr * noise
    crossed = p.active & (stepped < 0.0)
    p.active &= ~crossed
    p.theta = np.where(p.active, stepped, 0.0)
    info = {
        "dropped": int(crossed.sum()),
        "grown": 0,
        "penalized": 0,
        "removed": 0,
        "min_count": int(p.row_counts().min()),
        "max_count": int(p.row_counts().max()),
    }
    if not maintain:
        return p, info
    counts = p.row_counts()
    surplus = counts - h.target_fanin
    info["grown"] = _grow_rows(p, -surplus, h.eps1, rng)
    over = surplus > 0
    if np.any(over):
        ranks = _rank_lowest(p.theta, p.active)
        weakest = p.active & (ranks < np.where(over, surplus, 0)[:, None])
        if epoch < h.phase_switch:
            p.theta = np.where(weakest, p.theta - h.eps2, p.theta)
            info["penalized"] = int(weakest.sum())
        else:
            p.active &= ~weakest
            p.theta = np.where(p.active, p.theta, 0.0)
            info["removed"] = int(weakest.sum())
    return p, info


def deepr_star_step(p: SparseParams, grad_w, h: SparsityHyper, rng):
    """Drop-on-zero-crossing with immediate same-count random regrowth.

    The classic rewiring baseline, revised to hold per-row fan-in exactly
    constant: every connection whose magnitude crosses below zero is
    replaced in the same step by a uniformly-chosen inactive one at eps1.

    Returns (params, info).
    """
    grad_w = np.asarray(grad_w, dtype=np.float64)
    if grad_w.shape != p.theta.shape:
        raise ValueError(f"grad shape {grad_w.shape} vs theta shape {p.theta.shape}")
    noise = rng.normal(0.0, h.noise, size=p.theta.shape)
    grad_theta = p.sign * grad_w
    stepped = p.theta - h.lr * grad_theta - h.lr * h.alpha + h.lr * noise
    crossed = p.active & (stepped < 0.0)
    p.active &= ~crossed
    p.theta = np.where(p.active, stepped, 0.0)
    dropped_per_row = crossed.sum(axis=1)
    grown = _grow_rows(p, dropped_per_row, h.eps1, rng)
    return p, {"dropped": int(crossed.sum()), "grown": grown}


def extract_mask(p: SparseParams, fanin: int, adders: int):
    """Final connectivity as [neuron][sub][sorted indices] for one layer.

    Errors if any row's active count differs from the fan-in budget; the
    schedule's phase two guarantees the budget at every maintained step,
    so a violation here means the search was misconfigured.
    """
    rows, _ = p.theta.shape
    if rows % adders:
        raise ValueError(f"{rows} rows not divisible by {adders} sub-neurons")
    counts = p.row_counts()
    bad = np.nonzero(counts != fanin)[0]
    if bad.size:
        r = int(bad[0])
        raise ValueError(
            f"row {r} (neuron {r // adders}, sub {r % adders}) has {int(counts[r])} "
            f"active connections, want {fanin}"
        )
    out = []
    for o in range(rows // adders):
        subs = []
        for a in range(adders):
            idx = np.nonzero(p.active[o * adders + a])[0]
            subs.append([int(i) for i in idx])
        out.append(subs)
    return out


def random_mask(in_count: int, out_count: int, fanin: int, adders: int, rng):
    """Uniform connectivity baseline: per sub-neuron, fanin distinct inputs."""
    if not 1 <= fanin <= in_count:
        raise ValueError(f"fanin {fanin} outside [1, {in_count}]")
    out = []
    for _ in range(out_count):
        subs = []
        for _ in range(adders):
            idx = np.sort(rng.choice(in_count, size=fanin, replace=False))
            subs.append([int(i) for i in idx])
        out.append(subs)
    return out


def mask_density_heatmap(layer_mask, in_count: int, side: int) -> np.ndarray:
    """Connection counts per input, reshaped onto a side x side image grid."""
    if side * side != in_count:
        raise ValueError(f"side {side} does not square to input width {in_count}")
    counts = np.zeros(in_count, dtype=np.float64)
    for neuron in layer_mask:
        for sub in neuron:
            for i in sub:
                counts[i] += 1.0
    return counts.reshape(side, side)


def block_means(grid: np.ndarray, block: int) -> np.ndarray:
    """Mean pooling into block x block tiles (side must divide evenly)."""
    side = grid.shape[0]
    if side % block:
        raise ValueError(f"block {block} does not tile side {side}")
    t = side // block
    return grid.reshape(block, t, block, t).mean(axis=(1, 3))


def centrality_ratio(grid: np.ndarray) -> float:
    """Mean density of the central half-side square over the border's.

    For a 28x28 grid this compares the central 14x14 block against the
    7-wide frame around it.
    """
    side = grid.shape[0]
    q = side // 4
    center = grid[q:side - q, q:side - q]
    mask = np.ones_like(grid, dtype=bool)
    mask[q:side - q, q:side - q] = False
    border_mean = float(grid[mask].mean())
    if border_mean == 0.0:
        return float("inf") if center.mean() > 0 else 1.0
    return float(center.mean()) / border_mean


class ConnectivityMask:
    """The portable wiring artifact the whole pipeline agrees on.

    layers[l][neuron][sub] is a sorted list of input indices. JSON layout
    is fixed (layers first, then meta; sorted indices; two-space indent)
    so the file is byte-reproducible for a given search.
    """

    def __init__(self, layers, meta: dict):
        self.layers = layers
        self.meta = meta

    def layer_indices(self, l: int) -> np.ndarray:
        """Layer l's wiring as an (out_count, adders, fanin) int64 array."""
        return np.asarray(self.layers[l], dtype=np.int64)

    def validate(self, in_counts, out_counts, fanins, adders: int) -> None:
        """Check shape against a model plan; raises ValueError on mismatch."""
        if len(self.layers) != len(out_counts):
            raise ValueError(f"{len(self.layers)} layers in mask, model wants {len(out_counts)}")
        for l, layer in enumerate(self.layers):
            if len(layer) != out_counts[l]:
                raise ValueError(f"layer {l}: {len(layer)} neurons, want {out_counts[l]}")
            for o, neuron in enumerate(layer):
                if len(neuron) != adders:
                    raise ValueError(f"layer {l} neuron {o}: {len(neuron)} subs, want {adders}")
                for a, sub in enumerate(neuron):
                    if len(sub) != fanins[l]:
                        raise ValueError(
                            f"layer {l} neuron {o} sub {a}: fan-in {len(sub)}, want {fanins[l]}"
                        )
                    if sub != sorted(set(sub)):
                        raise ValueError(
                            f"layer {l} neuron {o} sub {a}: indices must be sorted unique"
                        )
                    if sub and (sub[0] < 0 or sub[-1] >= in_counts[l]):
                        raise ValueError(
                            f"layer {l} neuron {o} sub {a}: index outside [0, {in_counts[l]})"
                        )

    def to_json(self) -> str:
        obj = {
            "layers": [
                {"neurons": [{"subs": neuron} for neuron in layer]}
                for layer in self.layers
            ],
            "meta": self.meta,
        }
        return json.dumps(obj, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ConnectivityMask":
        obj = json.loads(text)
        layers = [
            [[list(map(int, sub)) for sub in neuron["subs"]] for neuron in layer["neurons"]]
            for layer in obj["layers"]
        ]
        return cls(layers=layers, meta=obj.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ConnectivityMask":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())
