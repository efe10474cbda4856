"""Toy training objectives with named parameter groups and exact gradients.

Parameters live in a :class:`ParamGroupSet`: an ordered mapping from group
name to a flat float64 vector.  Runs default to two groups ("embedding",
"transformer"); the quadratic and logistic kinds can also split across
four groups for multi-group experiments.

Batches are pure functions of ``(global_seed, rank, step)``, so any rank
can recompute any batch at any time and distinct (rank, step) pairs get
independent noise streams.  The logistic kind walks a per-epoch
permutation of its dataset so one epoch touches every sample exactly
once; the other kinds draw i.i.d. batch noise.

All gradients are hand-derived and validated in tests against the
central-difference oracle :func:`finite_diff_grad`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Batch",
    "NonFiniteParameterError",
    "Objective",
    "ObjectiveSpec",
    "ParamGroupSet",
    "build_objective",
    "default_group_names",
    "finite_diff_grad",
    "load_params",
    "sample_batch",
    "save_params",
    "seeded_rng",
]

# Stream tags keep RNG streams for unrelated purposes statistically
# independent even under the same global seed.
STREAM_BATCH = 11
STREAM_EPOCH = 13
STREAM_COLD_INIT = 17
STREAM_DATASET = 19
STREAM_WARM_NOISE = 23
STREAM_REASSIGN = 29
STREAM_PRETRAIN = 31

_GROUP_NAMES = {
    1: ("theta",),
    2: ("embedding", "transformer"),
    4: ("embedding", "no_decay", "non_embedding", "transformer"),
}


def seeded_rng(*entropy: int) -> np.random.Generator:
    """A generator keyed on a tuple of non-negative integers."""
    return np.random.default_rng(np.random.SeedSequence(entropy))


def default_group_names(count: int) -> tuple[str, ...]:
    if count not in _GROUP_NAMES:
        raise ValueError(f"group_count must be one of {sorted(_GROUP_NAMES)}, got {count}")
    return _GROUP_NAMES[count]


def _split_sizes(total: int, count: int) -> list[int]:
    # Contiguous, near-even split; leading groups absorb the remainder.
    base, extra = divmod(total, count)
    sizes = [base + (1 if i < extra else 0) for i in range(count)]
    if min(sizes) < 1:
        raise ValueError(f"cannot split {total} parameters into {count} non-empty groups")
    return sizes


class NonFiniteParameterError(OverflowError):
    """Parameters contain NaN/Inf; ``group`` names the offending group."""

    def __init__(self, group: str) -> None:
        super().__init__(f"non-finite values in parameter group {group!r}")
        self.group = group


class ParamGroupSet:
    """Ordered mapping of group name -> flat float64 parameter vector."""

    def __init__(self, groups: Iterable[tuple[str, np.ndarray]]) -> None:
        self._groups: dict[str, np.ndarray] = {}
        for name, arr in groups:
            if name in self._groups:
                raise ValueError(f"duplicate parameter group {name!r}")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 1:
                raise ValueError(f"group {name!r} must be a flat vector, got shape {arr.shape}")
            self._groups[name] = arr

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._groups)

    @property
    def total_dim(self) -> int:
        return sum(arr.shape[0] for arr in self._groups.values())

    def sizes(self) -> tuple[tuple[str, int], ...]:
        return tuple((name, arr.shape[0]) for name, arr in self._groups.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._groups[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._groups:
            raise KeyError(f"unknown parameter group {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._groups[name].shape:
            raise ValueError(
                f"group {name!r} has size {self._groups[name].shape[0]}, got {arr.shape}"
            )
        self._groups[name] = arr

    def items(self):
        return self._groups.items()

    def copy(self) -> "ParamGroupSet":
        return ParamGroupSet((name, arr.copy()) for name, arr in self._groups.items())

    def flatten(self) -> np.ndarray:
        return np.concatenate([arr for arr in self._groups.values()])

    def with_flat(self, vec: np.ndarray) -> "ParamGroupSet":
        """Rebuild a set with this one's structure from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.total_dim,):
            raise ValueError(f"expected flat vector of length {self.total_dim}, got {vec.shape}")
        out, offset = [], 0
        for name, arr in self._groups.items():
            n = arr.shape[0]
            out.append((name, vec[offset:offset + n].copy()))
            offset += n
        return ParamGroupSet(out)

    def zeros_like(self) -> "ParamGroupSet":
        return ParamGroupSet((name, np.zeros_like(arr)) for name, arr in self._groups.items())

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(arr @ arr) for arr in self._groups.values())))

    def first_non_finite_group(self) -> str | None:
        for name, arr in self._groups.items():
            if not np.all(np.isfinite(arr)):
                return name
        return None

    def require_finite(self) -> None:
        bad = self.first_non_finite_group()
        if bad is not None:
            raise NonFiniteParameterError(bad)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamGroupSet):
            return NotImplemented
        return self.names == other.names and all(
            np.array_equal(self._groups[n], other._groups[n]) for n in self._groups
        )

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}[{a.shape[0]}]" for n, a in self._groups.items())
        return f"ParamGroupSet({inner})"


@dataclass(frozen=True)
class Batch:
    """Identity of one minibatch; content is derived deterministically."""

    global_seed: int
    rank: int
    step: int

    def rng(self) -> np.random.Generator:
        return seeded_rng(STREAM_BATCH, self.global_seed, self.rank, self.step)


def sample_batch(global_seed: int, rank: int, step: int) -> Batch:
    """Batch for (rank, step); steps are 1-based, matching the training loop."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if rank < 0:
        raise ValueError(f"rank must be >= 0, got {rank}")
    return Batch(global_seed, rank, step)


class Objective:
    """Base interface: parameter layout, cold init, loss/gradient."""

    group_sizes: tuple[tuple[str, int], ...]

    @property
    def total_dim(self) -> int:
        return sum(n for _, n in self.group_sizes)

    def _empty_params(self, vec: np.ndarray) -> ParamGroupSet:
        out, offset = [], 0
        for name, n in self.group_sizes:
            out.append((name, vec[offset:offset + n].copy()))
            offset += n
        return ParamGroupSet(out)

    def init_params(self, global_seed: int) -> ParamGroupSet:
        """Cold-start parameters; identical on every rank by construction."""
        raise NotImplementedError

    def loss_and_grad(self, params: ParamGroupSet, batch: Batch) -> tuple[float, ParamGroupSet]:
        """Per-sample-mean loss and its exact gradient for this batch."""
        raise NotImplementedError

    def loss_and_flat_grad(self, params: ParamGroupSet, batch: Batch) -> tuple[float, np.ndarray]:
        """Same contract with the gradient already flattened; the training
        loop calls this one, so stiff objectives override it to skip the
        group-set round trip."""
        loss, grad = self.loss_and_grad(params, batch)
        return loss, grad.flatten()

    def loss(self, params: ParamGroupSet, batch: Batch) -> float:
        return self.loss_and_grad(params, batch)[0]


class Quadratic(Objective):
    """0.5 * sum(spectrum * theta^2) plus a batch-seeded linear noise term.

    The noise enters the loss as ``noise . theta``, so the gradient carries
    additive Gaussian noise while the expected landscape (and its optimum
    at zero) is unchanged.  Plain gradient descent on the noise-free loss
    is stable iff the step size stays below 2 / max(spectrum).
    """

    def __init__(self, spectrum: Sequence[float], noise_scale: float = 0.0,
                 group_count: int = 2, init_scale: float = 1.0) -> None:
        self.spectrum = np.asarray(spectrum, dtype=np.float64)
        if self.spectrum.ndim != 1 or self.spectrum.size < 1:
            raise ValueError("spectrum must be a non-empty 1-D sequence")
        if np.any(self.spectrum <= 0):
            raise ValueError("spectrum entries must be positive")
        self.noise_scale = float(noise_scale)
        self.init_scale = float(init_scale)
        names = default_group_names(group_count)
        sizes = _split_sizes(self.spectrum.size, group_count)
        self.group_sizes = tuple(zip(names, sizes))

    def init_params(self, global_seed: int) -> ParamGroupSet:
        rng = seeded_rng(STREAM_COLD_INIT, global_seed)
        vec = rng.standard_normal(self.total_dim) * self.init_scale
        return self._empty_params(vec)

    def loss_and_grad(self, params: ParamGroupSet, batch: Batch) -> tuple[float, ParamGroupSet]:
        loss, flat = self.loss_and_flat_grad(params, batch)
        return loss, params.with_flat(flat)

    def loss_and_flat_grad(self, params: ParamGroupSet, batch: Batch) -> tuple[float, np.ndarray]:
        params.require_finite()
        theta = params.flatten()
        loss = 0.5 * float(self.spectrum @ (theta * theta))
        grad = self.spectrum * theta
        if self.noise_scale > 0.0:
            noise = batch.rng().standard_normal(theta.shape[0]) * self.noise_scale
            loss += float(noise @ theta)
            grad = grad + noise
        return loss, grad

    def stability_threshold(self) -> float:
        return 2.0 / float(self.spectrum.max())


class Rosenbrock(Objective):
    """Classic banana function over d coordinates; batch noise unused."""

    def __init__(self, dim: int, group_count: int = 2, init_scale: float = 1.0) -> None:
        if dim < 2:
            raise ValueError(f"rosenbrock needs dim >= 2, got {dim}")
        self.dim = int(dim)
        self.init_scale = float(init_scale)
        names = default_group_names(group_count)
        self.group_sizes = tuple(zip(names, _split_sizes(self.dim, group_count)))

    def init_params(self, global_seed: int) -> ParamGroupSet:
        rng = seeded_rng(STREAM_COLD_INIT, global_seed)
        vec = rng.standard_normal(self.dim) * self.init_scale
        return self._empty_params(vec)

    def loss_and_grad(self, params: ParamGroupSet, batch: Batch) -> tuple[float, ParamGroupSet]:
        params.require_finite()
        x = params.flatten()
        head, tail = x[:-1], x[1:]
        gap = tail - head * head
        loss = float(np.sum(100.0 * gap * gap + (1.0 - head) ** 2))
        grad = np.zeros_like(x)
        grad[:-1] += -400.0 * head * gap - 2.0 * (1.0 - head)
        grad[1:] += 200.0 * gap
        return loss, params.with_flat(grad)


class SyntheticMlp(Objective):
    """Small tanh MLP regressing a fixed random teacher's targets.

    The dataset (inputs, teacher weights, label noise) is frozen from
    ``dataset_seed``; batches are i.i.d. index draws from it.  Group
    "embedding" holds the first layer, "transformer" the rest.
    """

    def __init__(self, layer_sizes: Sequence[int], dataset_seed: int,
                 n_samples: int = 256, batch_size: int = 16,
                 init_scale: float = 1.0, target_noise: float = 0.05) -> None:
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"layer_sizes needs >= 2 positive entries, got {layer_sizes}")
        self.layer_sizes = sizes
        self.dataset_seed = int(dataset_seed)
        self.n_samples = int(n_samples)
        self.batch_size = int(batch_size)
        self.init_scale = float(init_scale)
        self.target_noise = float(target_noise)
        self._shapes = [
            ((sizes[i + 1], sizes[i]), (sizes[i + 1],)) for i in range(len(sizes) - 1)
        ]
        first = sizes[1] * sizes[0] + sizes[1]
        rest = sum(w[0] * w[1] + b[0] for w, b in self._shapes[1:])
        if rest < 1:
            raise ValueError("synthetic_mlp needs at least two layers of parameters")
        self.group_sizes = (("embedding", first), ("transformer", rest))

        rng = seeded_rng(STREAM_DATASET, self.dataset_seed)
        self.inputs = rng.standard_normal((self.n_samples, sizes[0]))
        teacher = [
            (rng.standard_normal(w) / np.sqrt(w[1]), rng.standard_normal(b) * 0.1)
            for w, b in self._shapes
        ]
        clean = self._forward_with(teacher, self.inputs)[-1]
        self.targets = clean + rng.standard_normal(clean.shape) * self.target_noise

    # -- parameter packing ---------------------------------------------------

    def _unpack(self, params: ParamGroupSet) -> list[tuple[np.ndarray, np.ndarray]]:
        vec = params.flatten()
        layers, offset = [], 0
        for (wshape, bshape) in self._shapes:
            wn = wshape[0] * wshape[1]
            w = vec[offset:offset + wn].reshape(wshape)
            offset += wn
            b = vec[offset:offset + bshape[0]]
            offset += bshape[0]
            layers.append((w, b))
        return layers

    def _pack(self, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in layers])

    @staticmethod
    def _forward_with(layers, x: np.ndarray) -> list[np.ndarray]:
        acts = [x]
        for i, (w, b) in enumerate(layers):
            z = acts[-1] @ w.T + b
            acts.append(np.tanh(z) if i < len(layers) - 1 else z)
        return acts

    def init_params(self, global_seed: int) -> ParamGroupSet:
        rng = seeded_rng(STREAM_COLD_INIT, global_seed)
        layers = [
            (
                rng.standard_normal(w) * (self.init_scale / np.sqrt(w[1])),
                np.zeros(b),
            )
            for w, b in self._shapes
        ]
        return self._empty_params(self._pack(layers))

    def loss_and_grad(self, params: ParamGroupSet, batch: Batch) -> tuple[float, ParamGroupSet]:
        loss, flat = self.loss_and_flat_grad(params, batch)
        return loss, params.with_flat(flat)

    def loss_and_flat_grad(self, params: ParamGroupSet, batch: Batch) -> tuple[float, np.ndarray]:
        params.require_finite()
        idx = batch.rng().integers(0, self.n_samples, self.batch_size)
        x, y = self.inputs[idx], self.targets[idx]
        layers = self._unpack(params)
        acts = self._forward_with(layers, x)
        resid = acts[-1] - y
        b = x.shape[0]
        loss = 0.5 * float(np.sum(resid * resid)) / b
        # Backprop: delta holds dLoss/dz for the current layer.
        delta = resid / b
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)
        for i in range(len(layers) - 1, -1, -1):
            w, _bias = layers[i]
            grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
            if i > 0:
                delta = (delta @ w) * (1.0 - acts[i] * acts[i])  # tanh'(z) = 1 - tanh(z)^2
        return loss, self._pack(grads)


class Logistic(Objective):
    """Binary logistic regression on a frozen synthetic dataset.

    Batches sweep a fresh per-epoch permutation of the dataset, so one
    epoch covers every sample exactly once per rank.
    """

    def __init__(self, dim: int, dataset_seed: int, n_samples: int = 512,
                 batch_size: int = 32, group_count: int = 2,
                 init_scale: float = 0.0) -> None:
        if dim < 1:
            raise ValueError(f"logistic needs dim >= 1, got {dim}")
        if n_samples % batch_size != 0:
            raise ValueError(
                f"batch_size {batch_size} must divide n_samples {n_samples} "
                "so an epoch is a whole number of batches"
            )
        self.dim = int(dim)
        self.dataset_seed = int(dataset_seed)
        self.n_samples = int(n_samples)
        self.batch_size = int(batch_size)
        self.init_scale = float(init_scale)
        names = default_group_names(group_count)
        self.group_sizes = tuple(zip(names, _split_sizes(self.dim, group_count)))

        rng = seeded_rng(STREAM_DATASET, self.dataset_seed)
        self.inputs = rng.standard_normal((self.n_samples, self.dim))
        truth = rng.standard_normal(self.dim) * (3.0 / np.sqrt(self.dim))
        prob = _sigmoid(self.inputs @ truth)
        self.labels = (rng.uniform(size=self.n_samples) < prob).astype(np.float64)

    def batch_indices(self, batch: Batch) -> np.ndarray:
        """Deterministic epoch-sweep indices for this (rank, step)."""
        pos = (batch.step - 1) * self.batch_size
        epoch, offset = divmod(pos, self.n_samples)
        perm = seeded_rng(
            STREAM_EPOCH, batch.global_seed, batch.rank, epoch
        ).permutation(self.n_samples)
        return perm[offset:offset + self.batch_size]

    def init_params(self, global_seed: int) -> ParamGroupSet:
        if self.init_scale == 0.0:
            return self._empty_params(np.zeros(self.dim))
        rng = seeded_rng(STREAM_COLD_INIT, global_seed)
        return self._empty_params(rng.standard_normal(self.dim) * self.init_scale)

    def loss_and_grad(self, params: ParamGroupSet, batch: Batch) -> tuple[float, ParamGroupSet]:
        params.require_finite()
        idx = self.batch_indices(batch)
        x, y = self.inputs[idx], self.labels[idx]
        w = params.flatten()
        z = x @ w
        # Mean log-loss, computed as softplus(z) - y*z for stability.
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        grad = x.T @ (_sigmoid(z) - y) / x.shape[0]
        return loss, params.with_flat(grad)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def finite_diff_grad(objective: Objective, params: ParamGroupSet, batch: Batch,
                     eps: float = 1e-5) -> ParamGroupSet:
    """Central-difference gradient oracle; test use only (2*dim evaluations)."""
    grads = []
    for name, arr in params.items():
        g = np.zeros_like(arr)
        for i in range(arr.shape[0]):
            saved = arr[i]
            arr[i] = saved + eps
            hi = objective.loss(params, batch)
            arr[i] = saved - eps
            lo = objective.loss(params, batch)
            arr[i] = saved
            g[i] = (hi - lo) / (2.0 * eps)
        grads.append((name, g))
    return ParamGroupSet(grads)


@dataclass(frozen=True)
class ObjectiveSpec:
    """Declarative objective description used by experiment configs."""

    kind: str
    dim: int = 8
    spectrum: tuple[float, ...] | None = None
    noise_scale: float = 0.0
    layer_sizes: tuple[int, ...] = (8, 16, 1)
    dataset_seed: int = 0
    n_samples: int = 256
    batch_size: int = 16
    init_scale: float = 1.0
    target_noise: float = 0.05
    group_count: int = 2

    def key(self) -> tuple:
        """Identity tuple: two runs are comparable iff their keys match."""
        return (
            self.kind, self.dim, self.spectrum, self.noise_scale, self.layer_sizes,
            self.dataset_seed, self.n_samples, self.batch_size, self.init_scale,
            self.target_noise, self.group_count,
        )


def build_objective(spec: ObjectiveSpec) -> Objective:
    if spec.kind == "quadratic":
        spectrum = spec.spectrum
        if spectrum is None:
            spectrum = np.geomspace(1.0, 10.0, spec.dim)
        return Quadratic(spectrum, noise_scale=spec.noise_scale,
                         group_count=spec.group_count, init_scale=spec.init_scale)
    if spec.kind == "rosenbrock":
        return Rosenbrock(spec.dim, group_count=spec.group_count,
                          init_scale=spec.init_scale)
    if spec.kind == "synthetic_mlp":
        return SyntheticMlp(spec.layer_sizes, spec.dataset_seed,
                            n_samples=spec.n_samples, batch_size=spec.batch_size,
                            init_scale=spec.init_scale, target_noise=spec.target_noise)
    if spec.kind == "logistic":
        return Logistic(spec.dim, spec.dataset_seed, n_samples=spec.n_samples,
                        batch_size=spec.batch_size, group_count=spec.group_count,
                        init_scale=spec.init_scale)
    raise ValueError(
        f"unknown objective kind {spec.kind!r}; expected one of "
        "quadratic, rosenbrock, synthetic_mlp, logistic"
    )


# ---------------------------------------------------------------------------
# checkpoint format: one JSON header line with group names and lengths,
# then one whitespace-separated line of repr'd float64 values per group.
# repr round-trips doubles exactly, so save -> load is bit-faithful.


def save_params(path, params: ParamGroupSet) -> None:
    import json

    with open(path, "w", encoding="ascii") as fh:
        fh.write(json.dumps({"groups": [[n, s] for n, s in params.sizes()]}) + "\n")
        for _, arr in params.items():
            fh.write(" ".join(repr(float(v)) for v in arr) + "\n")


def load_params(path) -> ParamGroupSet:
    import json

    with open(path, "r", encoding="ascii") as fh:
        header = json.loads(fh.readline())
        groups = []
        for name, size in header["groups"]:
            arr = np.array([float(tok) for tok in fh.readline().split()], dtype=np.float64)
            if arr.shape[0] != size:
                raise ValueError(
                    f"checkpoint group {name!r} declares {size} values, found {arr.shape[0]}"
                )
            groups.append((name, arr))
    return ParamGroupSet(groups)
