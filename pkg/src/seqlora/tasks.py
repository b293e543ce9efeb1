"""Synthetic concept streams: single-layer least-squares tasks with
controllable covariance spectra, and small teacher-student networks for the
multi-layer studies.

Tasks are immutable after generation and reproduced from (config, seed)
rather than stored.  Concurrent sampling requires per-job generator splits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import matrix as mx
from .errors import ShapeError
from .matrix import Matrix
from .rng import make_rng, split

ACTIVATIONS = ("identity", "tanh")

LINEAR_POPULATION = "linear-population"
LINEAR_SAMPLED = "linear-sampled"
DEEP = "deep"


@dataclass(frozen=True)
class SpectrumSpec:
    """Eigenvalue profile for a covariance: nonnegative, descending."""

    dimension: int
    eigenvalues: np.ndarray
    rotation_seed: int | None = None

    def __post_init__(self):
        vals = np.asarray(self.eigenvalues, dtype=np.float64).ravel()
        if vals.size != self.dimension:
            raise ShapeError(
                f"spectrum length {vals.size} != dimension {self.dimension}"
            )
        if (vals < 0).any():
            raise ValueError("spectrum eigenvalues must be nonnegative")
        object.__setattr__(self, "eigenvalues", np.sort(vals)[::-1].copy())

    @staticmethod
    def flat(dimension: int, value: float = 1.0, rotation_seed: int | None = None):
        return SpectrumSpec(dimension, np.full(dimension, value), rotation_seed)

    @staticmethod
    def geometric(dimension: int, ratio: float, top: float = 1.0,
                  rotation_seed: int | None = None):
        if not 0.0 < ratio <= 1.0:
            raise ValueError("geometric ratio must be in (0, 1]")
        vals = top * ratio ** np.arange(dimension)
        return SpectrumSpec(dimension, vals, rotation_seed)

    @staticmethod
    def spiked(dimension: int, k: int, magnitude: float, base: float = 1.0,
               rotation_seed: int | None = None):
        if not 1 <= k <= dimension:
            raise ValueError("spike count must be in [1, dimension]")
        vals = np.full(dimension, base)
        vals[:k] = magnitude
        return SpectrumSpec(dimension, vals, rotation_seed)

    @property
    def total(self) -> float:
        return float(self.eigenvalues.sum())


def covariance_from_spectrum(spec: SpectrumSpec, rng) -> Matrix:
    """PSD matrix R diag(spec) R^T with a Haar rotation R.

    The rotation stream comes from ``spec.rotation_seed`` when set, else
    from ``rng``.
    """
    rot_rng = make_rng(spec.rotation_seed) if spec.rotation_seed is not None else rng
    r = mx.haar_frame(spec.dimension, spec.dimension, rot_rng)
    scaled = Matrix(
        r.rows, r.cols, (r.data.reshape(r.rows, r.cols) * spec.eigenvalues).ravel()
    )
    cov = mx.matmul(scaled, mx.transpose(r)).to_numpy()
    cov = (cov + cov.T) / 2.0
    return Matrix(spec.dimension, spec.dimension, cov.ravel())


@dataclass(frozen=True)
class ConceptTask:
    """One synthetic concept.

    For linear kinds there is a single target weight; deep tasks carry one
    per layer plus a fixed training batch.  ``sigma`` is the input-feature
    covariance, ``psi`` the token (column) covariance.
    """

    kind: str
    targets: tuple[Matrix, ...]
    sigma: Matrix
    psi: Matrix | None
    noise_std: float
    p: int
    activation: str = "identity"
    gammas: tuple[float, ...] = ()
    l_out: float | None = None
    x_train: Matrix | None = None
    y_train: Matrix | None = None
    sqrt_sigma: Matrix = field(repr=False, default=None)
    sqrt_psi: Matrix | None = field(repr=False, default=None)

    @property
    def m(self) -> int:
        return self.sigma.rows

    @property
    def n(self) -> int:
        return self.targets[-1].rows

    @property
    def num_layers(self) -> int:
        return len(self.targets)

    def layer_dims(self) -> list[tuple[int, int]]:
        """(rows, cols) of each layer weight."""
        return [(w.rows, w.cols) for w in self.targets]


def _noise(rows, cols, std, rng) -> Matrix:
    if std == 0.0:
        return Matrix.zeros(rows, cols)
    return mx.gaussian_matrix(rows, cols, rng, scale=std)


def make_linear_task(
    m: int,
    n: int,
    spectrum: SpectrumSpec,
    noise_std: float,
    rng,
    kind: str = LINEAR_POPULATION,
    p: int = 64,
    psi_spectrum: SpectrumSpec | None = None,
    target: Matrix | None = None,
) -> ConceptTask:
    """Single-layer least-squares concept.

    The target weight has standard Gaussian entries scaled by 1/sqrt(m)
    unless given explicitly.  ``linear-population`` tasks evaluate the loss
    exactly through the covariance; ``linear-sampled`` tasks carry a fixed
    training batch of ``p`` columns drawn at creation.
    """
    if m < 1 or n < 1:
        raise ShapeError("dimensions must be positive")
    if kind not in (LINEAR_POPULATION, LINEAR_SAMPLED):
        raise ValueError(f"unknown linear task kind {kind!r}")
    if spectrum.dimension != m:
        raise ShapeError(f"spectrum dimension {spectrum.dimension} != m={m}")
    sigma = covariance_from_spectrum(spectrum, rng)
    if target is None:
        target = mx.gaussian_matrix(n, m, rng, scale=1.0 / math.sqrt(m))
    elif target.shape != (n, m):
        raise ShapeError(f"target shape {target.shape} != ({n}, {m})")
    psi = covariance_from_spectrum(psi_spectrum, rng) if psi_spectrum else None
    task = ConceptTask(
        kind=kind,
        targets=(target,),
        sigma=sigma,
        psi=psi,
        noise_std=float(noise_std),
        p=int(p),
        gammas=(1.0,),
        sqrt_sigma=mx.sqrt_spd(sigma),
        sqrt_psi=mx.sqrt_spd(psi) if psi else None,
    )
    if kind == LINEAR_SAMPLED:
        x, y = sample_batch(task, p, rng)
        task = ConceptTask(
            **{**_task_fields(task), "x_train": x, "y_train": y}
        )
    return task


def _task_fields(task: ConceptTask) -> dict:
    return {
        "kind": task.kind,
        "targets": task.targets,
        "sigma": task.sigma,
        "psi": task.psi,
        "noise_std": task.noise_std,
        "p": task.p,
        "activation": task.activation,
        "gammas": task.gammas,
        "l_out": task.l_out,
        "x_train": task.x_train,
        "y_train": task.y_train,
        "sqrt_sigma": task.sqrt_sigma,
        "sqrt_psi": task.sqrt_psi,
    }


def sample_batch(task: ConceptTask, p: int, rng) -> tuple[Matrix, Matrix]:
    """Draw (X, Y): X = sigma^(1/2) Z psi^(1/2), Y = teacher(X) + noise."""
    if p < 1:
        raise ValueError("column count must be positive")
    z = mx.gaussian_matrix(task.m, p, rng)
    x = mx.matmul(task.sqrt_sigma, z)
    if task.sqrt_psi is not None:
        if task.sqrt_psi.rows != p:
            raise ShapeError(
                f"token covariance is {task.sqrt_psi.rows}x{task.sqrt_psi.rows}, "
                f"cannot draw {p} columns"
            )
        x = mx.matmul(x, task.sqrt_psi)
    if task.kind == DEEP:
        y = teacher_forward(task, x)[-1]
    else:
        y = mx.matmul(task.targets[0], x)
    y = mx.add(y, _noise(y.rows, p, task.noise_std, rng))
    return x, y


def make_deep_task(
    layer_dims,
    activation: str,
    spectrum: SpectrumSpec,
    noise_std: float,
    rng,
    p: int = 64,
    weight_spectra: list[SpectrumSpec] | None = None,
    l_out_probes: int = 500,
) -> ConceptTask:
    """Teacher-student concept over a small multi-layer network.

    ``layer_dims`` lists the widths [d_0, ..., d_L]; layer ell maps
    d_(ell-1) -> d_ell with the activation applied between layers (never
    after the last).  Both supported activations are 1-Lipschitz, recorded
    in ``gammas``.  The loss Lipschitz constant at the output is estimated
    from random output perturbations and recorded as ``l_out``.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 3:
        raise ShapeError("a deep task needs at least 2 layers (3 widths)")
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}")
    if spectrum.dimension != dims[0]:
        raise ShapeError(f"input spectrum dimension {spectrum.dimension} != {dims[0]}")
    nlayers = len(dims) - 1
    sigma = covariance_from_spectrum(spectrum, rng)
    targets = []
    for ell in range(nlayers):
        rows, cols = dims[ell + 1], dims[ell]
        if weight_spectra is not None and weight_spectra[ell] is not None:
            k = min(rows, cols)
            sv = np.sqrt(weight_spectra[ell].eigenvalues[:k])
            u = mx.haar_frame(rows, k, rng)
            v = mx.haar_frame(cols, k, rng)
            us = Matrix(rows, k, (u.data.reshape(rows, k) * sv).ravel())
            targets.append(mx.matmul(us, mx.transpose(v)))
        else:
            targets.append(
                mx.gaussian_matrix(rows, cols, rng, scale=1.0 / math.sqrt(cols))
            )
    task = ConceptTask(
        kind=DEEP,
        targets=tuple(targets),
        sigma=sigma,
        psi=None,
        noise_std=float(noise_std),
        p=int(p),
        activation=activation,
        gammas=tuple(1.0 for _ in range(nlayers)),
        sqrt_sigma=mx.sqrt_spd(sigma),
    )
    batch_rng, probe_rng = split(rng, 2)
    x, y = sample_batch(task, p, batch_rng)
    l_out = _estimate_l_out(task, x, y, probe_rng, probes=l_out_probes)
    return ConceptTask(
        **{**_task_fields(task), "x_train": x, "y_train": y, "l_out": l_out}
    )


def _activate(task: ConceptTask, z: Matrix) -> Matrix:
    if task.activation == "tanh":
        return Matrix(z.rows, z.cols, np.tanh(z.data))
    return z


def forward_layers(task: ConceptTask, weights: list[Matrix], x: Matrix) -> list[Matrix]:
    """Layer inputs [X_1, ..., X_L] plus the final output, under ``weights``.

    Returns a list of length L+1: element ell is the input reaching layer
    ell+1 (element 0 is x itself), element L is the network output.
    """
    acts = [x]
    h = x
    nlayers = len(weights)
    for ell, w in enumerate(weights):
        z = mx.matmul(w, h)
        h = _activate(task, z) if ell < nlayers - 1 else z
        acts.append(h)
    return acts


def teacher_forward(task: ConceptTask, x: Matrix) -> list[Matrix]:
    return forward_layers(task, list(task.targets), x)


def batch_mse(output: Matrix, y: Matrix) -> float:
    d = mx.sub(output, y)
    return float(np.sum(d.data * d.data)) / y.cols


def _estimate_l_out(task, x, y, rng, probes: int = 500) -> float:
    """Max loss-difference ratio over random output perturbations.

    Probes span perturbation norms from 1e-2 to twice the output scale so
    the recorded constant covers the excursions seen when composing models.
    """
    out = teacher_forward(task, x)[-1]
    base = batch_mse(out, y)
    ref = 1.0 + mx.frob(out)
    best = 0.0
    for i in range(probes):
        d = mx.gaussian_matrix(out.rows, out.cols, rng)
        target_norm = ref * 2.0 * 10.0 ** (-2.0 + 2.0 * (i / max(probes - 1, 1)))
        d = mx.scale(d, target_norm / mx.frob(d))
        ratio = abs(batch_mse(mx.add(out, d), y) - base) / mx.frob(d)
        if ratio > best:
            best = ratio
    return best


# -- population quantities (linear-population only) ---------------------------


def population_loss(task: ConceptTask, w: Matrix) -> float:
    """Exact risk Tr((W - W*) Sigma (W - W*)^T) + noise^2 * n."""
    if task.kind != LINEAR_POPULATION:
        raise ValueError("population loss is exact only for linear-population tasks")
    d = mx.sub(w, task.targets[0])
    quad = mx.trace(mx.matmul(mx.matmul(d, task.sigma), mx.transpose(d)))
    return quad + task.noise_std**2 * task.n


def population_grad(task: ConceptTask, w: Matrix) -> Matrix:
    """Exact risk gradient 2 (W - W*) Sigma."""
    if task.kind != LINEAR_POPULATION:
        raise ValueError("population gradient is exact only for linear-population tasks")
    d = mx.sub(w, task.targets[0])
    return mx.scale(mx.matmul(d, task.sigma), 2.0)


def make_linear_stream(
    count: int,
    m: int,
    n: int,
    spectrum: SpectrumSpec,
    noise_std: float,
    rng,
    kind: str = LINEAR_POPULATION,
    p: int = 64,
    mixing: float = 0.0,
) -> list[ConceptTask]:
    """Concept stream with optionally correlated teachers.

    With mixing coefficient c, target_j = sqrt(1 - c^2) G_j + c G_shared,
    all scaled 1/sqrt(m); c = 0 gives independent teachers.
    """
    if not 0.0 <= mixing <= 1.0:
        raise ValueError("mixing must be in [0, 1]")
    shared = mx.gaussian_matrix(n, m, rng, scale=1.0 / math.sqrt(m))
    tasks = []
    for child in split(rng, count):
        own = mx.gaussian_matrix(n, m, child, scale=1.0 / math.sqrt(m))
        target = mx.add(
            mx.scale(own, math.sqrt(1.0 - mixing**2)), mx.scale(shared, mixing)
        )
        tasks.append(
            make_linear_task(
                m, n, spectrum, noise_std, child, kind=kind, p=p, target=target
            )
        )
    return tasks
