"""Loss values, partial gradients, and the cross-factor curvature
contraction: analytic for the linear task families, finite differences for
deep tasks, plus the finite-difference validators used to certify every
analytic path.

All functions are pure; tasks and factors are shared immutably.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matrix as mx
from . import tasks as tk
from .errors import ShapeError
from .matrix import Matrix

FD_STEP = 1e-5


@dataclass(frozen=True)
class GradPair:
    """Partial gradients for one factor pair plus the loss value."""

    grad_a: Matrix  # n x r
    grad_b: Matrix  # m x r
    loss: float


def _check_factor_shapes(task: tk.ConceptTask, w0: Matrix, a: Matrix, b: Matrix):
    if w0.shape != (task.n, task.m):
        raise ShapeError(f"base weight {w0.shape} does not match task ({task.n}, {task.m})")
    if a.rows != task.n or b.rows != task.m or a.cols != b.cols:
        raise ShapeError(
            f"factors a{a.shape}, b{b.shape} inconsistent with task ({task.n}, {task.m})"
        )


def composed(w0: Matrix, a: Matrix, b: Matrix) -> Matrix:
    return mx.add(w0, mx.matmul(a, mx.transpose(b)))


def loss_value(task: tk.ConceptTask, w0: Matrix, a: Matrix, b: Matrix) -> float:
    """Loss of the single adapted layer w0 + a b^T on the task."""
    _check_factor_shapes(task, w0, a, b)
    w = composed(w0, a, b)
    if task.kind == tk.LINEAR_POPULATION:
        return tk.population_loss(task, w)
    if task.kind == tk.LINEAR_SAMPLED:
        out = mx.matmul(w, task.x_train)
        return tk.batch_mse(out, task.y_train)
    raise ValueError(f"single-layer loss undefined for task kind {task.kind!r}")


def loss_and_grads(task: tk.ConceptTask, w0: Matrix, a: Matrix, b: Matrix) -> GradPair:
    """Loss with both partials.

    Sampled route over p columns with residual R = Y - (W0 + A B^T) X:
    loss = |R|_F^2 / p, grad_A = -(2/p) R X^T B, grad_B = -(2/p) X R^T A.
    The population route replaces the batch second moments by the exact
    covariance.  Both routes are certified against finite differences.
    """
    _check_factor_shapes(task, w0, a, b)
    if task.kind == tk.LINEAR_POPULATION:
        d = mx.sub(composed(w0, a, b), task.targets[0])
        dsig = mx.matmul(d, task.sigma)
        loss = mx.inner(dsig, d) + task.noise_std**2 * task.n
        grad_a = mx.scale(mx.matmul(dsig, b), 2.0)
        grad_b = mx.scale(mx.matmul(mx.transpose(dsig), a), 2.0)
        return GradPair(grad_a=grad_a, grad_b=grad_b, loss=loss)
    if task.kind == tk.LINEAR_SAMPLED:
        x, y = task.x_train, task.y_train
        p = x.cols
        r = mx.sub(y, mx.matmul(composed(w0, a, b), x))
        loss = mx.inner(r, r) / p
        rxt = mx.matmul(r, mx.transpose(x))
        grad_a = mx.scale(mx.matmul(rxt, b), -2.0 / p)
        grad_b = mx.scale(mx.matmul(mx.transpose(rxt), a), -2.0 / p)
        return GradPair(grad_a=grad_a, grad_b=grad_b, loss=loss)
    raise ValueError(f"single-layer gradients undefined for task kind {task.kind!r}")


def cross_hessian_contract(
    task: tk.ConceptTask, w0: Matrix, a0: Matrix, b: Matrix, g_a: Matrix
) -> Matrix:
    """Mixed-curvature contraction: the gradient with respect to B of
    <g_a, grad_A loss(a0, B)> evaluated at B = b.  Maps n x r to m x r.

    Closed forms (certified against the scalar finite-difference oracle):
      sampled     -(2/p) X (Y - W0 X)^T G + (2/p) X X^T B (G^T A0 + A0^T G)
      population   2 Sigma (W0 - W*)^T G + 2 Sigma B (G^T A0 + A0^T G)
    """
    _check_factor_shapes(task, w0, a0, b)
    if g_a.shape != a0.shape:
        raise ShapeError(f"contraction input {g_a.shape} != factor shape {a0.shape}")
    sym = mx.add(
        mx.matmul(mx.transpose(g_a), a0), mx.matmul(mx.transpose(a0), g_a)
    )  # r x r
    if task.kind == tk.LINEAR_POPULATION:
        e = mx.sub(w0, task.targets[0])
        first = mx.scale(mx.matmul(task.sigma, mx.matmul(mx.transpose(e), g_a)), 2.0)
        second = mx.scale(mx.matmul(task.sigma, mx.matmul(b, sym)), 2.0)
        return mx.add(first, second)
    if task.kind == tk.LINEAR_SAMPLED:
        x, y = task.x_train, task.y_train
        p = x.cols
        resid0 = mx.sub(y, mx.matmul(w0, x))  # Y - W0 X, independent of factors
        first = mx.scale(
            mx.matmul(x, mx.matmul(mx.transpose(resid0), g_a)), -2.0 / p
        )
        xxt = mx.matmul(x, mx.transpose(x))
        second = mx.scale(mx.matmul(xxt, mx.matmul(b, sym)), 2.0 / p)
        return mx.add(first, second)
    raise ValueError(f"cross-Hessian undefined for task kind {task.kind!r}")


def reduced_gradient(
    task: tk.ConceptTask,
    w0: Matrix,
    a_k: Matrix,
    b: Matrix,
    g_a_at_updated: Matrix | None,
    alpha: float,
    hessian_b: Matrix | None = None,
) -> Matrix:
    """Gradient of the one-step-reduced objective
    Phi(B) = loss(a_k - alpha * grad_A loss(a_k, B), B):

        direct partial at the updated factor
        minus alpha times the contraction of the inner residual.

    ``hessian_b`` pins the contraction at a different point (the optimizer's
    outer-iterate mode); it defaults to ``b``, which is the exact gradient
    of Phi and what the finite-difference oracle checks.
    """
    inner = loss_and_grads(task, w0, a_k, b)
    a_updated = mx.sub(a_k, mx.scale(inner.grad_a, alpha))
    at_updated = loss_and_grads(task, w0, a_updated, b)
    g_a = g_a_at_updated if g_a_at_updated is not None else at_updated.grad_a
    contraction = cross_hessian_contract(
        task, w0, a_k, hessian_b if hessian_b is not None else b, g_a
    )
    return mx.sub(at_updated.grad_b, mx.scale(contraction, alpha))


# -- finite-difference validators ---------------------------------------------


def _perturb(mat: Matrix, i: int, j: int, h: float) -> Matrix:
    out = mat.data.copy()
    out[i * mat.cols + j] += h
    return Matrix(mat.rows, mat.cols, out)


def fd_grads(
    task: tk.ConceptTask, w0: Matrix, a: Matrix, b: Matrix, h: float = FD_STEP
) -> tuple[Matrix, Matrix]:
    """Central-difference partial gradients of the single-layer loss."""
    ga = np.zeros(a.rows * a.cols)
    for i in range(a.rows):
        for j in range(a.cols):
            up = loss_value(task, w0, _perturb(a, i, j, h), b)
            dn = loss_value(task, w0, _perturb(a, i, j, -h), b)
            ga[i * a.cols + j] = (up - dn) / (2 * h)
    gb = np.zeros(b.rows * b.cols)
    for i in range(b.rows):
        for j in range(b.cols):
            up = loss_value(task, w0, a, _perturb(b, i, j, h))
            dn = loss_value(task, w0, a, _perturb(b, i, j, -h))
            gb[i * b.cols + j] = (up - dn) / (2 * h)
    return Matrix(a.rows, a.cols, ga), Matrix(b.rows, b.cols, gb)


def fd_cross_hessian(
    task: tk.ConceptTask,
    w0: Matrix,
    a0: Matrix,
    b: Matrix,
    g_a: Matrix,
    h: float = FD_STEP,
) -> Matrix:
    """Entrywise central differences of phi(B) = <g_a, grad_A loss(a0, B)>."""

    def phi(bmat: Matrix) -> float:
        return mx.inner(g_a, loss_and_grads(task, w0, a0, bmat).grad_a)

    out = np.zeros(b.rows * b.cols)
    for i in range(b.rows):
        for j in range(b.cols):
            out[i * b.cols + j] = (
                phi(_perturb(b, i, j, h)) - phi(_perturb(b, i, j, -h))
            ) / (2 * h)
    return Matrix(b.rows, b.cols, out)


def fd_reduced_gradient(
    task: tk.ConceptTask,
    w0: Matrix,
    a_k: Matrix,
    b: Matrix,
    alpha: float,
    h: float = FD_STEP,
) -> Matrix:
    """Central differences of the reduced objective Phi(B) itself."""

    def phi(bmat: Matrix) -> float:
        g = loss_and_grads(task, w0, a_k, bmat).grad_a
        return loss_value(task, w0, mx.sub(a_k, mx.scale(g, alpha)), bmat)

    out = np.zeros(b.rows * b.cols)
    for i in range(b.rows):
        for j in range(b.cols):
            out[i * b.cols + j] = (
                phi(_perturb(b, i, j, h)) - phi(_perturb(b, i, j, -h))
            ) / (2 * h)
    return Matrix(b.rows, b.cols, out)


# -- deep (multi-layer) oracles -----------------------------------------------


def deep_loss_and_grads(
    task: tk.ConceptTask,
    w0s: list[Matrix],
    a_list: list[Matrix],
    b_list: list[Matrix],
) -> tuple[float, list[GradPair]]:
    """Loss and per-layer partials of the student network by reverse
    accumulation over the fixed training batch."""
    if task.kind != tk.DEEP:
        raise ValueError("deep gradients require a deep task")
    nl = task.num_layers
    if not (len(w0s) == len(a_list) == len(b_list) == nl):
        raise ShapeError("per-layer factor lists do not match the task depth")
    weights = [composed(w0s[ell], a_list[ell], b_list[ell]) for ell in range(nl)]
    x, y = task.x_train, task.y_train
    p = x.cols

    inputs = [x]  # input reaching each layer
    pre = []  # pre-activation of each layer
    h = x
    for ell in range(nl):
        z = mx.matmul(weights[ell], h)
        pre.append(z)
        h = tk._activate(task, z) if ell < nl - 1 else z
        inputs.append(h)
    out = inputs[-1]
    diff = mx.sub(out, y)
    loss = mx.inner(diff, diff) / p

    grads: list[GradPair | None] = [None] * nl
    gz = mx.scale(diff, 2.0 / p)  # d loss / d pre-activation of the last layer
    for ell in range(nl - 1, -1, -1):
        gw = mx.matmul(gz, mx.transpose(inputs[ell]))
        grads[ell] = GradPair(
            grad_a=mx.matmul(gw, b_list[ell]),
            grad_b=mx.matmul(mx.transpose(gw), a_list[ell]),
            loss=loss,
        )
        if ell > 0:
            gh = mx.matmul(mx.transpose(weights[ell]), gz)
            if task.activation == "tanh":
                act = inputs[ell]
                gz = Matrix(
                    gh.rows, gh.cols, gh.data * (1.0 - act.data * act.data)
                )
            else:
                gz = gh
    return loss, grads  # type: ignore[return-value]


def deep_cross_hessian(
    task: tk.ConceptTask,
    w0s: list[Matrix],
    a0_list: list[Matrix],
    b_list: list[Matrix],
    layer: int,
    g_a: Matrix,
    h: float = FD_STEP,
) -> Matrix:
    """Per-layer contraction for deep tasks by central differences of
    phi(B_layer) = <g_a, grad_A_layer loss(A0, B)>; other layers fixed."""

    def phi(bmat: Matrix) -> float:
        bs = list(b_list)
        bs[layer] = bmat
        _, grads = deep_loss_and_grads(task, w0s, a0_list, bs)
        return mx.inner(g_a, grads[layer].grad_a)

    b = b_list[layer]
    out = np.zeros(b.rows * b.cols)
    for i in range(b.rows):
        for j in range(b.cols):
            out[i * b.cols + j] = (
                phi(_perturb(b, i, j, h)) - phi(_perturb(b, i, j, -h))
            ) / (2 * h)
    return Matrix(b.rows, b.cols, out)


# -- objective protocol used by the optimizer ---------------------------------


class Objective:
    """Uniform multi-layer view of a task for the optimizer: a joint loss
    over per-layer factor lists with per-layer partials and contractions."""

    def __init__(self, task: tk.ConceptTask, w0s: list[Matrix]):
        self.task = task
        self.w0s = list(w0s)
        if task.kind == tk.DEEP:
            expect = task.layer_dims()
            got = [(w.rows, w.cols) for w in w0s]
            if got != expect:
                raise ShapeError(f"base weights {got} do not match task layers {expect}")
        else:
            if len(w0s) != 1:
                raise ShapeError("linear tasks have exactly one layer")
            if w0s[0].shape != (task.n, task.m):
                raise ShapeError(
                    f"base weight {w0s[0].shape} != ({task.n}, {task.m})"
                )

    @property
    def num_layers(self) -> int:
        return len(self.w0s)

    def factor_shapes(self, rank: int) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        """Per-layer ((n, r), (m, r)) shapes for a given adapter rank."""
        return [((w.rows, rank), (w.cols, rank)) for w in self.w0s]

    def loss_and_grads(self, a_list, b_list) -> tuple[float, list[GradPair]]:
        if self.task.kind == tk.DEEP:
            return deep_loss_and_grads(self.task, self.w0s, a_list, b_list)
        gp = loss_and_grads(self.task, self.w0s[0], a_list[0], b_list[0])
        return gp.loss, [gp]

    def cross_hessian(self, layer, a0_list, b_list, g_a) -> Matrix:
        if self.task.kind == tk.DEEP:
            return deep_cross_hessian(
                self.task, self.w0s, a0_list, b_list, layer, g_a
            )
        return cross_hessian_contract(
            self.task, self.w0s[0], a0_list[0], b_list[0], g_a
        )
