"""Central finite-difference checks for the differentiable primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class CheckResult:
    op: str
    cases: int
    worst_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.worst_rel_err < self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(fn, arrays, index: int, h: float = 1e-5) -> np.ndarray:
    """d fn(*arrays) / d arrays[index] by central differences."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = fn(*base)
        x[i] = orig - h
        fm = fn(*base)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g


def check(fn, arrays, h: float = 1e-5, joint: bool = False) -> float:
    """Worst relative error of tape gradients of scalar ``fn`` over all inputs.

    ``fn`` takes Tensors and returns a scalar Tensor. With ``joint`` the
    error is taken over the concatenated gradient, which suits inputs whose
    true gradient is exactly zero (an attention key bias, say).
    """
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = fn(*leaves)
    grads = T.backward(out, tape)

    def scalar(*arrs):
        return float(fn(*[T.Tensor(a) for a in arrs]).data.reshape(-1)[0])

    analytic = [grads[leaf] for leaf in leaves]
    numeric = [numeric_grad(scalar, arrays, k, h) for k in range(len(arrays))]
    if joint:
        flat = lambda gs: np.concatenate([g.ravel() for g in gs])  # noqa: E731
        return relative_error(flat(analytic), flat(numeric))
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _case_arrays(op: str, rng):
    if op == "matmul":
        m, k, n = rng.integers(1, 5, size=3)
        return [rng.standard_normal((m, k)), rng.standard_normal((k, n))]
    if op == "batched_matmul":
        b, m, k, n = rng.integers(1, 4, size=4)
        return [rng.standard_normal((b, m, k)), rng.standard_normal((k, n))]
    if op == "softmax":
        return [rng.standard_normal((rng.integers(1, 4), rng.integers(1, 6))) * 3]
    if op == "masked_softmax":
        return [rng.standard_normal((3, 3)) * 3]
    if op == "layer_norm":
        n = int(rng.integers(2, 7))
        return [rng.standard_normal((rng.integers(1, 4), n)),
                1.0 + 0.3 * rng.standard_normal(n), 0.3 * rng.standard_normal(n)]
    if op in ("gelu", "log_sigmoid", "exp"):
        return [rng.standard_normal((rng.integers(1, 4), rng.integers(1, 5))) * 3]
    if op == "log":
        return [rng.uniform(0.2, 3.0, size=(rng.integers(1, 4), 3))]
    if op == "l2_normalize":
        return [rng.standard_normal((rng.integers(1, 4), rng.integers(2, 6)))]
    if op in ("add", "sub", "mul"):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        return [rng.standard_normal(shape), rng.standard_normal((1, shape[1]))]
    if op == "div":
        shape = (int(rng.integers(1, 4)), 3)
        return [rng.standard_normal(shape), rng.uniform(0.5, 2.0, size=(3,))]
    if op in ("sum", "mean", "reshape", "swapaxes", "take", "neg"):
        return [rng.standard_normal((3, 4))]
    raise KeyError(op)


def _case_fn(op: str, rng):
    w_rng = np.random.default_rng(rng.integers(2**32))
    proj = {}
    take_idx = rng.integers(0, 3, size=5)

    def fn(*xs):
        if op in ("matmul", "batched_matmul"):
            out = T.matmul(*xs)
        elif op == "softmax":
            out = T.softmax(xs[0], axis=-1)
        elif op == "masked_softmax":
            out = T.softmax(xs[0], axis=-1, mask=~np.eye(3, dtype=bool))
        elif op == "layer_norm":
            out = T.layer_norm(*xs, eps=1e-5)
        elif op == "sum":
            out = T.sum(xs[0], axis=1)
        elif op == "mean":
            out = T.mean(xs[0], axis=0)
        elif op == "reshape":
            out = T.reshape(xs[0], (2, 6))
        elif op == "swapaxes":
            out = T.swapaxes(xs[0], 0, 1)
        elif op == "take":
            out = T.take(xs[0], take_idx, axis=0)
        else:
            out = getattr(T, op)(*xs)
        # fixed random projection turns any output into a generic scalar
        if out.shape not in proj:
            proj[out.shape] = w_rng.standard_normal(out.shape)
        return T.sum(T.mul(out, proj[out.shape]))

    return fn


PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "matmul", "batched_matmul", "sum", "mean",
    "reshape", "swapaxes", "take", "exp", "log", "softmax", "masked_softmax",
    "layer_norm", "gelu", "log_sigmoid", "l2_normalize",
)


LOSSES = ("class_loss", "class_loss_masked", "multiview_loss", "multiview_loss_masked")
END_TO_END = "end_to_end"
ALL_OPS = PRIMITIVES + LOSSES + (END_TO_END,)


def _loss_case(op: str, rng):
    from ..losses import ContrastiveBatchView, class_loss, multiview_loss

    B, D = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    class_ids = rng.integers(0, 3, size=B)
    targets = rng.standard_normal((B, D))
    m = int(rng.integers(1, 4))
    unseen = rng.standard_normal((B * m, D))
    owners = np.repeat(np.arange(B), m)
    masked = op.endswith("_masked")
    loss_fn = class_loss if op.startswith("class") else multiview_loss

    def fn(fused, t, b):
        return loss_fn(ContrastiveBatchView(fused, targets, class_ids, t, b, unseen, owners, masked))

    arrays = [rng.standard_normal((B, D)) * 0.7, rng.uniform(0.5, 3.0, size=(1,)),
              rng.standard_normal(1)]
    return fn, arrays


def _end_to_end_case(rng):
    from .. import model as M
    from ..losses import ContrastiveBatchView, total_loss

    cfg = M.ModelConfig(descriptor_dim=3, model_dim=4, num_blocks=1, num_heads=2, mlp_hidden=4,
                        init_std=0.5)
    params = M.init_parameters(cfg, int(rng.integers(2**31)))
    names = list(params)
    B, n, m = 2, 3, 2
    class_ids = np.array([0, 1])
    targets = rng.standard_normal((B, cfg.descriptor_dim))
    unseen = rng.standard_normal((B * m, cfg.descriptor_dim))

    def fn(x, *ps):
        p = dict(zip(names, ps))
        fused = M.forward(x, p, cfg)
        t, b = M.loss_scalars(p)
        view = ContrastiveBatchView(fused, targets, class_ids, t, b, unseen,
                                    np.repeat(np.arange(B), m), True)
        return total_loss(view)[0]

    arrays = [rng.standard_normal((B, n, cfg.descriptor_dim))] + [
        params[k].data + 0.1 * rng.standard_normal(params[k].shape) for k in names]
    return fn, arrays


def check_primitive(op: str, cases: int = 100, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    """Worst relative error of ``op`` over ``cases`` random inputs.

    ``op`` is a primitive, one of the losses, or ``end_to_end`` (a micro
    model through the total loss, every parameter checked).
    """
    if op not in ALL_OPS:
        raise KeyError(f"unknown op {op!r}")
    rng = np.random.default_rng([seed, ALL_OPS.index(op)])
    worst = 0.0
    for _ in range(cases):
        if op in LOSSES:
            fn, arrays = _loss_case(op, rng)
        elif op == END_TO_END:
            fn, arrays = _end_to_end_case(rng)
        else:
            arrays = _case_arrays(op, rng)
            fn = _case_fn(op, rng)
        worst = max(worst, check(fn, arrays, joint=op == END_TO_END))
    return CheckResult(op, cases, worst, tol)
