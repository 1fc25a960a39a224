"""Finite-difference gradient cases shared by the unit and acceptance suites."""

import numpy as np

from vetocta.model import VetConfig, init_weights, vet_forward
from vetocta.nn import functional as F
from vetocta.nn.gradcheck import numeric_grad, relative_error
from vetocta.nn.tensor import Tensor, no_grad

TOL = 1e-4


def _n(rng, *shape):
    return rng.standard_normal(shape)


def _hw(rng):
    return int(rng.integers(2, 6)), int(rng.integers(2, 6))


def _conv(rng, stride):
    h, w = _hw(rng)
    ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    arrays = [_n(rng, 2, h, w, ci), _n(rng, 3, 3, ci, co), _n(rng, co)]
    return (lambda x, k, b: F.conv2d(x, k, b, stride=stride)), arrays


def _convt(rng):
    h, w = _hw(rng)
    ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    arrays = [_n(rng, 2, h, w, ci), _n(rng, 3, 3, co, ci), _n(rng, co)]
    return (lambda y, k, b: F.conv2d_transpose(y, k, b, stride=2)), arrays


def _mha(rng):
    t, heads = int(rng.integers(1, 6)), int(rng.integers(1, 3))
    c = heads * int(rng.integers(1, 4))
    return (lambda q, k, v: F.multi_head_attention(q, k, v, heads)), [_n(rng, 2, t, c) for _ in range(3)]


def _ffn(rng):
    c, h = int(rng.integers(1, 5)), int(rng.integers(1, 6))
    return F.ffn, [_n(rng, 3, c), _n(rng, c, h), _n(rng, h), _n(rng, h, c), _n(rng, c)]


def _ln(rng):
    c = int(rng.integers(2, 6))
    return F.layer_norm, [_n(rng, 2, 3, c), _n(rng, c), _n(rng, c)]


def _bcast(op):
    return lambda rng: (op, [_n(rng, 3, 4), _n(rng, 1, 4)])


OP_CASES = {
    "add": _bcast(lambda a, b: a + b),
    "sub": _bcast(lambda a, b: a - b),
    "mul": _bcast(lambda a, b: a * b),
    "neg": lambda rng: ((lambda a: -a), [_n(rng, 3, 4)]),
    "matmul": lambda rng: ((lambda a, b: a @ b), [_n(rng, 2, 3, 4), _n(rng, 4, 5)]),
    "reshape": lambda rng: ((lambda a: a.reshape(4, 3) * a.reshape(4, 3)), [_n(rng, 3, 4)]),
    "transpose": lambda rng: ((lambda a: a.transpose(2, 0, 1) * a.transpose(2, 0, 1)), [_n(rng, 2, 3, 4)]),
    "sum": lambda rng: ((lambda a: a.sum(axis=1) * a.sum(axis=1)), [_n(rng, 3, 4)]),
    "mean": lambda rng: ((lambda a: a.mean(axis=0, keepdims=True) * a), [_n(rng, 3, 4)]),
    "conv2d": lambda rng: _conv(rng, 1),
    "conv2d_stride2": lambda rng: _conv(rng, 2),
    "conv2d_transpose": _convt,
    "linear": lambda rng: (F.linear, [_n(rng, 2, 3), _n(rng, 3, 4), _n(rng, 4)]),
    "layer_norm": _ln,
    "softmax": lambda rng: ((lambda a: F.softmax(a, axis=-1)), [_n(rng, 3, 5)]),
    "leaky_relu": lambda rng: ((lambda a: F.leaky_relu(a, 0.3)), [_n(rng, 4, 5)]),
    "gelu": lambda rng: (F.gelu, [_n(rng, 4, 5)]),
    "multi_head_attention": _mha,
    "ffn": _ffn,
    "mse_loss": lambda rng: (F.mse_loss, [_n(rng, 3, 4), _n(rng, 3, 4)]),
}


def check_op(name: str, seed: int) -> float:
    """Worst relative error over every input of one randomly shaped op instance."""
    rng = np.random.default_rng(seed)
    op, arrays = OP_CASES[name](rng)
    probe = op(*[Tensor(a) for a in arrays])
    weights = _n(rng, *probe.shape) if probe.shape else np.array(1.0)

    def scalar(*arrs):
        with no_grad():
            return float((op(*[Tensor(a) for a in arrs]).data * weights).sum())

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    (op(*tensors) * Tensor(weights)).sum().backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        worst = max(worst, relative_error(t.grad, numeric_grad(scalar, arrays, i)))
    return worst


TINY_VET = VetConfig(channels=8, vfe_layers=1, heads=4, ffn_hidden=16)


def check_tiny_vet(seed: int, per_tensor: int | None = 4) -> float:
    """Relative error of the full-model gradient on an 8x8 input.

    ``per_tensor`` coordinates are sampled from every weight tensor and the
    input; ``None`` checks all of them.
    """
    rng = np.random.default_rng(seed)
    weights = init_weights(TINY_VET, seed=seed, dtype=np.float64)
    # nonzero biases and LN shifts so every path carries signal
    for p in weights.values():
        if not p.name.endswith(".kernel"):
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    x = rng.random((1, 8, 8, 1))
    r = rng.standard_normal((1, 8, 8, 1))

    def scalar():
        with no_grad():
            return float((vet_forward(x, weights, TINY_VET).data * r).sum())

    xt = Tensor(x.copy(), requires_grad=True)
    (vet_forward(xt, weights, TINY_VET) * Tensor(r)).sum().backward()

    analytic, numeric = [], []
    targets = [(xt.grad, x)] + [(p.grad, p.data) for p in weights.values()]
    step = 1e-5
    for grad, arr in targets:
        flat = arr.reshape(-1)
        if per_tensor is None or flat.size <= per_tensor:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, per_tensor, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            hi = scalar()
            flat[i] = orig - step
            lo = scalar()
            flat[i] = orig
            analytic.append(grad.reshape(-1)[i])
            numeric.append((hi - lo) / (2 * step))
    return relative_error(np.array(analytic), np.array(numeric))
