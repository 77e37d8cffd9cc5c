"""Finite-difference gradient suite over every layer op, the blocks and the network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    BatchNormState,
    Tensor,
    batchnorm2d,
    concat_channels,
    conv2d,
    gradcheck,
    maxpool2,
    pointwise,
    upsample_bilinear2,
)
from .model import Block, ModelConfig, UNetPP, plain_block, residual_block
from .training import weighted_bce

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    refined: int = 0
    kinks: int = 0

    @property
    def ok(self) -> bool:
        return bool(self.error < self.tol)


def _shape(rng: np.random.Generator, min_hw: int = 2, even: bool = False) -> tuple[int, int, int, int]:
    """A random shape no larger than (2, 3, 8, 8)."""
    b, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    if even:
        h, w = 2 * rng.integers(1, 5, 2)
    else:
        h, w = rng.integers(min_hw, 9, 2)
    return b, c, int(h), int(w)


def _leaf(a: np.ndarray) -> Tensor:
    return Tensor(a, requires_grad=True)


def _distinct(rng: np.random.Generator, shape) -> np.ndarray:
    # well separated values keep every pooling argmax away from ties
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + 0.01 * rng.random(n)).reshape(shape)


def _fill(blk: Block, rng: np.random.Generator) -> None:
    for t in blk.params.values():
        t.data[...] = rng.normal(size=t.shape)


def gradient_suite(seed: int = 0, eps: float = 1e-5, n_model_params: int = 50) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []

    def check(name, fn, inputs, tol=OP_TOL, indices=None):
        info: dict = {}
        errs = gradcheck(fn, inputs, eps=eps, seed=seed, indices=indices, skip_kinks=True, report=info)
        out.append(CheckResult(name, float(max(errs)), tol, info["refined"], info["kinks"]))

    for k in (1, 3):
        b, c, h, w = _shape(rng)
        n = int(rng.integers(1, 4))
        x, wt, bias = _leaf(rng.normal(size=(b, c, h, w))), _leaf(rng.normal(size=(n, c, k, k))), _leaf(rng.normal(size=n))
        check(f"conv2d_{k}x{k}", lambda a, ww, bb: conv2d(a, ww, bb), [x, wt, bias])

    check("maxpool2", maxpool2, [_leaf(_distinct(rng, _shape(rng, even=True)))])
    b, c, h, w = _shape(rng)
    check("upsample_bilinear2", upsample_bilinear2, [_leaf(rng.normal(size=(b, c, min(h, 4), min(w, 4))))])

    for training in (True, False):
        b, c, h, w = _shape(rng)
        st = BatchNormState(c)
        st.gamma.data[...] = rng.normal(size=c)
        st.beta.data[...] = rng.normal(size=c)
        st.running_mean[...] = rng.normal(size=c)
        st.running_var[...] = rng.uniform(0.5, 2.0, c)
        st.num_batches_tracked = 1
        if training and b * h * w < 2:
            b = 2
        x = _leaf(rng.normal(size=(b, c, h, w)))
        mode = "train" if training else "eval"
        check(f"batchnorm2d_{mode}", lambda a, g, bb, t=training, s=st: batchnorm2d(a, s, t), [x, st.gamma, st.beta])

    for kind in ("relu", "sigmoid"):
        x = rng.normal(size=_shape(rng))
        x[np.abs(x) < 10 * eps] += 0.1  # stay off the relu kink
        check(kind, lambda a, k=kind: pointwise(k, a), [_leaf(x)])

    b, _, h, w = _shape(rng)
    check("concat_channels", lambda p, q: concat_channels([p, q]),
          [_leaf(rng.normal(size=(b, 2, h, w))), _leaf(rng.normal(size=(b, 3, h, w)))])

    for variant, fn in (("runetpp", residual_block), ("unetpp", plain_block)):
        blk = Block(variant, 3, 2)
        _fill(blk, rng)
        x = _leaf(rng.normal(size=(2, 3, 6, 6)))
        check(f"{variant}_block", lambda a, *ps, bl=blk, f=fn: f(a, bl, True), [x, *blk.params.values()])

    y = (rng.random((2, 1, 4, 4)) > 0.7).astype(float)
    check("weighted_bce", lambda a: weighted_bce(a, y, 7.0), [_leaf(rng.normal(size=(2, 1, 4, 4)))])

    model = UNetPP(ModelConfig(base_width=2, seed=seed))
    x = Tensor(rng.random((1, 10, 16, 16)))
    params = model.parameters()
    flat = [(k, i) for k, p in enumerate(params) for i in range(p.data.size)]
    by_param: dict[int, list[int]] = {}
    for j in rng.choice(len(flat), n_model_params, replace=False):
        k, i = flat[j]
        by_param.setdefault(k, []).append(i)
    chosen = sorted(by_param)

    def net(*_):
        h = model(x, training=True)
        return h["y01"] + h["y02"] + h["y03"]

    check("runetpp_model_sample", net, [params[k] for k in chosen], tol=MODEL_TOL,
          indices={q: np.array(by_param[k]) for q, k in enumerate(chosen)})
    return out


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'op':<24}{'max_rel_error':>15}{'tol':>9}{'refined':>9}{'kinks':>7}  status"]
    for r in results:
        lines.append(f"{r.name:<24}{r.error:>15.3e}{r.tol:>9.0e}{r.refined:>9d}{r.kinks:>7d}  "
                     f"{'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
