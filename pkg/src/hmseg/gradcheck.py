"""Finite-difference checks for every differentiable op and the full network."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .labels import one_hot
from .losses import default_weights, jaccard_loss
from .network import ModalityMask, NetworkConfig, forward, init_params
from .tensor import GradCheckReport, Tensor, grad_check

STEP = 1e-5


def _project(out: Tensor, r: np.ndarray) -> Tensor:
    return T.dot_const(out, r)


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _random_probs(rng, shape):
    z = rng.normal(size=shape)
    e = np.exp(z - z.max(axis=0))
    return e / e.sum(axis=0)


def op_checks(seed: int = 0, tol: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(seed)
    out = []

    def check(name, fn, arrays, **kw):
        tensors = [Tensor(a) for a in arrays]
        out.append((name, grad_check(fn, tensors, STEP, tol, **kw)))

    for dil in (1, 2, 3):
        r = rng.normal(size=(3, 7, 6))
        check(f"conv2d dilation={dil}",
              lambda x, k, r=r, dil=dil: _project(T.conv2d(x, k, dil), r),
              [rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 3))])
    r = rng.normal(size=(4, 5, 5))
    check("conv2d 1x1 + bias", lambda x, k, b: _project(T.conv2d(x, k, 1, bias=b), r),
          [rng.normal(size=(2, 5, 5)), rng.normal(size=(4, 2, 1, 1)), rng.normal(size=4)])
    r = rng.normal(size=(3, 4, 5))
    check("instance_norm", lambda x, s, b: _project(T.instance_norm(x, s, b), r),
          [rng.normal(size=(3, 4, 5)), rng.normal(size=3), rng.normal(size=3)])
    r = rng.normal(size=(3, 4, 4))
    check("relu", lambda x: _project(T.relu(x), r), [_away_from_zero(rng, (3, 4, 4))])
    check("elementwise_add", lambda a, b: _project(T.add(a, b), r),
          [rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))])
    check("mul", lambda a, b: _project(T.mul(a, b), r),
          [rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))])
    check("sub", lambda a, b: _project(T.sub(a, b), r),
          [rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))])
    check("softmax_channels", lambda x: _project(T.softmax_channels(x), r), [rng.normal(size=(3, 4, 4))])
    check("reduce_mean", lambda x: T.mul(T.reduce_mean(T.mul(x, x)), 1.0), [rng.normal(size=(3, 4, 4))])
    rs = rng.normal(size=3)
    check("reduce_sum", lambda x: T.dot_const(T.reduce_sum(x, axis=(1, 2)), rs), [rng.normal(size=(3, 4, 4))])
    check("safe_div", lambda a, b: T.dot_const(T.safe_div(a, b), rs),
          [rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)])
    check("take_channels", lambda x: _project(T.take_channels(x, [0, 2]), r[[0, 2]]),
          [rng.normal(size=(3, 4, 4))])

    w = default_weights()
    target = one_hot(rng.integers(0, 8, size=(6, 6)))
    check("jaccard_loss wrt pred", lambda p: jaccard_loss(p, target, w, check=False),
          [_random_probs(rng, (8, 6, 6))])
    check("jaccard_loss soft/soft", lambda p, g: jaccard_loss(p, g, w, (0, 1, 2, 3, 4, 5, 6), check=False),
          [_random_probs(rng, (8, 6, 6)), _random_probs(rng, (8, 6, 6))])
    return out


def network_check(config: NetworkConfig | None = None, seed: int = 0, tol: float = 1e-4,
                  max_elements: int | None = 12, size: int = 8) -> GradCheckReport:
    """Gradient of the Jaccard loss of a two-modality forward pass w.r.t. every parameter tensor."""
    config = config or NetworkConfig()
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    image = rng.normal(size=(config.n_modalities, size, size))
    target = one_hot(rng.integers(0, config.n_classes, size=(size, size)))
    w = default_weights()
    mask = ModalityMask.all(config.n_modalities)
    names = params.names()

    def fn(*tensors):
        params.tensors.update(zip(names, tensors))
        return jaccard_loss(forward(params, image, mask), target, w, check=False)

    return grad_check(fn, params.values(), STEP, tol, names=names, max_elements=max_elements,
                      rng=np.random.default_rng(seed + 1))


def run_gradcheck_suite(seed: int = 0, tol: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    results = op_checks(seed, tol)
    results.append(("network (small, all entries)",
                    network_check(NetworkConfig(base_channels=4), seed, tol, max_elements=None)))
    results.append(("network (default, sampled)", network_check(NetworkConfig(), seed, tol, max_elements=12)))
    return results
