"""Finite-difference checks of every differentiable piece of the model and losses."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .model import GreipModel, ModelConfig, adain
from .numerics import Tensor, grad_check_random, ops
from .objectives import FeatureQueue, continuity_loss, hr_l1_loss, orthogonality_loss, pearson_bvp_loss

TOLERANCE = 1e-4
TINY = ModelConfig(n_rois=4, n_frames=16, widths=(2, 3), dim=4, head_widths=(4, 3, 2), hr_bias_init=0.0)


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def ok(self) -> bool:
        return self.max_error < self.tolerance


def _normal(shape, scale=1.0):
    return lambda rng: rng.normal(0.0, scale, shape)


def _checks(seed: int) -> list[tuple[str, Callable, Callable]]:
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(3, 32))
    labels = rng.uniform(50, 110, 3)
    queue = FeatureQueue(capacity=8, dim=4, seed=seed)
    queue.q_l[:] = rng.uniform(50, 110, 8)
    queue.q_r_norms[:] = rng.uniform(0.5, 1.5, 8)

    x_ada = rng.normal(size=(2, 3, 5, 4))
    g_ada = 1.0 + 0.3 * rng.normal(size=(2, 4))
    b_ada = rng.normal(size=(2, 4))
    w_ada = rng.normal(size=(2, 3, 5, 4))

    model = GreipModel(TINY, seed=seed)
    for name, t in model.params.items():
        if name.endswith(".b") or name.startswith("hr_head"):
            model.params[name] = Tensor(rng.normal(0.0, 0.1, t.shape), requires_grad=True, name=name)
    fshape = (2,) + TINY.feature_shape + (TINY.dim,)
    z_fixed = rng.normal(size=fshape)
    c_gamma, c_beta = rng.normal(size=(2, TINY.dim)), rng.normal(size=(2, TINY.dim))
    c_nol = rng.normal(size=fshape)
    x_shape = (2, TINY.n_rois, TINY.n_frames, 3)
    c_bvp = rng.normal(size=(2, TINY.n_frames))
    c_hr = rng.normal(size=2)

    def with_param(name: str, fn: Callable[[], Tensor]) -> Callable[[Tensor], Tensor]:
        def f(p: Tensor) -> Tensor:
            saved = model.params[name]
            model.params[name] = p
            try:
                return fn()
            finally:
                model.params[name] = saved
        return f

    def nfel_scalar(z):
        gamma, beta = model.nfel(z)
        return ops.sum(gamma * c_gamma) + ops.sum(beta * c_beta)

    def predict_scalar(x):
        pred = model.predict(x, use_fusion=True)
        return ops.sum(pred.bvp * c_bvp) + ops.sum(pred.hr * c_hr)

    x_fixed = rng.uniform(0.0, 1.0, x_shape)
    unit = lambda rng: rng.uniform(0.0, 1.0, x_shape)  # noqa: E731

    return [
        ("pearson_bvp_loss", lambda p: pearson_bvp_loss(p, gt), _normal((3, 32))),
        ("hr_l1_loss", lambda h: hr_l1_loss(h, labels), lambda r: labels + r.normal(0, 5, 3)),
        ("continuity_loss", lambda z: continuity_loss(ops.l2_normalize(z), labels, queue, 1.0), _normal((3, 4))),
        ("orthogonality_loss", lambda z: orthogonality_loss(z, queue.q_r, 1.5e-3, queue.q_r_norms), _normal((3, 4))),
        ("adain/x", lambda x: ops.sum(adain(x, Tensor(g_ada), Tensor(b_ada)) * w_ada), _normal(x_ada.shape)),
        ("adain/gamma", lambda g: ops.sum(adain(Tensor(x_ada), g, Tensor(b_ada)) * w_ada), _normal(g_ada.shape)),
        ("adain/beta", lambda b: ops.sum(adain(Tensor(x_ada), Tensor(g_ada), b) * w_ada), _normal(b_ada.shape)),
        ("nfel/z_n", nfel_scalar, _normal(fshape)),
        ("nfel/fc1.w", with_param("nfel.fc1.w", lambda: nfel_scalar(Tensor(z_fixed))), _normal((4, 4))),
        ("nol/z_phy", lambda z: ops.sum(model.nol(z, Tensor(z_fixed)) * c_nol), _normal(fshape)),
        ("nol/z_n", lambda z: ops.sum(model.nol(Tensor(z_fixed), z) * c_nol), _normal(fshape)),
        ("nol/k1", with_param("nol.k1", lambda: ops.sum(model.nol(Tensor(c_nol), Tensor(z_fixed)) * c_nol)),
         _normal((3, 3, 4, 4), 0.5)),
        ("predict/input", predict_scalar, unit),
        ("predict/enc_rppg.conv0.w", with_param("enc_rppg.conv0.w", lambda: predict_scalar(Tensor(x_fixed))),
         _normal((3, 3, 3, 2), 0.5)),
        ("predict/enc_noise.conv1.w", with_param("enc_noise.conv1.w", lambda: predict_scalar(Tensor(x_fixed))),
         _normal((3, 3, 2, 3), 0.5)),
        ("predict/bvp_head.up0.w", with_param("bvp_head.up0.w", lambda: predict_scalar(Tensor(x_fixed))),
         _normal((3, 3, 4, 4), 0.5)),
    ]


def run_suite(seed: int = 0, n_points: int = 10) -> Iterator[CheckResult]:
    """Yield one result per check; each check covers ``n_points`` kink-free random points."""
    for name, f, sampler in _checks(seed):
        start = time.perf_counter()
        err = grad_check_random(f, sampler, np.random.default_rng([seed, len(name)]), n_points=n_points)
        yield CheckResult(name, err, time.perf_counter() - start)
