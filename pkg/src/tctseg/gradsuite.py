"""Finite-difference gradient suite over every tape primitive and the full objective.

Every check runs in float64 and reports the worst relative error between tape
gradients and central differences.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from tctseg import losses as L
from tctseg import tensor as T
from tctseg.unet import UNetConfig, build_unet

DEFAULT_TOL = 1e-4
NETWORK_STEP = 1e-4
# largest share of probed coordinates allowed to be unresolved
MAX_UNRESOLVED = 0.05


@dataclass
class GradResult:
    name: str
    error: float
    tol: float
    probed: int = 0
    unresolved: int = 0

    @property
    def ok(self):
        if self.probed and self.unresolved > MAX_UNRESOLVED * self.probed:
            return False
        return self.error < self.tol


def _weighted(out, rng):
    """Scalar probe: sum(out * R) for a fixed random R, touches every output entry."""
    r = T.Tensor(rng.standard_normal(out.shape))
    return T.tsum(T.mul(out, r))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def primitive_cases(seed=0):
    """(name, fn, inputs) for every differentiable primitive."""
    rng = np.random.default_rng(seed)

    def t(*shape, positive=False, gap=False):
        if positive:
            return T.Tensor(rng.uniform(0.5, 2.0, shape))
        if gap:
            return T.Tensor(_away_from_zero(rng, shape))
        return T.Tensor(rng.standard_normal(shape))

    probe_rng = lambda: np.random.default_rng(seed + 1)  # noqa: E731

    def probe(op):
        def fn(*xs):
            return _weighted(op(*xs), probe_rng())
        return fn

    mix = rng.standard_normal((2, 4))
    cases = [
        ("add", probe(T.add), [t(2, 3, 4), t(2, 3, 4)]),
        ("add_scalar", probe(T.add), [t(2, 3, 4), t()]),
        ("sub", probe(T.sub), [t(2, 3, 4), t(2, 3, 4)]),
        ("mul", probe(T.mul), [t(2, 3, 4), t(2, 3, 4)]),
        ("mul_scalar", probe(T.mul), [t(), t(2, 3, 4)]),
        ("div", probe(T.div), [t(2, 3, 4), t(2, 3, 4, positive=True)]),
        ("scale", probe(lambda a: T.scale(a, -0.7)), [t(3, 4)]),
        ("relu", probe(T.relu), [t(3, 5, gap=True)]),
        ("log", probe(T.log), [t(3, 5, positive=True)]),
        ("exp", probe(T.exp), [t(3, 5)]),
        ("square", probe(T.square), [t(3, 5)]),
        ("sum_all", lambda a: T.tsum(a), [t(2, 3, 4)]),
        ("sum_axes", probe(lambda a: T.tsum(a, axis=(0, 2))), [t(2, 3, 4)]),
        ("sum_keepdims", probe(lambda a: T.tsum(a, axis=1, keepdims=True)), [t(2, 3, 4)]),
        ("mean", probe(lambda a: T.mean(a, axis=2)), [t(2, 3, 4)]),
        ("getitem_slice", probe(lambda a: a[:, 1:3]), [t(2, 4, 3)]),
        ("getitem_fancy", probe(lambda a: a[:, [0, 2, 2]]), [t(2, 4, 3)]),
        ("reshape", probe(lambda a: T.reshape(a, (6, 4))), [t(2, 3, 4)]),
        ("concat", probe(lambda a, b: T.concat([a, b], axis=1)), [t(2, 3, 4), t(2, 1, 4)]),
        ("channel_mix", probe(lambda a: T.channel_mix(a, mix)), [t(2, 4, 3, 3)]),
        ("softmax_channels", probe(T.softmax_channels), [t(2, 4, 3, 3, 3)]),
        ("conv3d_small", probe(lambda x, w, b: T.conv3d(x, w, b)), [t(2, 2, 4, 5, 6), t(3, 2, 3, 3, 3), t(3)]),
        ("conv3d_large", probe(lambda x, w, b: T.conv3d(x, w, b)), [t(1, 2, 16, 16, 16), t(3, 2, 3, 3, 3), t(3)]),
        ("conv3d_1x1", probe(lambda x, w: T.conv3d(x, w, padding=0)), [t(2, 3, 4, 4, 4), t(2, 3, 1, 1, 1)]),
        ("maxpool3d", probe(lambda a: T.maxpool3d(a, 2)), [t(2, 2, 4, 4, 6)]),
        ("upsample_trilinear3d", probe(lambda a: T.upsample_trilinear3d(a, 2)), [t(2, 2, 3, 4, 2)]),
    ]
    return cases


def loss_cases(seed=0):
    """Loss-level checks: merged Dice terms, consistency and the weighted total."""
    rng = np.random.default_rng(seed)
    n = 3
    shape = (2, 4, 4, 4)
    ls = L.PartialLabelSet((1, 3), n)
    labels = rng.choice([0, 1, 3], size=shape).astype(np.uint8)
    y = L.one_hot_target(labels, ls)
    logits = T.Tensor(rng.standard_normal((2, n + 1) + shape[1:]))
    aths = [T.Tensor(rng.standard_normal((2, 2) + shape[1:])) for _ in range(n)]

    def main_dice(z):
        return L.dice_loss_main(L.merge_main_probs(T.softmax_channels(z), ls, "phi"), y)

    def aux_dice(*zs):
        g = {j: T.softmax_channels(zs[j - 1]) for j in ls.phi}
        return L.dice_loss_aux(g, y, ls)

    cfg = L.FilterConfig("task_median")

    def consistency(z, *zs):
        q = L.merge_main_probs(T.softmax_channels(z), ls, "omega")
        g = [T.softmax_channels(a) for a in zs]
        with T.no_grad():
            decision = L.compute_filter(q, g, cfg)
        return L.consistency_loss(q, g, decision)

    def weighted_total(z, a1, a3, s1, s2):
        u = L.UncertaintyParams("uauwl", n, dtype=np.float64)
        u.params["uncertainty.s1"], u.params["uncertainty.s2"] = s1, s2
        l_main = main_dice(z)
        l_aux = aux_dice(a1, aths[1], a3)
        q = L.merge_main_probs(T.softmax_channels(z), ls, "omega")
        g = [T.softmax_channels(a) for a in (a1, aths[1], a3)]
        with T.no_grad():
            decision = L.compute_filter(q, g, L.FilterConfig("none"))
        return L.total_loss(l_main, l_aux, L.consistency_loss(q, g, decision), u, 0.3)

    s = lambda v: T.Tensor(np.array(v))  # noqa: E731
    return [
        ("dice_main_merged", main_dice, [logits]),
        ("dice_aux", aux_dice, aths),
        ("consistency", consistency, [logits] + aths),
        ("total_uauwl", weighted_total, [logits, aths[0], aths[2], s(0.3), s(-0.2)]),
    ]


def network_case(base_width=2, patch=8, depth=4, seed=0, weighting="uauwl", filter_strategy="task_median"):
    """L_total of the full training objective w.r.t. every network and s parameter."""
    # local import: trainer pulls in data/metrics, keep tensor-level checks light
    from tctseg.trainer import PatchBatch, TrainConfig, compute_losses

    n = 3
    rng = np.random.default_rng(seed)
    ucfg = UNetConfig(num_classes=n, base_width=base_width, patch_size=(patch,) * 3, depth=depth)
    model = build_unet(ucfg, seed=seed).astype(np.float64)
    # zero biases put whole dead channels exactly on the relu kink, where
    # central differences are meaningless; nudge them off it
    for name, p in model.named_parameters():
        if name.endswith(".bias"):
            p.data = rng.uniform(-0.1, 0.1, p.shape)
    u = L.UncertaintyParams(weighting, n, dtype=np.float64)
    for p in u.parameters():
        p.data = np.array(rng.uniform(-0.5, 0.5))
    cfg = TrainConfig(method="tct", weighting=weighting, filter_strategy=filter_strategy,
                      w_max=0.1, epochs=10)
    sets = [L.PartialLabelSet((1,), n), L.PartialLabelSet((2, 3), n)]
    labels = np.stack([
        rng.choice([0, 1], size=(patch,) * 3),
        rng.choice([0, 2, 3], size=(patch,) * 3),
    ]).astype(np.uint8)
    batch = PatchBatch(rng.standard_normal((2, 1) + (patch,) * 3), labels, sets)

    names = [k for k, _ in model.named_parameters()] + [k for k, _ in u.named_parameters()]
    inputs = [p for _, p in model.named_parameters()] + u.parameters()
    n_model = len(model.params)

    def fn(*ts):
        model.params = OrderedDict(zip(names[:n_model], ts[:n_model]))
        u.params = dict(zip(names[n_model:], ts[n_model:]))
        total, _ = compute_losses(model, batch, cfg, u, epoch=4)
        return total

    return f"L_total_w{base_width}_{patch}cubed", fn, inputs


def run_suite(tol=DEFAULT_TOL, seed=0, include_network=True, max_coords=24):
    results = []
    for name, fn, inputs in primitive_cases(seed) + loss_cases(seed):
        results.append(GradResult(name, T.grad_check(fn, inputs, max_coords=64, seed=seed), tol))
    if include_network:
        name, fn, inputs = network_case(seed=seed)
        # coordinates the difference quotient cannot resolve (kinks, tiny
        # entries) are counted; too many of them fails the check
        info = {}
        err = T.grad_check(fn, inputs, h=NETWORK_STEP, max_coords=max_coords, seed=seed,
                           resolve=tol, report=info)
        results.append(GradResult(name, err, tol, info["probed"], info["unresolved"]))
    return results
