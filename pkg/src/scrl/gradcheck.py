"""Finite-difference gradient suite over layers, critic losses and the actor.

Everything runs in float64 on small networks so that central differences
are accurate to well below the 1e-4 tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .algorithm import (Agent, CriticPair, PolicyNet, actor_loss, critic_logits, hard_negative_gradient,
                        mc_critic_loss, mc_critic_step, td_critic_loss)
from .nn import (ConcatExtra, Conv2d, Dense, Flatten, LayerNorm, Network, ReLU, build_encoder, check_network,
                 numeric_gradient, relative_error)

TOLERANCE = 1e-4
H_LAYER = 1e-3
# Composite nets stack ReLUs; a step of 1e-3 crosses a kink often enough to
# break the central difference itself, so they use a smaller step.
H = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def _net(layers, shape, rng):
    net = Network(layers, shape, np.float64)
    for layer in net.layers:
        layer.init(rng)
    # random affine parameters so layer norm gain/bias are exercised
    net.params += 0.1 * rng.normal(size=net.n_params)
    return net


def _layer_cases(rng):
    x = rng.normal(size=(3, 6))
    img = rng.normal(size=(2, 2, 7, 7))
    yield "dense", _net([Dense(6, 4)], (6,), rng), x, None
    yield "layer_norm", _net([Dense(6, 5), LayerNorm((5,))], (6,), rng), x, None
    # inputs at least 0.1 away from the kink, so h = 1e-3 never crosses it
    away = np.sign(x) * (0.1 + np.abs(x))
    yield "relu", _net([ReLU(), Dense(6, 3)], (6,), rng), away, None
    yield "concat_extra", _net([ConcatExtra(2), Dense(8, 3)], (6,), rng), x, rng.normal(size=(3, 2))
    yield "conv2d", _net([Conv2d(2, 3, 3, 2, 1)], (2, 7, 7), rng), img, None
    yield "conv_layer_norm", _net([Conv2d(2, 3, 3, 1, 1), LayerNorm((3, 7, 7))], (2, 7, 7), rng), img, None
    yield "flatten", _net([Conv2d(2, 2, 3, 1, 0), Flatten(), Dense(50, 3)], (2, 7, 7), rng), img, None


def check_layers(seed=0) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for name, net, x, extra in _layer_cases(rng):
        errs = check_network(net, x, extra, h=H_LAYER, seed=seed)
        out.append(CheckResult(name, max(errs.values())))
    return out


def check_encoders(seed=0) -> list:
    """Full MLP and cnn3 encoders (cnn3 on a random parameter subset)."""
    rng = np.random.default_rng(seed)
    mlp = build_encoder((6,), 4, width=8, depth=2, extra_dim=3, rng=seed, init_range=0.1, dtype=np.float64)
    x, a = rng.normal(size=(4, 6)), rng.normal(size=(4, 3))
    res = [CheckResult("mlp_encoder", max(check_network(mlp, x, a, h=H, seed=seed).values()))]
    cnn = build_encoder((1, 16, 16), 4, width=8, depth=1, rng=seed, init_range=0.1, dtype=np.float64)
    img = rng.normal(size=(2, 1, 16, 16))
    errs = check_network(cnn, img, h=H, seed=seed, max_params=200)
    res.append(CheckResult("cnn3_encoder", max(errs.values())))
    return res


def _critic(rng, obs_dim=5, act_dim=3, d=4):
    kw = dict(width=8, depth=2, init_range=0.3, dtype=np.float64)
    phi = build_encoder((obs_dim,), d, extra_dim=act_dim, rng=rng, **kw)
    psi = build_encoder((obs_dim,), d, rng=rng, **kw)
    return CriticPair(phi, psi)


def _critic_grad_error(critic, loss_fn):
    critic.phi.zero_grad()
    critic.psi.zero_grad()
    loss_fn(True)
    analytic = np.concatenate([critic.phi.grads, critic.psi.grads])
    f = lambda: loss_fn(False)
    numeric = np.concatenate([numeric_gradient(f, critic.phi.params, H), numeric_gradient(f, critic.psi.params, H)])
    return relative_error(analytic, numeric)


def check_mc_loss(seed=0) -> CheckResult:
    rng = np.random.default_rng(seed)
    critic = _critic(rng)
    s, a, g = rng.normal(size=(6, 5)), rng.normal(size=(6, 3)), rng.normal(size=(6, 5))
    err = _critic_grad_error(critic, lambda bw: mc_critic_step(critic, s, a, g, backward=bw)[0])
    return CheckResult("mc_critic_loss", err)


def _policy(rng, kind, obs_dim=5, act_dim=3):
    net = build_encoder((2 * obs_dim,), act_dim, width=8, depth=2, rng=rng, init_range=0.3, dtype=np.float64)
    return PolicyNet(net, kind, act_dim, 0.15)


def check_td_loss(seed=0, kind="categorical") -> CheckResult:
    """Gradient with a frozen target copy, so the importance weights are constant."""
    rng = np.random.default_rng(seed)
    critic, policy = _critic(rng), _policy(rng, kind)
    target = critic.copy()
    B = 5
    s, sn, g = rng.normal(size=(B, 5)), rng.normal(size=(B, 5)), rng.normal(size=(B, 5))
    a = rng.normal(size=(B, 3))

    def loss(bw):
        return td_critic_loss(critic, policy, s, a, sn, g, 0.9, 20.0, np.random.default_rng(seed), target,
                              backward=bw)[0]

    return CheckResult(f"td_critic_loss_{kind}", _critic_grad_error(critic, loss))


def check_actor_loss(seed=0, kind="categorical", lam=0.5) -> CheckResult:
    rng = np.random.default_rng(seed)
    critic, policy = _critic(rng), _policy(rng, kind)
    agent = Agent(critic, policy, (5,), kind == "categorical")
    B = 6
    s, g = rng.normal(size=(B, 5)), rng.normal(size=(B, 5))
    if kind == "categorical":
        a_orig = rng.integers(3, size=B)
    else:
        a_orig = rng.uniform(-1, 1, size=(B, 3))
    net = policy.net

    def loss(bw):
        return actor_loss(agent, s, g, a_orig, lam, 0.0, np.random.default_rng(seed), backward=bw)[0]

    net.zero_grad()
    critic.phi.zero_grad()
    critic.psi.zero_grad()
    loss(True)
    err = relative_error(net.grads, numeric_gradient(lambda: loss(False), net.params, H))
    leak = float(np.abs(critic.phi.grads).max() + np.abs(critic.psi.grads).max())
    return CheckResult(f"actor_loss_{kind}", err if leak == 0 else np.inf)


def check_hard_negative(seed=0) -> CheckResult:
    """Closed-form hard-negative gradient vs the engine's psi-output gradient.

    With B = 2 and phi_2 = 0 the only loss term touching psi_2 is the
    negative pair (1, 2), weighted 1/(B(B-1)) = 1/2, so the closed form
    equals -2 * dLoss/dpsi_2 exactly.
    """
    rng = np.random.default_rng(seed)
    phi = np.stack([rng.normal(size=4), np.zeros(4)])
    psi = rng.normal(size=(2, 4))
    _, dL = mc_critic_loss(critic_logits(phi, psi))
    d_psi = dL.T @ phi
    closed = hard_negative_gradient(phi[0], psi[1])
    return CheckResult("hard_negative", relative_error(closed, -2.0 * d_psi[1]))


def run_suite(seed=0) -> list:
    results = check_layers(seed) + check_encoders(seed)
    results.append(check_mc_loss(seed))
    for kind in ("categorical", "gaussian"):
        results.append(check_td_loss(seed, kind))
        results.append(check_actor_loss(seed, kind))
    results.append(check_hard_negative(seed))
    return results
