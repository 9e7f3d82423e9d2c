"""Variational inference for SDEs driven by the OU-bank fBM approximation.

The variational posterior is the augmented prior system with a control
``u(X, Y, t)`` shifting the driving noise, and

    ELBO = E[sum_i log p(O_i | X(t_i))] - E[0.5 * int |u|^2 dt].

Gradients are pathwise: the explicit Euler recursion is unrolled in JAX
(double precision) with the noise realisation held fixed.  Values are also
available from the NumPy integrator, which consumes the same noise, so both
paths agree to rounding.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
import warnings
from dataclasses import dataclass, field

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402
from scipy.special import expit, logit  # noqa: E402

from .approx import (  # noqa: E402
    GammaGrid,
    OmegaWeights,
    bm_degenerate,
    build_gamma_grid,
    hurst_sensitivity,
    solve_optimal_omega,
)
from .errors import (  # noqa: E402
    DimensionError,
    DivergenceError,
    DomainError,
    NonFiniteStateError,
    UnsupportedRegimeError,
)
from .kernels import BridgeObs, FbmKind, FbmSpec, FouSpec, bridge_posterior_var  # noqa: E402
from .simulate import (  # noqa: E402
    AugmentedState,
    DriftDiffusion,
    TimeGrid,
    check_stability,
    draw_noise,
    integrate_posterior,
    simulate_mafbm,
)

__all__ = [
    "ControlNet",
    "LinearPrior",
    "Likelihood",
    "SimConfig",
    "ElboReport",
    "TrainConfig",
    "TrainResult",
    "HurstFit",
    "BridgeReport",
    "Adam",
    "elbo",
    "elbo_jax",
    "elbo_grad",
    "train",
    "fit_hurst",
    "squash_hurst",
    "bridge_experiment",
    "synthetic_hurst_data",
    "derived_seed",
]

LOG_2PI = math.log(2.0 * math.pi)
ETA_CLIP = 30.0


def derived_seed(seed: int, *tags: int) -> int:
    """A 63-bit seed derived from ``seed`` and integer tags (e.g. a training step)."""
    state = np.random.SeedSequence([int(seed)] + [int(t) for t in tags]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


# --------------------------------------------------------------- control


GUIDE_FLOOR = 1.0 / 16


@dataclass
class ControlNet:
    """Tanh MLP ``u = gate * f([sin kt, cos kt]_{k<=harmonics}, tau, X, Y_1..Y_K)``.

    ``tau`` is present only when ``anchors`` (observation times) are given:
    the time left until the next anchor, scaled by the widest anchor gap.
    With ``targets`` (one row of D values per anchor) the net also sees the
    next target and the guide ``(target - X) / (tau + 1/16)``.  Optimal controls jump at observation times,
    which smooth time features cannot follow.

    Parameters are one flat vector, laid out layer by layer as (W, b) with
    ``W`` of shape (fan_in, fan_out).  The last layer starts at exactly
    zero, so a fresh net is the zero control.
    """

    dim: int
    bank: int
    hidden: tuple = (64, 64)
    harmonics: int = 1
    params: np.ndarray | None = None
    gate: float = 1.0
    anchors: tuple = ()
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        order = np.argsort(np.asarray(self.anchors, dtype=float), kind="stable")
        self.anchors = tuple(float(self.anchors[i]) for i in order)
        if self.targets is not None:
            tg = np.asarray(self.targets, dtype=float).reshape(len(order), -1)
            if not self.anchors or tg.shape[1] != self.dim:
                raise DimensionError("targets need one row of dim values per anchor")
            self.targets = tg[order]
        if self.dim < 1 or self.bank < 0 or self.harmonics < 0 or any(h < 1 for h in self.hidden):
            raise DomainError("invalid control network shape")
        if self.params is None:
            self.params = self.init_params(0)
        self.params = np.asarray(self.params, dtype=float).ravel()
        if self.params.size != self.n_params:
            raise DimensionError(f"expected {self.n_params} parameters, got {self.params.size}")

    @classmethod
    def create(cls, dim: int, bank: int, hidden=(64, 64), harmonics: int = 1, seed: int = 0,
               gate: float = 1.0, anchors=(), targets=None) -> "ControlNet":
        net = cls(dim, bank, hidden, harmonics, gate=gate, anchors=tuple(anchors), targets=targets)
        net.params = net.init_params(seed)
        return net

    @property
    def n_in(self) -> int:
        extra = bool(self.anchors) + (2 * self.dim if self.targets is not None else 0)
        return 2 * self.harmonics + extra + self.dim * (self.bank + 1)

    @property
    def anchor_scale(self) -> float:
        a = np.asarray(self.anchors)
        return float(np.max(np.diff(np.concatenate([[min(0.0, a[0])], a])), initial=0.0)) or 1.0

    @property
    def sizes(self) -> list:
        return [self.n_in, *self.hidden, self.dim]

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum((a + 1) * b for a, b in zip(s[:-1], s[1:]))

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        parts = []
        s = self.sizes
        for i, (a, b) in enumerate(zip(s[:-1], s[1:])):
            last = i == len(s) - 2
            w = np.zeros((a, b)) if last else rng.standard_normal((a, b)) / math.sqrt(a)
            parts += [w.ravel(), np.zeros(b)]
        return np.concatenate(parts)

    def layers(self, p):
        out, i = [], 0
        s = self.sizes
        for a, b in zip(s[:-1], s[1:]):
            w = p[i:i + a * b].reshape(a, b)
            i += a * b
            out.append((w, p[i:i + b]))
            i += b
        return out

    def apply(self, p, x, y, t, xp=np):
        """Evaluate with parameters ``p``; x (P, D), y (P, K, D), scalar t -> (P, D)."""
        n = x.shape[0]
        k = xp.arange(1, self.harmonics + 1, dtype=float)
        tf = xp.stack([xp.sin(k * t), xp.cos(k * t)], axis=1).reshape(-1)
        if self.anchors:
            a = xp.asarray(self.anchors)
            j = xp.minimum(xp.searchsorted(a, t, side="right"), a.shape[0] - 1)
            tau = xp.maximum(a[j] - t, 0.0) / self.anchor_scale
            tf = xp.concatenate([tf, xp.reshape(tau, (1,))])
            if self.targets is not None:
                nxt = xp.asarray(self.targets)[j]
                tf = xp.concatenate([tf, nxt])
                guide = (nxt - x) / (tau + GUIDE_FLOOR)
        parts = [xp.broadcast_to(tf, (n, tf.shape[0])), x, y.reshape(n, -1)]
        if self.targets is not None:
            parts.append(guide)
        h = xp.concatenate(parts, axis=1)
        layers = self.layers(p)
        for w, b in layers[:-1]:
            h = xp.tanh(h @ w + b)
        w, b = layers[-1]
        return self.gate * (h @ w + b)

    def __call__(self, x, y, t):
        return self.apply(self.params, np.asarray(x, float), np.asarray(y, float), float(t))

    def with_params(self, p) -> "ControlNet":
        return dataclasses.replace(self, params=np.array(p, dtype=float))

    def to_dict(self) -> dict:
        return {"dim": self.dim, "bank": self.bank, "hidden": list(self.hidden),
                "harmonics": self.harmonics, "gate": self.gate, "anchors": list(self.anchors),
                "targets": None if self.targets is None else self.targets.tolist(),
                "params": self.params.tolist()}


# ------------------------------------------------------------------ prior


@dataclass(frozen=True)
class LinearPrior:
    """Prior ``dX = -theta (X - mean) dt + sigma dB^`` with constant diagonal diffusion."""

    theta: float = 0.0
    sigma: float = 1.0
    mean: float = 0.0
    interpretation: str = "ito"

    def __post_init__(self):
        if self.sigma == 0 or not math.isfinite(self.sigma):
            raise DomainError("diffusion must be finite and nonzero")

    def params(self) -> np.ndarray:
        return np.array([self.theta, self.sigma, self.mean], dtype=float)

    def with_params(self, p) -> "LinearPrior":
        return dataclasses.replace(self, theta=float(p[0]), sigma=float(p[1]), mean=float(p[2]))

    @staticmethod
    def drift(p, x, t, xp=np):
        return -p[0] * (x - p[2])

    @staticmethod
    def diffusion(p, x, t, xp=np):
        return p[1] * xp.ones_like(x)

    def to_model(self) -> DriftDiffusion:
        p = self.params()
        return DriftDiffusion(lambda x, t: self.drift(p, x, t), lambda x, t: self.diffusion(p, x, t),
                              self.interpretation, lambda x, t: np.zeros_like(x), state_dependent=False)


# ------------------------------------------------------------- likelihood


@dataclass(frozen=True)
class Likelihood:
    """Independent Gaussian observations ``O_i ~ N(X(t_i), noise_std_i^2)`` per component."""

    obs_times: np.ndarray
    obs_values: np.ndarray
    noise_std: np.ndarray | float = 0.1

    def __post_init__(self):
        t = np.asarray(self.obs_times, dtype=float).ravel()
        v = np.asarray(self.obs_values, dtype=float)
        if v.ndim <= 1:
            v = v.reshape(t.size, -1) if t.size else v.reshape(0, 1)
        if v.shape[0] != t.size:
            raise DimensionError(f"{v.shape[0]} observation rows for {t.size} times")
        s = np.broadcast_to(np.asarray(self.noise_std, dtype=float), (t.size,)).copy()
        if np.any(~(s > 0)):
            raise DomainError("observation noise must be positive")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise DomainError("observations must be finite")
        object.__setattr__(self, "obs_times", t)
        object.__setattr__(self, "obs_values", v)
        object.__setattr__(self, "noise_std", s)

    @classmethod
    def empty(cls, dim: int = 1) -> "Likelihood":
        return cls(np.zeros(0), np.zeros((0, dim)))

    @property
    def count(self) -> int:
        return self.obs_times.size

    def nodes(self, tgrid: TimeGrid) -> np.ndarray:
        """Observation times snapped to the nearest grid node."""
        return np.array([tgrid.node(t) for t in self.obs_times], dtype=np.int64)

    def logpdf(self, x_obs, xp=np):
        """Per-path log-likelihood from X at the observation nodes, shape (P, n_obs, D)."""
        s = self.noise_std[None, :, None]
        r = (self.obs_values[None] - x_obs) / s
        return xp.sum(-0.5 * r * r - np.log(s) - 0.5 * LOG_2PI, axis=(1, 2))


# ----------------------------------------------------------------- config


@dataclass(frozen=True)
class SimConfig:
    """Discretisation and noise model shared by every ELBO evaluation."""

    spec: FbmSpec
    grid: GammaGrid
    tgrid: TimeGrid
    weights: OmegaWeights | None = None
    weight_horizon: float | None = None
    x0: tuple = (0.0,)
    channel: str = "noise"

    def __post_init__(self):
        check_stability(self.grid, self.tgrid.dt)
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        if self.weight_horizon is None:
            object.__setattr__(self, "weight_horizon", self.tgrid.t_end - self.tgrid.t0)
        if self.weights is None:
            object.__setattr__(self, "weights", solve_optimal_omega(self.spec, self.grid, self.weight_horizon))
        if self.weights.grid.count != self.grid.count:
            raise DimensionError("weights do not match the speed grid")

    @property
    def dim(self) -> int:
        return len(self.x0)

    def with_hurst(self, hurst: float) -> "SimConfig":
        return dataclasses.replace(self, spec=FbmSpec(hurst, self.spec.kind), weights=None)


@dataclass
class ElboReport:
    loglik_term: float
    kl_term: float
    elbo: float
    mc_paths: int
    grad: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {"elbo": self.elbo, "loglik": self.loglik_term, "kl": self.kl_term, "mc_paths": self.mc_paths}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 32
    seed: int = 0
    final_lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_prior: bool = False
    hurst_trainable: bool = False
    hurst_fd_eps: float = 1e-4
    hurst_lr: float | None = None
    h_min: float = 0.05
    h_max: float = 0.95
    divergence_floor: float = -1e9
    log_path: str | None = None

    def __post_init__(self):
        if not self.lr > 0 or (self.final_lr is not None and not self.final_lr > 0):
            raise DomainError("learning rates must be positive")
        if self.batch < 1 or self.steps < 0:
            raise DomainError("batch must be >= 1 and steps >= 0")
        if not 0.0 < self.h_min < self.h_max < 1.0:
            raise DomainError("need 0 < h_min < h_max < 1")


class Adam:
    """Adam for minimisation, optional cosine decay from ``lr`` to ``final_lr``."""

    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8, total_steps=None, final_lr=None):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.total, self.final = total_steps, final_lr

    def rate(self) -> float:
        if self.final is None or not self.total:
            return self.lr
        frac = min(self.t / self.total, 1.0)
        return self.final + 0.5 * (self.lr - self.final) * (1 + math.cos(math.pi * frac))

    def step(self, params, grad):
        lr = self.rate()
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return params - lr * mh / (np.sqrt(vh) + self.eps)


# ---------------------------------------------------------------- objective


class _Objective:
    """Jitted ELBO and its gradient for fixed shapes and structure."""

    def __init__(self, model: LinearPrior, net: ControlNet, like: Likelihood, cfg: SimConfig):
        if getattr(model, "state_dependent", False):
            raise UnsupportedRegimeError("pathwise gradients support state-independent diffusion only")
        if net.dim != cfg.dim or net.bank != cfg.grid.count:
            raise DimensionError("control network does not match the state layout")
        if like.count and like.obs_values.shape[1] != cfg.dim:
            raise DimensionError("observation dimension does not match the state")
        if cfg.channel not in ("noise", "state"):
            raise DomainError(f"unknown control channel {cfg.channel!r}")
        self.net, self.model, self.like, self.cfg = net, model, like, cfg
        self.nodes = like.nodes(cfg.tgrid)
        fn = self._terms
        self.value = jax.jit(fn)
        self.value_and_grad = jax.jit(jax.value_and_grad(fn, argnums=(0, 1, 2), has_aux=True))

    def _terms(self, net_p, prior_p, omega, dW, y0):
        cfg, net, model = self.cfg, self.net, self.model
        gam = jnp.asarray(cfg.grid.speeds)
        dt, t0 = cfg.tgrid.dt, cfg.tgrid.t0
        P = dW.shape[0]
        x0 = jnp.broadcast_to(jnp.asarray(cfg.x0), (P, cfg.dim))
        state_channel = cfg.channel == "state"

        def step(carry, inp):
            x, y, kl = carry
            dw, n = inp
            t = t0 + n * dt
            u = net.apply(net_p, x, y, t, xp=jnp)
            kl = kl + 0.5 * jnp.sum(u * u, axis=1) * dt
            dwe = dw if state_channel else dw + u * dt
            dy = dwe[:, None, :] - (gam[None, :, None] * y) * dt
            db = jnp.einsum("k,pkd->pd", omega, dy)
            sig = model.diffusion(prior_p, x, t, xp=jnp)
            xn = x + model.drift(prior_p, x, t, xp=jnp) * dt + sig * db
            if state_channel:
                xn = xn + sig * u * dt
            return (xn, y + dy, kl), xn

        steps = jnp.arange(cfg.tgrid.steps, dtype=float)
        (_, _, kl), xs = jax.lax.scan(step, (x0, y0, jnp.zeros(P)), (jnp.swapaxes(dW, 0, 1), steps))
        if self.like.count:
            full = jnp.concatenate([x0[None], xs], axis=0)
            x_obs = jnp.swapaxes(full[self.nodes], 0, 1)
            ll = self.like.logpdf(x_obs, xp=jnp)
        else:
            ll = jnp.zeros(P)
        ll_m, kl_m = jnp.mean(ll), jnp.mean(kl)
        return ll_m - kl_m, (ll_m, kl_m)

    def noise(self, seed, paths):
        dW, y0 = draw_noise(self.cfg.spec, self.cfg.grid, self.cfg.tgrid, seed, paths, self.cfg.dim)
        return jnp.asarray(dW), jnp.asarray(y0)


def _check_report(v, ll, kl, paths):
    v, ll, kl = float(v), float(ll), float(kl)
    if not (math.isfinite(v) and math.isfinite(ll) and math.isfinite(kl)):
        raise NonFiniteStateError("ELBO evaluation produced non-finite values")
    return ElboReport(ll, kl, ll - kl, int(paths))


def elbo(model: LinearPrior, net: ControlNet, like: Likelihood, cfg: SimConfig, seed: int,
         paths: int = 32, threads: int | None = None) -> ElboReport:
    """Monte-Carlo ELBO from the NumPy integrator (``integrate_posterior``)."""
    nodes = like.nodes(cfg.tgrid)
    record = np.unique(nodes) if like.count else None
    ens, kl = integrate_posterior(model.to_model(), net, cfg.spec, cfg.grid, cfg.weights, cfg.tgrid,
                                  AugmentedState(np.array(cfg.x0)), seed, paths, record=record,
                                  threads=threads, channel=cfg.channel)
    if like.count:
        pos = np.searchsorted(ens.node_index, nodes)
        ll = like.logpdf(ens.paths[:, pos, :cfg.dim])
    else:
        ll = np.zeros(paths)
    llm, klm = float(np.mean(ll)), float(np.mean(kl))
    return _check_report(llm - klm, llm, klm, paths)


def elbo_jax(model, net, like, cfg, seed, paths=32) -> ElboReport:
    """Same estimate as :func:`elbo` through the differentiable JAX recursion."""
    obj = _Objective(model, net, like, cfg)
    dW, y0 = obj.noise(seed, paths)
    v, (ll, kl) = obj.value(jnp.asarray(net.params), jnp.asarray(model.params()),
                            jnp.asarray(cfg.weights.weights), dW, y0)
    return _check_report(v, ll, kl, paths)


_WRT = ("control", "prior", "omega")


def elbo_grad(model, net, like, cfg, seed, paths=32, wrt=("control",), objective=None) -> ElboReport:
    """ELBO with its pathwise gradient; ``grad`` concatenates the blocks named in ``wrt``.

    Blocks: ``control`` (network parameters), ``prior`` (theta, sigma,
    mean) and ``omega`` (bank weights).
    """
    bad = set(wrt) - set(_WRT)
    if bad:
        raise DomainError(f"unknown gradient blocks {sorted(bad)}")
    obj = objective or _Objective(model, net, like, cfg)
    dW, y0 = obj.noise(seed, paths)
    (v, (ll, kl)), grads = obj.value_and_grad(jnp.asarray(net.params), jnp.asarray(model.params()),
                                              jnp.asarray(cfg.weights.weights), dW, y0)
    rep = _check_report(v, ll, kl, paths)
    blocks = dict(zip(_WRT, (np.asarray(g) for g in grads)))
    g = np.concatenate([blocks[k] for k in wrt]) if wrt else np.zeros(0)
    if not np.all(np.isfinite(g)):
        raise NonFiniteStateError("non-finite ELBO gradient")
    rep.grad = g
    return rep


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    net: ControlNet
    prior: LinearPrior
    history: list = field(default_factory=list)

    @property
    def elbo_curve(self) -> np.ndarray:
        return np.array([h["elbo"] for h in self.history])


@dataclass
class HurstFit(TrainResult):
    hurst: float = float("nan")
    trajectory: np.ndarray = field(default_factory=lambda: np.zeros(0))
    boundary_warning: bool = False


def squash_hurst(eta, h_min: float, h_max: float):
    """Map an unconstrained value onto the open interval (h_min, h_max)."""
    return h_min + (h_max - h_min) * expit(np.clip(eta, -ETA_CLIP, ETA_CLIP))


def _unsquash(h, h_min, h_max):
    if not h_min < h < h_max:
        raise DomainError(f"initial H={h} outside ({h_min}, {h_max})")
    return float(logit((h - h_min) / (h_max - h_min)))


def _optimize(model, net, like, cfg, tcfg: TrainConfig, fit_h: bool):
    obj = _Objective(model, net, like, cfg)
    theta = net.params.copy()
    prior_p = model.params()
    wrt = ("control", "prior") if tcfg.train_prior else ("control",)
    opt = Adam(theta.size + (3 if tcfg.train_prior else 0), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps,
               tcfg.steps, tcfg.final_lr)
    h = cfg.spec.hurst
    eta = _unsquash(h, tcfg.h_min, tcfg.h_max) if fit_h else 0.0
    h_opt = Adam(1, tcfg.hurst_lr or tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.steps, tcfg.final_lr)
    history, traj = [], []
    log = open(tcfg.log_path, "w", encoding="utf-8") if tcfg.log_path else None
    try:
        for step in range(tcfg.steps):
            t_start = time.perf_counter()
            cur = model.with_params(prior_p)
            ccfg = cfg
            if fit_h:
                h = float(squash_hurst(eta, tcfg.h_min, tcfg.h_max))
                ccfg = cfg.with_hurst(h)
            seed = derived_seed(tcfg.seed, step)
            rep = elbo_grad(cur, net.with_params(theta), like, ccfg, seed, tcfg.batch,
                            wrt=wrt + (("omega",) if fit_h else ()), objective=_Rebind(obj, ccfg))
            if not math.isfinite(rep.elbo) or rep.elbo < tcfg.divergence_floor:
                raise DivergenceError(f"training diverged at step {step}: elbo={rep.elbo}", step=step)
            g = rep.grad
            k = theta.size + (3 if tcfg.train_prior else 0)
            vec = np.concatenate([theta, prior_p]) if tcfg.train_prior else theta
            vec = opt.step(vec, -g[:k])
            theta = vec[:net.n_params]
            if tcfg.train_prior:
                prior_p = vec[net.n_params:]
            if fit_h:
                dwdh = hurst_sensitivity(ccfg.spec, ccfg.grid, ccfg.weight_horizon, tcfg.hurst_fd_eps)
                dh_deta = (h - tcfg.h_min) * (tcfg.h_max - h) / (tcfg.h_max - tcfg.h_min)
                g_eta = float(g[k:] @ dwdh) * dh_deta
                eta = float(h_opt.step(np.array([eta]), np.array([-g_eta]))[0])
                eta = float(np.clip(eta, -ETA_CLIP, ETA_CLIP))
                traj.append(h)
            rec = {"step": step, "elbo": rep.elbo, "loglik": rep.loglik_term, "kl": rep.kl_term,
                   "hurst": h if fit_h else cfg.spec.hurst}
            history.append(rec)
            if log:
                log.write(json.dumps({**rec, "wall_ms": 1e3 * (time.perf_counter() - t_start)}) + "\n")
    finally:
        if log:
            log.close()
    out_net = net.with_params(theta)
    out_prior = model.with_params(prior_p)
    if not fit_h:
        return TrainResult(out_net, out_prior, history)
    h_final = float(squash_hurst(eta, tcfg.h_min, tcfg.h_max))
    traj = np.array(traj)
    tol = 1e-3 * (tcfg.h_max - tcfg.h_min)
    pinned = np.mean((traj - tcfg.h_min < tol) | (tcfg.h_max - traj < tol)) if traj.size else 0.0
    flag = bool(pinned > 0.2)
    if flag:
        warnings.warn("Hurst estimate sat at a boundary of its range for more than 20% of steps",
                      RuntimeWarning, stacklevel=3)
    return HurstFit(out_net, out_prior, history, h_final, traj, flag)


class _Rebind:
    """Reuse a compiled objective when only the weights (and spec) change."""

    def __init__(self, obj, cfg):
        self.obj, self.cfg = obj, cfg
        self.value_and_grad = obj.value_and_grad

    def noise(self, seed, paths):
        dW, y0 = draw_noise(self.cfg.spec, self.cfg.grid, self.cfg.tgrid, seed, paths, self.cfg.dim)
        return jnp.asarray(dW), jnp.asarray(y0)


def train(model: LinearPrior, net: ControlNet, like: Likelihood, cfg: SimConfig,
          tcfg: TrainConfig) -> TrainResult:
    """Adam ascent on the ELBO with fresh noise each step (seed ``derived_seed(seed, step)``)."""
    return _optimize(model, net, like, cfg, tcfg, fit_h=False)


def fit_hurst(model: LinearPrior, net: ControlNet, like: Likelihood, cfg: SimConfig,
              tcfg: TrainConfig) -> HurstFit:
    """Jointly train the control and a constant Hurst index.

    H is parameterised as ``h_min + (h_max - h_min) * sigmoid(eta)``.  The
    weights are re-solved for the current H each step, and
    ``dELBO/dH = (dELBO/domega) . (domega/dH)`` with the second factor from
    a central difference of the weight solver.
    """
    return _optimize(model, net, like, cfg, tcfg, fit_h=True)


# ------------------------------------------------------------ experiments


@dataclass
class BridgeReport:
    times: np.ndarray
    empirical_var: np.ndarray
    empirical_var_se: np.ndarray
    analytical_var: np.ndarray
    max_rel_gap: float
    history: list
    net: ControlNet

    def at(self, t: float):
        i = int(np.argmin(np.abs(self.times - t)))
        return self.empirical_var[i], self.analytical_var[i], self.empirical_var_se[i]

    def csv_text(self) -> str:
        rows = ["t,empirical_var,analytical_var"]
        rows += [f"{t:.17g},{e:.17g},{a:.17g}" for t, e, a in zip(self.times, self.empirical_var, self.analytical_var)]
        return "\n".join(rows) + "\n"


def bridge_experiment(hurst: float, theta: float, obs_sigma: float = 0.1, t_end: float = 2.0,
                      config: TrainConfig | None = None, *, dt: float = 0.01, hidden=(64, 64),
                      eval_paths: int = 1024, count: int = 5, gamma_max: float = 20.0,
                      weight_horizon: float = 6.0, harmonics: int = 4,
                      threads: int | None = None) -> BridgeReport:
    """Train a control for the fOU bridge ``X(0) = 0``, ``X(T) + noise = 0`` and compare variances.

    Prior: ``dX = -theta X dt + dB^`` with Type I MA-fBM.  At H = 1/2 the
    bank degenerates to a single Wiener process.
    """
    h, th = float(hurst), float(theta)
    if th < 0:
        raise DomainError("theta must be >= 0")
    if th > 0 and h <= 0.5:
        raise UnsupportedRegimeError("the fOU bridge variance needs theta = 0 or H > 1/2")
    config = config or TrainConfig(lr=1e-2, final_lr=1e-3)
    spec = FbmSpec(h, FbmKind.TYPE_I)
    if h == 0.5:
        weights = bm_degenerate(spec, weight_horizon)
        grid = weights.grid
    else:
        grid = build_gamma_grid(count, gamma_max)
        weights = solve_optimal_omega(spec, grid, weight_horizon)
    tgrid = TimeGrid.span(t_end, int(round(t_end / dt)), speeds=grid)
    cfg = SimConfig(spec, grid, tgrid, weights, weight_horizon)
    like = Likelihood([t_end], [[0.0]], obs_sigma)
    model = LinearPrior(th, 1.0, 0.0, "stratonovich")
    net = ControlNet.create(1, grid.count, hidden, harmonics, seed=derived_seed(config.seed, 2**31),
                           anchors=like.obs_times, targets=like.obs_values)
    res = train(model, net, like, cfg, config)
    ens, _ = integrate_posterior(model.to_model(), res.net, spec, grid, weights, tgrid, AugmentedState([0.0]),
                                 derived_seed(config.seed, 2**31 + 1), eval_paths, threads=threads)
    x = ens.paths[:, :, 0]
    emp = x.var(axis=0, ddof=1)
    dev = x - x.mean(axis=0)
    se = np.sqrt(np.maximum(np.mean(dev ** 4, axis=0) - emp ** 2, 0.0) / eval_paths)
    obs = BridgeObs(t_end, obs_sigma)
    fou = FouSpec(spec, th)
    ana = np.array([bridge_posterior_var(fou, obs, t) for t in tgrid.times])
    inner = (tgrid.times > 0) & (tgrid.times < t_end) & (ana > 0)
    gap = float(np.max(np.abs(emp[inner] - ana[inner]) / ana[inner]))
    return BridgeReport(tgrid.times, emp, se, ana, gap, res.history, res.net)


def synthetic_hurst_data(hurst: float = 0.7, n_obs: int = 32, dim: int = 4, t_end: float = 4.0,
                         dt: float = 0.02, obs_std: float = 0.05, seed: int = 0, count: int = 5,
                         gamma_max: float = 20.0, kind: FbmKind = FbmKind.TYPE_II):
    """Noisy observations of drift-free, unit-diffusion MA-fBM at ``n_obs`` equispaced times.

    Returns ``(likelihood, tgrid, grid)``; each of the ``dim`` components
    is an independent path.
    """
    grid = build_gamma_grid(count, gamma_max)
    tgrid = TimeGrid.span(t_end, int(round(t_end / dt)), speeds=grid)
    spec = FbmSpec(hurst, kind)
    w = solve_optimal_omega(spec, grid, t_end)
    nodes = np.linspace(0, tgrid.steps, n_obs + 1).round().astype(int)[1:]
    ens = simulate_mafbm(spec, grid, w, tgrid, derived_seed(seed, 0), 1, dim=dim, record=nodes)
    rng = np.random.Generator(np.random.Philox(derived_seed(seed, 1)))
    values = ens.paths[0] + obs_std * rng.standard_normal((n_obs, dim))
    return Likelihood(tgrid.t0 + nodes * tgrid.dt, values, obs_std), tgrid, grid
