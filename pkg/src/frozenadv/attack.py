"""Feature-distance BIM attack on a frozen upstream encoder.

The attacker never sees a downstream head.  It pushes the equal-weight
layer average of the encoder's hidden features away from its clean value
with signed-gradient steps, projecting back into an L-infinity ball around
the clean waveform after every step.
"""
from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, sign
from .data import Waveform
from .upstream import FrozenModelError, UpstreamModel, _as_batch, build_encoder

KINDS = ("clean", "gaussian", "zero_knowledge", "limited_knowledge")
CHUNK = 25


class BudgetConfigError(ValueError):
    pass


class ScenarioError(ValueError):
    pass


class ZeroSignalError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.002
    alpha: float | None = None
    n_iters: int = 10
    seed: int = 0

    @property
    def step(self) -> float:
        return self.epsilon / 5 if self.alpha is None else self.alpha

    def validate(self):
        a = self.step
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise BudgetConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.n_iters < 0:
            raise BudgetConfigError(f"n_iters must be >= 0, got {self.n_iters}")
        if self.epsilon == 0:
            if a < 0:
                raise BudgetConfigError(f"alpha must be >= 0, got {a}")
        elif not 0 < a <= self.epsilon:
            raise BudgetConfigError(f"need 0 < alpha <= epsilon, got alpha={a}, epsilon={self.epsilon}")


@dataclass
class AttackResult:
    adversarial: Waveform
    nsr: float
    linf: float
    loss_trace: list[float] = field(default_factory=list)
    nsr_preclamp: float | None = None


def build_averaged_embedding(g: Graph, model: UpstreamModel, x: int) -> int:
    layers = build_encoder(g, model, x)
    z = layers[0]
    for h in layers[1:]:
        z = g.op("add", z, h)
    return g.op("scale", z, factor=1.0 / len(layers))


def averaged_embedding(model: UpstreamModel, wave) -> np.ndarray:
    """Equal-weight mean of all layer features, (T, D) or (B, T, D)."""
    arr, single = _as_batch(model, wave)
    g = Graph(mode="frozen")
    z = g.value(build_averaged_embedding(g, model, g.input(arr, requires_grad=False)))
    return z[0] if single else z


def clip_linf(t, origin, epsilon: float) -> np.ndarray:
    """Project ``t`` into ``[origin - eps, origin + eps]`` and then into [-1, 1].

    The band edges are nudged down by one ulp where rounding would otherwise
    let ``|result - origin|`` exceed ``epsilon`` when evaluated in float64.
    """
    t = np.asarray(getattr(t, "samples", t), dtype=np.float64)
    o = np.asarray(getattr(origin, "samples", origin), dtype=np.float64)
    if t.shape != o.shape:
        raise ValueError(f"clip_linf: length mismatch {t.shape} vs {o.shape}")
    hi = o + epsilon
    lo = o - epsilon
    while np.any(bad := hi - o > epsilon):
        hi = np.where(bad, np.nextafter(hi, -np.inf), hi)
    while np.any(bad := o - lo > epsilon):
        lo = np.where(bad, np.nextafter(lo, np.inf), lo)
    return np.clip(np.clip(t, lo, hi), -1.0, 1.0)


def _item_key(x: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(x, dtype="<f8").tobytes())


def _feature_loss(model, xn, za):
    g = Graph(mode="frozen")
    xid = g.input(xn)
    z = build_averaged_embedding(g, model, xid)
    per = g.op("l2-norm", g.op("sub", z, g.const(za)), axis=(1, 2))
    return g, xid, per, g.op("sum", per)


def _bim_batch(model: UpstreamModel, X: np.ndarray, cfg: AttackConfig) -> list[AttackResult]:
    za = averaged_embedding(model, X)          # clean anchor, fixed for all iterations
    xn = X.copy()
    traces = [[] for _ in range(len(X))]
    for _ in range(cfg.n_iters):
        g, xid, per, root = _feature_loss(model, xn, za)
        for i, v in enumerate(g.value(per)):
            traces[i].append(float(v))
        g.backward(root)
        step = sign(g.grad(xid))
        for i in np.flatnonzero(~step.any(axis=1)):
            # x^0 == x is a stationary point of the distance; break the tie with seeded signs
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4, _item_key(X[i])]))
            step[i] = rng.choice([-1.0, 1.0], size=X.shape[1])
        xn = clip_linf(xn + cfg.step * step, X, cfg.epsilon)
    if cfg.n_iters:
        g, _, per, _ = _feature_loss(model, xn, za)
        for i, v in enumerate(g.value(per)):
            traces[i].append(float(v))
    return [_result(X[i], xn[i], traces[i]) for i in range(len(X))]


def _result(x, adv, trace, nsr_preclamp=None) -> AttackResult:
    d = adv - x
    nx = np.linalg.norm(x)
    nsr = float(np.linalg.norm(d) / nx) if nx > 0 else 0.0
    linf = float(np.abs(d).max()) if d.size else 0.0
    return AttackResult(Waveform(adv), nsr, linf, trace, nsr if nsr_preclamp is None else nsr_preclamp)


def _map_chunks(fn, X: np.ndarray, threads: int):
    chunks = [X[s:s + CHUNK] for s in range(0, len(X), CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return [r for part in parts for r in part]


def bim_attack(attack_model: UpstreamModel, x, cfg: AttackConfig = AttackConfig(), threads: int = 1):
    """Untargeted BIM on the averaged-embedding distance.

    ``x`` is one waveform (returns an :class:`AttackResult`) or a batch
    ``(B, L)`` (returns a list).  Batches are processed in fixed-size chunks,
    so results do not depend on ``threads``.
    """
    if not attack_model.frozen:
        raise FrozenModelError("attack model must be frozen")
    cfg.validate()
    X, single = _as_batch(attack_model, x)
    if cfg.n_iters == 0 or cfg.epsilon == 0:
        res = [_result(xi, xi.copy(), []) for xi in X]
    else:
        res = _map_chunks(lambda c: _bim_batch(attack_model, c, cfg), X, threads)
    return res[0] if single else res


def gaussian_control(x, target_nsr: float, seed: int) -> AttackResult:
    """Additive white Gaussian noise rescaled to an exact noise-to-signal ratio.

    The ratio is matched before the [-1, 1] clamp; the L-infinity size of the
    noise is reported but not bounded.
    """
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    if target_nsr < 0:
        raise ValueError(f"target_nsr must be >= 0, got {target_nsr}")
    nx = np.linalg.norm(x)
    if nx == 0:
        raise ZeroSignalError("cannot match an NSR against an all-zero signal")
    if target_nsr == 0:
        return _result(x, x.copy(), [], 0.0)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3, _item_key(x)]))
    noise = rng.standard_normal(x.shape)
    noise *= target_nsr * nx / np.linalg.norm(noise)
    pre = float(np.linalg.norm(noise) / nx)
    return _result(x, np.clip(x + noise, -1.0, 1.0), [], pre)


@dataclass
class Scenario:
    kind: str
    target_model: UpstreamModel
    attack_model: UpstreamModel | None = None

    def validate(self):
        if self.kind not in KINDS:
            raise ScenarioError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "limited_knowledge":
            if self.attack_model is None:
                self.attack_model = self.target_model
            if self.attack_model is not self.target_model:
                raise ScenarioError("limited-knowledge attacks must use the target model itself")
        elif self.kind == "zero_knowledge":
            if self.attack_model is None or self.attack_model is self.target_model \
                    or self.attack_model.arch == self.target_model.arch:
                raise ScenarioError("zero-knowledge attacks need a substitute of a different architecture")
        elif self.attack_model is not None:
            raise ScenarioError(f"{self.kind} scenario takes no attack model")


def run_scenario(scenario: Scenario, cfg: AttackConfig, items, matched: list[AttackResult] | None = None,
                 threads: int = 1) -> list[tuple[np.ndarray, AttackResult]]:
    """Perturb every item according to the scenario's threat model.

    For ``gaussian`` the per-item NSR is taken from ``matched`` (the
    limited-knowledge results on the same items); when absent that attack
    is run first.
    """
    scenario.validate()
    X = np.stack([np.asarray(getattr(i, "samples", getattr(getattr(i, "wave", None), "samples", i)),
                             dtype=np.float64) for i in items]) if len(items) else np.zeros((0, 0))
    if scenario.kind == "clean":
        res = [_result(x, x.copy(), []) for x in X]
    elif scenario.kind in ("limited_knowledge", "zero_knowledge"):
        res = bim_attack(scenario.attack_model, X, cfg, threads) if len(X) else []
    else:
        if matched is None:
            lk = Scenario("limited_knowledge", scenario.target_model)
            matched = [r for _, r in run_scenario(lk, cfg, X, threads=threads)]
        if len(matched) != len(X):
            raise ScenarioError("matched results do not line up with the items")
        res = [gaussian_control(x, m.nsr, cfg.seed) for x, m in zip(X, matched)]
    return list(zip(X, res))
