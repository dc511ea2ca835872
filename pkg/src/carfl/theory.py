"""Empirical check of the FedAvg+DP stationarity bounds.

A run recorded with ``keep_trace`` stores the global iterate of every round.
:func:`build_trace` recomputes exact full-batch local and global gradients
and the exact minibatch gradient variance at each iterate. From that trace
:func:`estimate_constants` fits the smoothness, variance, diversity and
gradient-bound constants as upper envelopes, so the assumptions hold on
every recorded point, and the bound functions turn them into numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from carfl.data import Dataset
from carfl.dp import DpConfig, noise_multiplier_delta
from carfl.model import ModelParams, loss_and_gradients


@dataclass
class GradientTrace:
    """Per-iterate gradients of one instrumented run.

    Arrays are indexed ``[t]`` over the recorded global iterates and
    ``[t, i]`` over (iterate, client).
    """

    thetas: np.ndarray
    grad_global: np.ndarray
    grad_local: np.ndarray
    stoch_var: np.ndarray
    losses: np.ndarray
    g_norms: np.ndarray
    clip_freq: np.ndarray
    C_history: np.ndarray
    alpha: float
    steps_per_round: int

    @property
    def m(self) -> int:
        return self.grad_local.shape[1]

    @property
    def grad_sq(self) -> np.ndarray:
        return np.sum(self.grad_global ** 2, axis=1)


@dataclass
class TheoryConstants:
    L_bar: float
    rho0_sq: float
    rho1_sq: float
    zeta0_sq: float
    zeta1_sq: float
    B: float
    p: float
    gamma1: float = 2.0
    gamma2: float = 2.0
    F0: float = 0.0
    F_star: float = 0.0

    def __post_init__(self):
        if min(self.L_bar, self.rho0_sq, self.rho1_sq, self.zeta0_sq, self.zeta1_sq,
               self.B, self.p) < 0:
            raise ValueError("theory constants must be nonnegative")
        if self.gamma1 <= 1 or self.gamma2 <= 1:
            raise ValueError("Gamma_1 and Gamma_2 must exceed 1")


@dataclass
class BoundResult:
    value: float
    admissible: bool
    omega: float
    alpha_max: float
    terms: dict = field(default_factory=dict)
    regime: str = ""


def _flat(tensors: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(t) for t in tensors])


def _full_gradient(model: ModelParams, enc, data: Dataset) -> tuple[float, np.ndarray]:
    loss, g = loss_and_gradients(model, enc, enc.inputs(data.features, data.ids),
                                 data.labels, training=False)
    return loss, _flat(g.for_model(model))


def _per_sample_gradients(model: ModelParams, enc, data: Dataset) -> np.ndarray:
    rows = []
    for j in range(len(data)):
        sl = slice(j, j + 1)
        _, g = loss_and_gradients(model, enc, enc.inputs(data.features[sl], data.ids[sl]),
                                  data.labels[sl], training=False)
        rows.append(_flat(g.for_model(model)))
    return np.array(rows)


def minibatch_variance(per_sample: np.ndarray, b: int) -> float:
    """``E|mean of b rows drawn without replacement - mean of all rows|^2``."""
    n = len(per_sample)
    if b >= n:
        return 0.0
    spread = np.sum((per_sample - per_sample.mean(axis=0)) ** 2) / n
    return float(spread * (n - b) / (b * (n - 1)))


def build_trace(models: Sequence[ModelParams], shards: Sequence[Dataset], enc,
                batch_size: int, records=None, alpha: float = 0.0,
                steps_per_round: int = 1) -> GradientTrace:
    """Exact gradients at each recorded iterate.

    Local objectives follow the uniform-weight analysis form: client ``i``
    minimises ``(m / n) * sum of its sample losses`` and the global objective
    is their plain average, i.e. the mean loss over all samples.
    """
    m = len(shards)
    n = sum(len(s) for s in shards)
    thetas, g_glob, g_loc, var, losses = [], [], [], [], []
    for model in models:
        locs, vars_, loss_sum = [], [], 0.0
        for shard in shards:
            scale = m * len(shard) / n
            loss_i, g_mean = _full_gradient(model, enc, shard)
            loss_sum += loss_i * len(shard)
            per = _per_sample_gradients(model, enc, shard)
            bias = np.sum((g_mean - scale * g_mean) ** 2)
            vars_.append(minibatch_variance(per, batch_size) + bias)
            locs.append(scale * g_mean)
        locs = np.array(locs)
        thetas.append(_flat(model.trainable()))
        g_loc.append(locs)
        g_glob.append(locs.mean(axis=0))
        var.append(vars_)
        losses.append(loss_sum / n)

    g_norms, clip_freq, C_hist = [], np.zeros(m), []
    if records:
        events = np.zeros(m)
        steps = np.zeros(m)
        for rec in records:
            C_hist.append([c.C for c in rec.clients])
            for c in rec.clients:
                g_norms.extend(c.grad_norms)
                events[c.cid] += c.clip_events
                steps[c.cid] += c.dp_steps
        clip_freq = np.divide(events, steps, out=np.zeros(m), where=steps > 0)
    return GradientTrace(
        thetas=np.array(thetas),
        grad_global=np.array(g_glob),
        grad_local=np.array(g_loc),
        stoch_var=np.array(var),
        losses=np.array(losses),
        g_norms=np.array(g_norms),
        clip_freq=clip_freq,
        C_history=np.array(C_hist),
        alpha=alpha,
        steps_per_round=steps_per_round,
    )


def envelope_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Nonnegative ``(a, b)`` with ``y <= a + b x`` on every point.

    Least squares under nonnegativity, then ``a`` is raised by the largest
    remaining violation.
    """
    A = np.column_stack([np.ones_like(x), x])
    (a, b), _ = nnls(A, y)
    worst = float(np.max(y - (a + b * x)))
    if worst > 0:
        a += worst * (1 + 1e-12) + 1e-300
    return float(a), float(b)


def lipschitz_estimate(thetas: np.ndarray, grads: np.ndarray) -> float:
    """Largest gradient-difference ratio over all pairs of distinct points."""
    if len(thetas) < 2:
        raise ValueError("need at least two parameter points to estimate smoothness")
    best = 0.0
    for s in range(len(thetas) - 1):
        dtheta = np.linalg.norm(thetas[s + 1:] - thetas[s], axis=1)
        dgrad = np.linalg.norm(grads[s + 1:] - grads[s], axis=1)
        ok = dtheta > 0
        if ok.any():
            best = max(best, float(np.max(dgrad[ok] / dtheta[ok])))
    return best


def estimate_constants(trace: GradientTrace, gamma1: float = 2.0, gamma2: float = 2.0,
                       F_star: Optional[float] = None) -> TheoryConstants:
    x = trace.grad_sq
    rho0, rho1 = envelope_fit(x, trace.stoch_var.mean(axis=1))
    diversity = np.mean(np.sum((trace.grad_local - trace.grad_global[:, None, :]) ** 2,
                               axis=2), axis=1)
    if trace.m == 1:
        zeta0 = zeta1 = 0.0
    else:
        zeta0, zeta1 = envelope_fit(x, diversity)
    observed = trace.g_norms if len(trace.g_norms) else np.sqrt(x)
    f_star = float(trace.losses.min())
    if F_star is not None:
        f_star = min(f_star, F_star)
    return TheoryConstants(
        L_bar=lipschitz_estimate(trace.thetas, trace.grad_global),
        rho0_sq=rho0, rho1_sq=rho1, zeta0_sq=zeta0, zeta1_sq=zeta1,
        B=1.05 * float(np.max(observed)),
        p=float(np.max(trace.clip_freq)) if len(trace.clip_freq) else 0.0,
        gamma1=gamma1, gamma2=gamma2,
        F0=float(trace.losses[0]), F_star=f_star,
    )


def omega_fixed(C: float, B: float, alpha: float, gamma1: float, gamma2: float) -> float:
    if min(C, B, alpha) <= 0 or gamma1 <= 1 or gamma2 <= 1:
        raise ValueError("omega needs positive C, B, alpha and Gamma > 1")
    return min(C / B * (1 - 1 / gamma1), alpha * (1 - 1 / gamma2))


def alpha_max_fixed(k: TheoryConstants, C: float, sigma1_sq: float = 0.0) -> float:
    """Largest admissible constant learning rate under fixed DP (exclusive)."""
    core = 3 * k.L_bar * (k.rho1_sq + k.zeta1_sq + 1) * (1 + sigma1_sq)
    if core == 0:
        return math.inf
    return min(math.sqrt(2 * C / (core * k.B * k.gamma1)), 2 / (core * k.gamma2))


def bound_fixed(k: TheoryConstants, C: float, sigma0: float, alpha: float,
                T: int) -> BoundResult:
    """Right side of the fixed-DP stationarity bound for iterates ``0..T``."""
    try:
        omega = omega_fixed(C, k.B, alpha, k.gamma1, k.gamma2)
    except ValueError:
        return BoundResult(math.inf, False, 0.0, 0.0, regime="undefined")
    terms = {
        "fedavg": (k.F0 - k.F_star) / (omega * (T + 1)),
        "dp_clip_noise": k.L_bar * C ** 2 * (1 + sigma0 ** 2) / (2 * omega),
        "grad_variance": 3 * k.L_bar * (k.rho0_sq + k.zeta0_sq) * alpha ** 2 / (2 * omega),
    }
    a_max = alpha_max_fixed(k, C)
    regime = "no-clipping" if C > alpha * k.B else "clipping"
    return BoundResult(sum(terms.values()), bool(alpha < a_max and omega > 0), omega,
                       a_max, terms, regime)


def omega_adaptive(p: float, m: int, gamma: float) -> float:
    return (1 - p) ** m * (1 - 1 / gamma)


def alpha_max_adaptive(k: TheoryConstants, m: int, z_delta: float, beta: float,
                       gamma_q: float) -> float:
    core = 3 * k.L_bar * (k.rho1_sq + k.zeta1_sq + 1) * k.gamma2
    if core == 0:
        return math.inf
    return 2 * (1 - k.p) ** m / core / (1 + 2 * z_delta ** 2 * beta ** 2 * gamma_q ** 2)


def bound_adaptive(k: TheoryConstants, dp: DpConfig, m: int, alpha: float, T: int,
                   C0: Optional[float] = None) -> BoundResult:
    """Right side of the adaptive-DP stationarity bound for iterates ``0..T``.

    ``Gamma_2`` plays the role of the single slack parameter.
    """
    z_delta, _ = noise_multiplier_delta(dp.z, m)
    C0 = dp.c0 if C0 is None else C0
    beta, gq = dp.beta, dp.gamma
    omega = omega_adaptive(k.p, m, k.gamma2)
    if omega <= 0 or alpha <= 0:
        return BoundResult(math.inf, False, omega, 0.0, regime="undefined")
    n_it = T + 1
    bracket = (C0 ** 2 / ((1 - (1 - beta) ** 2) * alpha * n_it)
               + 2 * gq * k.B * C0 / (beta * n_it)
               + gq ** 2 * k.B ** 2 * alpha)
    terms = {
        "fedavg": (k.F0 - k.F_star) / (omega * alpha * n_it),
        "dp_adaptive": k.L_bar / (2 * omega) * (1 + z_delta ** 2 * (1 - beta) ** 2) * bracket,
        "grad_variance": (3 * k.L_bar / (2 * omega) * (k.rho0_sq + k.zeta0_sq) * alpha
                          * (1 + 2 * z_delta ** 2 * beta ** 2 * gq ** 2)),
    }
    a_max = alpha_max_adaptive(k, m, z_delta, beta, gq)
    return BoundResult(sum(terms.values()), bool(alpha < a_max), omega, a_max, terms,
                       "adaptive")


@dataclass
class BoundReport:
    theorem: str
    measured: float
    bound: BoundResult
    constants: TheoryConstants
    T: int

    @property
    def passed(self) -> bool:
        return self.measured <= self.bound.value

    def text(self) -> str:
        k, b = self.constants, self.bound
        lines = [
            f"{self.theorem} stationarity check over iterates 0..{self.T}",
            f"  L_bar={k.L_bar:.6g} rho0^2={k.rho0_sq:.6g} rho1^2={k.rho1_sq:.6g} "
            f"zeta0^2={k.zeta0_sq:.6g} zeta1^2={k.zeta1_sq:.6g}",
            f"  B={k.B:.6g} p={k.p:.6g} Gamma1={k.gamma1:g} Gamma2={k.gamma2:g} "
            f"F0={k.F0:.6g} F*={k.F_star:.6g}",
            f"  omega={b.omega:.6g} alpha_max={b.alpha_max:.6g} "
            f"admissible={'yes' if b.admissible else 'no'} regime={b.regime}",
        ]
        lines += [f"  term {name}: {val:.6g}" for name, val in b.terms.items()]
        lines += [
            f"  measured mean |grad F|^2 = {self.measured:.6g}",
            f"  bound                    = {b.value:.6g}",
            f"{self.theorem}: {'PASS' if self.passed else 'FAIL'}",
        ]
        return "\n".join(lines)


def verify_bound(trace: GradientTrace, bound: BoundResult, constants: TheoryConstants,
                 theorem: str, T: Optional[int] = None) -> BoundReport:
    """Compare the measured average squared gradient norm against ``bound``.

    The average runs over iterates ``0..T`` (all recorded iterates by
    default), which must match the ``T`` the bound was evaluated for.
    """
    if trace.grad_global.size == 0:
        raise ValueError("trace has no gradient instrumentation")
    T = len(trace.grad_sq) - 1 if T is None else T
    if not 0 <= T < len(trace.grad_sq):
        raise ValueError(f"trace holds {len(trace.grad_sq)} iterates, cannot average 0..{T}")
    measured = float(np.mean(trace.grad_sq[:T + 1]))
    return BoundReport(theorem, measured, bound, constants, T)


def lemma_threshold_bound(C0: float, beta: float, gamma: float, B: float,
                          alpha: float, t: np.ndarray) -> np.ndarray:
    """``(1 - beta)^t C0 + gamma B alpha``: ceiling on the adaptive threshold at round t."""
    return (1 - beta) ** np.asarray(t) * C0 + gamma * B * alpha


def lemma_sum_sq_bound(C0: np.ndarray, beta: float, gamma: float, B: float,
                       alpha: float, T: int) -> float:
    """Ceiling on ``sum_t mean_i (C_i^t)^2`` for ``t = 0..T``."""
    C0 = np.asarray(C0, dtype=np.float64)
    return float(np.mean(C0 ** 2) / (1 - (1 - beta) ** 2)
                 + 2 * gamma * B * alpha * np.mean(C0) / beta
                 + gamma ** 2 * B ** 2 * alpha ** 2 * (T + 1))


def threshold_violation(C_history: np.ndarray, C0: float, beta: float, gamma: float,
                        B: float, alpha: float) -> float:
    """Largest excess of a recorded threshold over its ceiling (<= 0 means none)."""
    C_history = np.asarray(C_history)
    t = np.arange(len(C_history))[:, None]
    return float(np.max(C_history - lemma_threshold_bound(C0, beta, gamma, B, alpha, t)))


def reference_min_loss(model: ModelParams, enc, data: Dataset, lr: float,
                       epochs: int = 200) -> float:
    """Lowest full-batch loss seen over ``epochs`` steps of full-batch descent."""
    best = math.inf
    inputs = enc.inputs(data.features, data.ids)
    for _ in range(epochs):
        loss, g = loss_and_gradients(model, enc, inputs, data.labels, training=False)
        best = min(best, loss)
        model = model.with_trainable([p - lr * d for p, d in
                                      zip(model.trainable(), g.for_model(model))])
    loss, _ = loss_and_gradients(model, enc, inputs, data.labels, training=False)
    return min(best, loss)


@dataclass
class RunCheck:
    report: BoundReport
    trace: GradientTrace
    lemma_lines: list = field(default_factory=list)
    lemma_ok: bool = True

    @property
    def passed(self) -> bool:
        return self.report.passed and self.lemma_ok

    def text(self) -> str:
        return "\n".join([self.report.text(), *self.lemma_lines])


def steps_per_round(fed, shards: Sequence[Dataset]) -> int:
    if fed.steps_per_round:
        return fed.steps_per_round
    return max(fed.E * math.ceil(len(s) / fed.batch_size) for s in shards)


def check_run(models: Sequence[ModelParams], records, shards: Sequence[Dataset], enc, fed,
              train: Dataset, gamma1: float = 2.0, gamma2: float = 2.0,
              reference_epochs: int = 200, reference_lr: float = 0.5) -> RunCheck:
    """Certify a traced run against the theorem matching its DP mode.

    ``models`` are the global iterates ``0..R`` of an ``R``-round run. The
    bound covers iterates ``0..R-1``; all ``R + 1`` points feed the constant
    fits. A round of ``k`` local steps at rate ``lr`` counts as one step of
    size ``alpha = k * lr``.
    """
    if len(models) < 2:
        raise ValueError("a traced run needs at least one round")
    k_steps = steps_per_round(fed, shards)
    alpha = fed.lr * k_steps
    trace = build_trace(models, shards, enc, fed.batch_size, records, alpha, k_steps)
    f_ref = reference_min_loss(models[0], enc, train, reference_lr, reference_epochs)
    consts = estimate_constants(trace, gamma1, gamma2, F_star=f_ref)
    T = len(models) - 2
    dp = fed.dp
    lines, ok = [], True
    if dp.mode == "adaptive":
        bound = bound_adaptive(consts, dp, fed.m, alpha, T)
        report = verify_bound(trace, bound, consts, "Theorem 2 (adaptive DP)", T)
        hist = trace.C_history[dp.warmup_rounds:]
        ceiling = lemma_threshold_bound(dp.c0, dp.beta, dp.gamma, consts.B, alpha,
                                        np.arange(len(hist))[:, None])
        worst = float(np.max(hist - ceiling)) if hist.size else 0.0
        ok_i = worst <= 0
        summed = float(np.sum(np.mean(hist ** 2, axis=1))) if hist.size else 0.0
        cap = lemma_sum_sq_bound(np.full(fed.m, dp.c0), dp.beta, dp.gamma, consts.B, alpha,
                                 len(hist) - 1)
        ok_iii = summed <= cap + 1e-9
        ok = ok_i and ok_iii
        lines = [
            f"threshold ceiling: worst excess {worst:.6g} -> {'PASS' if ok_i else 'FAIL'}",
            f"summed squared thresholds: {summed:.6g} <= {cap:.6g} -> "
            f"{'PASS' if ok_iii else 'FAIL'}",
        ]
    else:
        if dp.mode == "fixed":
            C, sigma0, name = dp.c0, dp.sigma0, "Theorem 1 (fixed DP)"
        else:
            C, sigma0, name = alpha * consts.B * (1 + 1e-9), 0.0, "Theorem 1 (no DP, unclipped limit)"
        bound = bound_fixed(consts, C, sigma0, alpha, T)
        report = verify_bound(trace, bound, consts, name, T)
    return RunCheck(report, trace, lines, ok)
