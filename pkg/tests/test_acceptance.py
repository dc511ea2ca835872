"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints a single ``[acceptance N] PASS|FAIL`` line with the
measured numbers, whether or not pytest output capture is on.
"""

from __future__ import annotations

import functools
import math
import os
import time
from dataclasses import replace

import numpy as np

from carfl.config import RunConfig
from carfl.dp import (
    DpConfig,
    DpState,
    adapt_threshold,
    clip_update,
    flat_norm,
    init_dp,
    noise_multiplier_delta,
    noise_variance,
    sample_noise,
)
from carfl.evaluation import evaluate, four_way_comparison
from carfl.experiment import build_setup
from carfl.federation import make_clients, run_centralized, run_training
from carfl.rng import Stream
from carfl.theory import check_run, steps_per_round, threshold_violation
from carfl.transport import (
    MSG_NAMES,
    CodecError,
    Message,
    decode_message,
    decode_tensors,
    encode_message,
    encode_tensors,
)

from conftest import tensors_equal
from gradcheck import random_instance, relative_gradient_error
from netutil import run_networked

BLOBS = {"data.n_per_class": 1000, "data.n_classes": 2, "data.dim": 16, "data.spread": 1.0,
         "encoder.d_hidden": 8, "fed.parallel": False}
HEAVY = {**BLOBS, "encoder.d_hidden": 512, "model.mode": "adapter_and_classifier",
         "fed.m": 3, "fed.T": 5, "fed.E": 2, "fed.batch_size": 16, "fed.lr": 0.01,
         "fed.parallel": True}
THEORY = {**BLOBS, "data.n_per_class": 100, "model.mode": "adapter_and_classifier",
          "fed.m": 2, "fed.T": 30, "fed.steps_per_round": 1, "fed.lr": 0.02, "train.trace": True}


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[acceptance {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _clock():
    t0 = time.perf_counter()
    return lambda: time.perf_counter() - t0


@functools.lru_cache(maxsize=None)
def adaptive_fl_run():
    s = build_setup(RunConfig({**BLOBS, "fed.lr": 0.05, "dp.mode": "adaptive"}))
    return s, run_training(s.fed, s.enc, s.train, s.val, s.init)


@functools.lru_cache(maxsize=None)
def theory_run(mode: str):
    extra = {"dp.mode": mode, "dp.c0": 0.05}
    s = build_setup(RunConfig({**THEORY, **extra}))
    return s, run_training(s.fed, s.enc, s.train, s.val, s.init)


def test_01_gradient_oracle(capsys):
    elapsed = _clock()
    worst = max(relative_gradient_error(*random_instance(seed)) for seed in range(100))
    t = elapsed()
    report(capsys, 1, worst < 1e-4 and t < 10,
           f"100 instances, worst relative FD error {worst:.2e} (< 1e-4), {t:.1f} s (< 10 s)")


def test_02_dp_mechanism_laws(capsys):
    elapsed = _clock()
    rng = Stream(2024)
    worst_clip = 0.0
    for _ in range(1000):
        delta = [rng.normal((3, 4)) * 10 ** rng.uniform_range(-3, 3, ()), rng.normal(5)]
        C = 10 ** float(rng.uniform_range(-2, 2, ()))
        got = flat_norm(clip_update(delta, C))
        worst_clip = max(worst_clip, abs(got - min(flat_norm(delta), C)) / min(flat_norm(delta), C))
    state = DpState(C=1.0, sigma0_sq=0.02, sigma1_sq=0.3)
    target = noise_variance(state, 0.5)
    x = sample_noise([(1_000_000,)], state, 0.5, Stream(7))[0]
    z_se = abs(float(np.mean(x ** 2)) - target) / (target * math.sqrt(2 / 1e6))
    z_delta, _ = noise_multiplier_delta(0.1, 2)
    t = elapsed()
    ok = worst_clip < 1e-12 and z_se < 4 and abs(z_delta - 0.115470) <= 1e-6 and t < 30
    report(capsys, 2, ok,
           f"clip law worst rel err {worst_clip:.1e}; noise variance off by {z_se:.2f} SE (< 4); "
           f"z_delta(m=2, z=0.1) = {z_delta:.6f}; {t:.1f} s")


def test_03_one_client_equals_centralized(capsys):
    elapsed = _clock()
    rc = RunConfig({**BLOBS, "model.mode": "adapter_and_classifier", "model.pre_classifier": True,
                    "fed.m": 1, "fed.T": 3, "fed.E": 2, "fed.lr": 0.05})
    s = build_setup(rc)
    fed = run_training(s.fed, s.enc, s.train, s.val, s.init)
    cen = run_centralized(s.fed, s.enc, s.train, s.val, s.init)
    same = tensors_equal(fed.model.named_tensors().values(), cen.model.named_tensors().values())
    t = elapsed()
    report(capsys, 3, same and t < 30,
           f"m=1, DP off, 6 epochs with dropout: bitwise identical = {same}; {t:.1f} s")


def test_04_retriever_ordering(capsys):
    elapsed = _clock()
    s = build_setup(RunConfig(BLOBS))
    c = four_way_comparison(s.train, s.val, s.enc, epochs=10, lr=0.05, seed=0)
    t = elapsed()
    gap = 100 * (c.classifier_only - c.frozen_mips)
    ok = c.combined >= c.classifier_only - 0.005 and gap >= 10 and t < 300
    report(capsys, 4, ok,
           f"MIPS {100 * c.frozen_mips:.2f} / soft+MIPS {100 * c.soft_mips:.2f} / "
           f"classifier {100 * c.classifier_only:.2f} / soft+classifier {100 * c.combined:.2f}; "
           f"classifier - MIPS = {gap:.1f} pts (>= 10); {t:.1f} s")


def test_05_federated_matches_centralized(capsys):
    elapsed = _clock()
    s = build_setup(RunConfig({**BLOBS, "fed.m": 2, "fed.T": 5, "fed.E": 2, "fed.lr": 0.05}))
    fl = evaluate(run_training(s.fed, s.enc, s.train, s.val, s.init).model, s.enc, s.val)[1]
    cen_model = run_centralized(s.fed, s.enc, s.train, s.val, s.init, epochs=10).model
    cen = evaluate(cen_model, s.enc, s.val)[1]
    t = elapsed()
    diff = 100 * abs(fl - cen)
    report(capsys, 5, diff <= 2 and t < 300,
           f"2-client FL {100 * fl:.2f} vs centralized {100 * cen:.2f}: {diff:.2f} pts (<= 2); "
           f"{t:.1f} s")


def test_06_parallel_speedup(capsys):
    elapsed = _clock()
    rc = RunConfig(HEAVY)
    s = build_setup(rc)
    t0 = time.perf_counter()
    run_centralized(s.fed, s.enc, s.train, s.val, s.init, epochs=s.fed.T * s.fed.E)
    t_cen = time.perf_counter() - t0
    t0 = time.perf_counter()
    run_training(s.fed, s.enc, s.train, s.val, s.init)
    t_fl = time.perf_counter() - t0
    t0 = time.perf_counter()
    _, codes = run_networked(rc, timeout_s=300)
    t_net = time.perf_counter() - t0
    t = elapsed()
    sp_fl, sp_net = t_cen / t_fl, t_cen / t_net
    cpus = len(os.sched_getaffinity(0))
    ok = sp_fl >= 1.5 and sp_net >= 1.5 and codes == [0, 0, 0] and t < 600
    report(capsys, 6, ok,
           f"centralized {t_cen:.1f} s, 3 clients in-process {t_fl:.1f} s (x{sp_fl:.2f}), "
           f"networked {t_net:.1f} s (x{sp_net:.2f}); need x1.5; {cpus} CPU(s) available")


def test_07_adaptive_dp_degradation(capsys):
    elapsed = _clock()
    s, dp_run = adaptive_fl_run()
    plain = run_training(replace(s.fed, dp=DpConfig()), s.enc, s.train, s.val, s.init)
    acc_dp = evaluate(dp_run.model, s.enc, s.val)[1]
    acc = evaluate(plain.model, s.enc, s.val)[1]
    t = elapsed()
    drop = 100 * (acc - acc_dp)
    report(capsys, 7, drop <= 6 and t < 300,
           f"no-DP FL {100 * acc:.2f} vs adaptive-DP FL {100 * acc_dp:.2f}: drop {drop:.2f} pts "
           f"(<= 6); {t:.1f} s")


def _lemma_excess(setup, result) -> float:
    """Largest excess of any recorded threshold over its ceiling in one run."""
    fed, dp = setup.fed, setup.fed.dp
    shards = [c.shard for c in make_clients(setup.train, fed)]
    alpha = fed.lr * steps_per_round(fed, shards)
    B = 1.05 * max(g for r in result.records for c in r.clients for g in c.grad_norms)
    hist = np.array([[c.C for c in r.clients] for r in result.records])[dp.warmup_rounds:]
    return threshold_violation(hist, dp.c0, dp.beta, dp.gamma, B, alpha)


def test_08_adaptive_clipping_dynamics(capsys):
    elapsed = _clock()
    cfg = DpConfig(mode="adaptive", c0=1.0, beta=0.1, gamma=0.9, z=0.1)
    worst_steps = 0
    for d in (1e-3, 0.1, 0.5, 2.0, 50.0):
        state = init_dp(cfg, 2)
        steps = 0
        while abs(state.C - cfg.gamma * d) > 0.01 * cfg.gamma * d and steps <= 200:
            state = adapt_threshold(state, cfg, d)
            steps += 1
        worst_steps = max(worst_steps, steps)
    runs = [adaptive_fl_run(), theory_run("adaptive")]
    excess = max(_lemma_excess(s, r) for s, r in runs)
    t = elapsed()
    ok = worst_steps <= 200 and excess <= 0 and t < 10
    report(capsys, 8, ok,
           f"threshold within 1% of gamma*d after at most {worst_steps} steps (<= 200); "
           f"worst ceiling excess over {len(runs)} adaptive runs {excess:.3g} (<= 0); {t:.1f} s")


def test_09_theorem_certification(capsys):
    elapsed = _clock()
    lines, ok = [], True
    for mode in ("fixed", "adaptive"):
        s, res = theory_run(mode)
        shards = [c.shard for c in make_clients(s.train, s.fed)]
        check = check_run(res.models, res.records, shards, s.enc, s.fed, s.train)
        b = check.report.bound
        ok &= check.passed and b.admissible
        lines.append(f"{mode}: measured {check.report.measured:.4g} <= bound {b.value:.4g} "
                     f"(alpha {s.fed.lr:g} < {b.alpha_max:.3g})")
    t = elapsed()
    report(capsys, 9, ok and t < 300, "; ".join(lines) + f"; {t:.1f} s")


def test_10_wire_protocol(capsys):
    elapsed = _clock()
    rng = Stream(10)
    round_trips = 0
    for i in range(500):
        shapes = [tuple(int(v) for v in 1 + (rng.uniform(int(k)) * 4).astype(int))
                  for k in (rng.uniform(3) * 4).astype(int)]
        tensors = [rng.normal(shp) for shp in shapes]
        frame = encode_message(Message(1 + i % 7, encode_tensors(tensors)))
        back = decode_tensors(decode_message(frame).payload)
        round_trips += all(a.tobytes() == b.tobytes() and a.shape == b.shape
                           for a, b in zip(tensors, back)) and len(back) == len(tensors)
    mutations = silent = 0
    for msg in (Message(6), Message(5, b"{}"), Message(4, encode_tensors([np.ones(3)]))):
        frame = encode_message(msg)
        for pos in range(10):
            for value in range(256):
                if value == frame[pos]:
                    continue
                bad = bytearray(frame)
                bad[pos] = value
                mutations += 1
                try:
                    got = decode_message(bytes(bad), max_payload=1 << 16)
                except CodecError:
                    continue
                if not (pos == 5 and value in MSG_NAMES and encode_message(got) == bytes(bad)):
                    silent += 1
    rc = RunConfig({**BLOBS, "data.n_per_class": 200, "fed.m": 2, "fed.T": 3, "fed.lr": 0.05,
                    "dp.mode": "adaptive"})
    s = build_setup(rc)
    ref = run_training(s.fed, s.enc, s.train, s.val, s.init)
    net, codes = run_networked(rc)
    same = (codes == [0, 0] and len(net.records) == len(ref.records)
            and all(a.to_dict(timing=False) == b.to_dict(timing=False)
                    for a, b in zip(net.records, ref.records))
            and tensors_equal(net.model.trainable(), ref.model.trainable()))
    t = elapsed()
    ok = round_trips == 500 and silent == 0 and same and t < 120
    report(capsys, 10, ok,
           f"{round_trips}/500 round trips; {mutations} header mutations, {silent} misparsed; "
           f"networked m=2 equals in-process = {same}; {t:.1f} s")
