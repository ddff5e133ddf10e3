"""Acceptance checks, one test per criterion.

Each test prints a ``C<k> PASS|FAIL`` line with the measured quantities and
its runtime; the lines are repeated in a summary section at the end of the
session. The empirical criteria (7, 8, 9, 11) read the same nine desk-scale
models from ``desk``; training time is charged to whichever of them runs
first (criterion 7 under the default ordering).
"""

import time
from pathlib import Path

import numpy as np

from cascadenet import autodiff as ad
from cascadenet import cli
from cascadenet.data import balanced_split
from cascadenet.evaluation import (StoppingPolicy, collect_trace, dip, speed_accuracy_curve, spearman_rho,
                                   stop_time, transient_noise_episode)
from cascadenet.kernels import DelayLine, TemporalKernel, delay_push, explicit_convolution
from cascadenet.metacog import (MetaCogConfig, auroc, build_trace_features, evaluate_metacog, fpr_at_tpr,
                                train_metacog)
from cascadenet.network import RolloutTrace, forward_standard, rollout_static
from cascadenet.noise import NoiseSpec
from cascadenet.td import TDConfig, final_ce_loss, target_weights, td_grad_incremental, td_loss, td_targets
from cascadenet.trainer import eval_split

import desk
import oracles
from conftest import ACCEPTANCE_LINES, central_difference, random_net, rel_err

LAMBDAS = (0.0, 0.25, 0.5, 0.83, 1.0)
SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.cfg"


def report(capsys, cid, ok, elapsed, limit, detail):
    within = elapsed < limit
    line = (f"C{cid} {'PASS' if ok and within else 'FAIL'}  {detail}  "
            f"[{elapsed:.2f}s, limit {limit:g}s]")
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line
    assert within, line


def probs_of(logits):
    e = np.exp(logits - logits.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def model_stats(result):
    return np.asarray(result.meta["train_mean"]), np.asarray(result.meta["train_std"])


# ------------------------------------------------------------ structural


def test_c1_osd_asymptote_equals_standard_forward(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for i in range(20):
        B = (2, 4, 8)[i % 3]
        conv = i % 4 == 3
        shape = (2, 6, 6) if conv else (7,)
        net = random_net(rng, num_blocks=B, width=6, num_classes=5, input_shape=shape,
                         block_type="conv" if conv else "mlp", dtype="float32")
        x = rng.normal(size=(4,) + shape).astype(np.float32)
        tr = rollout_static(net, x, B + 1, TemporalKernel.osd())
        worst = max(worst, rel_err(tr.logits[B].value, forward_standard(net, x).value))
    report(capsys, 1, worst < 1e-5, time.perf_counter() - t0, 10,
           f"20 nets, B in {{2,4,8}}, fp32; max rel err at D={worst:.2e} (< 1e-5)")


def test_c2_identity_kernel_is_standard_forward_bitwise(capsys, fp64):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    ok = True
    for B in (1, 2, 4, 8):
        for block_type, shape in (("mlp", (5,)), ("conv", (2, 5, 5))):
            net = random_net(rng, num_blocks=B, input_shape=shape, block_type=block_type)
            x = rng.normal(size=(3,) + shape)
            ref = forward_standard(net, x).value
            tr = rollout_static(net, x, B + 3, TemporalKernel.identity())
            ok &= all(np.array_equal(z.value, ref) for z in tr.logits)
    report(capsys, 2, ok, time.perf_counter() - t0, 5,
           "identity-kernel trace constant and bit-equal to the standard forward (fp64, 8 nets)")


def test_c3_ews_incremental_equals_explicit(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for alpha in (0.1, 0.5, 0.9):
        k = TemporalKernel.ews(alpha)
        for _ in range(100):
            seq = list(rng.normal(size=(int(rng.integers(1, 40)), int(rng.integers(1, 6)))))
            line = DelayLine(k)
            for t, z in enumerate(seq, start=1):
                out = delay_push(line, k, ad.Tensor(z)).value
                worst = max(worst, rel_err(out, explicit_convolution(seq[:t], k)))
    report(capsys, 3, worst < 1e-5, time.perf_counter() - t0, 5,
           f"3 alphas x 100 sequences; max rel err {worst:.2e} (< 1e-5)")


def test_c4_td_target_edge_cases(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    ok = True
    for T in range(1, 17):
        logits = [ad.Tensor(rng.normal(size=(3, 4)) * 2) for _ in range(T)]
        tr = RolloutTrace(logits, [None] * T, "cascaded", T)
        y = np.eye(4)[rng.integers(0, 4, 3)]
        ok &= np.array_equal(td_targets(tr, y, 1.0).values, np.broadcast_to(y, (T, 3, 4)))
        zero = td_targets(tr, y, 0.0).values
        ok &= np.array_equal(zero[-1], y)
        ok &= all(np.allclose(zero[t], tr.probs[t + 1], rtol=1e-15, atol=0) for t in range(T - 1))
    worst = 0.0
    for lam in LAMBDAS:
        for T in range(1, 17):
            for t in range(1, T + 1):
                future, label = target_weights(lam, t, T)
                worst = max(worst, abs(sum(future) + label - 1.0))
    ok &= worst < 1e-12
    report(capsys, 4, bool(ok), time.perf_counter() - t0, 5,
           f"lambda=1 -> labels, lambda=0 -> next outputs; max |sum w - 1| = {worst:.1e} (< 1e-12)")


def test_c5_eligibility_trace_gradient_equals_full_sequence(capsys, fp64):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for lam in LAMBDAS:
        for kernel in (TemporalKernel.osd(), TemporalKernel.ews(0.7)):
            net = random_net(rng, num_blocks=2, width=4, num_classes=3)
            x = rng.normal(size=(3, 5))
            y = np.eye(3)[rng.integers(0, 3, 3)]
            T = 6
            inc = td_grad_incremental(net, x, y, TDConfig(lam, T), kernel=kernel)
            tr = rollout_static(net, x, T, kernel)
            full = ad.grad(td_loss(tr, td_targets(tr, y, lam)), [p for _, p in net.parameters()])
            worst = max(worst, max(rel_err(a, b) for a, b in zip(inc, full)))
    report(capsys, 5, worst < 1e-5, time.perf_counter() - t0, 30,
           f"5 lambdas x 2 kernels, fp64; max per-tensor rel err {worst:.2e} (< 1e-5)")


def test_c6_autodiff_matches_finite_differences(capsys, fp64):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    worst, worst_name = 0.0, ""
    for block_type, shape, x_shape in (("mlp", (5,), (4, 5)), ("conv", (2, 4, 4), (2, 2, 4, 4))):
        net = random_net(rng, num_blocks=2, width=3, num_classes=3, input_shape=shape, block_type=block_type)
        x = rng.normal(size=x_shape)
        y = np.eye(3)[rng.integers(0, 3, x_shape[0])]
        params = [p for _, p in net.parameters()]

        def loss():
            return final_ce_loss(rollout_static(net, x, 3, TemporalKernel.osd(), training=True), y)

        grads = ad.grad(loss(), params)
        fds = central_difference(lambda: float(loss().value), [p.value for p in params])
        for (name, _), g, fd in zip(net.parameters(), grads, fds):
            e = rel_err(g, fd)
            if e > worst:
                worst, worst_name = e, f"{block_type}:{name}"
    report(capsys, 6, worst < 1e-6, time.perf_counter() - t0, 30,
           f"every parameter of 2-block mlp and conv nets; max rel err {worst:.2e} at {worst_name} (< 1e-6)")


# ------------------------------------------------------------- empirical


def test_c7_lambda_ordering(capsys):
    t0 = time.perf_counter()
    acc = {v: np.mean([[desk.val_accuracy(desk.model(v, s), t) for t in range(1, desk.base_config().horizon + 1)]
                       for s in desk.SEEDS], axis=0)
           for v in desk.VARIANTS}
    early = {v: float(a[:2].mean()) for v, a in acc.items()}
    gap = abs(float(acc["td0"][-1] - acc["ce"][-1]))
    ok = early["td0"] > early["td1"] and gap <= 0.02
    report(capsys, 7, ok, time.perf_counter() - t0, 600,
           f"early acc td0 {early['td0']:.4f} > td1 {early['td1']:.4f}; "
           f"asymptote |td0 - ce| = {gap:.4f} (<= 0.02); includes training 9 models")


def test_c8_speed_accuracy_monotone(capsys):
    t0 = time.perf_counter()
    thetas = np.linspace(0.0, 1.0, 50)
    ok = True
    for v in desk.VARIANTS:
        for s in desk.SEEDS:
            r = desk.model(v, s)
            cfg = desk.config(v, s)
            ds = eval_split(cfg, "val", *model_stats(r))
            logits, _ = collect_trace(r.net, ds.images, cfg.horizon, cfg.temporal_kernel)
            probs = probs_of(logits)
            curve = speed_accuracy_curve(probs, ds.labels, thetas)
            stops = curve.mean_stop_cycles
            ok &= bool(np.all(np.diff(stops) >= 0))
            ok &= stops[0] == 1 and stops[-1] == cfg.horizon
            ok &= bool(np.all(stop_time(probs, StoppingPolicy(theta=0.0)) == 1))
    report(capsys, 8, ok, time.perf_counter() - t0, 60,
           "9 models x 50 thetas: mean stop time non-decreasing, theta=0 at t=1, theta=1 at t=T")


def test_c9_dip_mechanics(capsys):
    t0 = time.perf_counter()
    hand = float(dip([0.9, 0.9, 0.5, 0.7, 0.9], 2))
    ok_hand = abs(hand - 0.2) < 1e-12
    zero_worst = 0.0
    mean_dip = {}
    for v in ("td0", "ce"):
        dips = []
        for s in desk.SEEDS:
            r = desk.model(v, s)
            cfg = desk.config(v, s)
            ds = eval_split(cfg, "val", *model_stats(r))
            rng = np.random.default_rng(s)
            clean = transient_noise_episode(r.net, ds.images, ds.labels,
                                            NoiseSpec("occlusion", protocol="transient", duration=0),
                                            cfg.temporal_kernel, rng)
            zero_worst = max(zero_worst, float(np.abs(clean.dip).max()))
            rng = np.random.default_rng(s)
            for n in range(1, 7):
                spec = NoiseSpec("occlusion", protocol="transient", duration=n)
                dips.append(transient_noise_episode(r.net, ds.images, ds.labels, spec,
                                                    cfg.temporal_kernel, rng).dip.mean())
        mean_dip[v] = float(np.mean(dips))
    ok = ok_hand and zero_worst < 1e-6 and mean_dip["td0"] <= mean_dip["ce"]
    report(capsys, 9, ok, time.perf_counter() - t0, 300,
           f"hand case {hand:.15f}; N=0 max |DIP| {zero_worst:.1e}; occlusion DIP td0 {mean_dip['td0']:.4f} "
           f"<= ce {mean_dip['ce']:.4f}")


def test_c10_metric_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    worst = 0.0
    for i in range(50):
        n = int(rng.integers(4, 16))
        # a coarse grid on half the cases so ties occur
        x, y = rng.normal(size=(2, n))
        if i % 2:
            x, y = np.round(x, 0), np.round(y, 0)
        if np.ptp(x) > 0 and np.ptp(y) > 0:
            worst = max(worst, abs(spearman_rho(x, y) - oracles.spearman(x, y)))
        labels = rng.permutation(np.r_[np.ones(n // 2, int), np.zeros(n - n // 2, int)])
        worst = max(worst, abs(auroc(x, labels) - oracles.pairwise_auroc(x, labels)))
        target = float(rng.choice([0.5, 0.8, 0.95]))
        worst = max(worst, abs(fpr_at_tpr(x, labels, target) - oracles.sweep_fpr_at_tpr(x, labels, target)))
    report(capsys, 10, worst <= 1e-12, time.perf_counter() - t0, 5,
           f"spearman, auroc, fpr@tpr on 50 cases each; max |diff| {worst:.1e} (<= 1e-12)")


def test_c11_metacog_trace_benefit(capsys):
    t0 = time.perf_counter()
    scores = {"final": [], "all": []}
    for s in desk.SEEDS:
        r = desk.model("td0", s)
        cfg = desk.config("td0", s)
        mean, std = model_stats(r)
        k = TemporalKernel.ews(0.9)
        z_in, _ = collect_trace(r.net, eval_split(cfg, "test", mean, std).images, 20, k)
        z_out, _ = collect_trace(r.net, eval_split(cfg, "ood", mean, std).images, 20, k)
        z = np.concatenate([z_in, z_out], axis=1)
        y = np.r_[np.ones(z_in.shape[1], int), np.zeros(z_out.shape[1], int)]
        fit, hold = balanced_split(y, 0.5, np.random.default_rng(s))
        for scope in scores:
            f = build_trace_features(z, "logits", scope)
            m = train_metacog(f[fit][y[fit] == 1], f[fit][y[fit] == 0], MetaCogConfig(epochs=50, seed=s))
            scores[scope].append(evaluate_metacog(m, f[hold][y[hold] == 1], f[hold][y[hold] == 0])["auroc"])
    final, every = float(np.mean(scores["final"])), float(np.mean(scores["all"]))
    report(capsys, 11, every >= final, time.perf_counter() - t0, 120,
           f"mean AUROC all-steps {every:.4f} >= final-step {final:.4f}")


def test_c12_pipeline_rerun_is_byte_identical(capsys, tmp_path):
    t0 = time.perf_counter()
    for run in ("a", "b"):
        base = tmp_path / run
        assert cli.main(["train", "--config", str(SMOKE), "--out", str(base / "train")]) == 0
        assert cli.main(["eval", "--checkpoint", str(base / "train" / "model.ckpt"), "--out", str(base / "eval")]) == 0
    csvs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    same = [(tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes() for p in csvs]
    same.append((tmp_path / "a/train/model.ckpt").read_bytes() == (tmp_path / "b/train/model.ckpt").read_bytes())
    report(capsys, 12, len(csvs) == 5 and all(same), time.perf_counter() - t0, 600,
           f"train+eval twice: {len(csvs)} CSVs and the checkpoint byte-identical")
