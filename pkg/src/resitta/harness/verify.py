"""Run every engine routine against its brute-force counterpart in ``resitta.oracle``."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .. import nn, oracle, resibn, stream
from ..adapter import ModelPair, teacher_ema
from ..entrobank import Bank, BankConfig


def _random_state(rng, c: int, eta: float = 0.01, nu: float = 0.05) -> resibn.NormState:
    return resibn.NormState(
        mu_s=rng.normal(0, 2, c),
        sigma_s=rng.uniform(0.1, 3, c),
        mu_t=rng.normal(0, 2, c),
        sigma_t=rng.uniform(0.1, 3, c),
        gamma=np.ones(c),
        beta=np.zeros(c),
        nu_b=nu,
        eta_t=eta,
    )


def check_batch_stats(rng) -> oracle.OracleReport:
    got, want = [], []
    for shape in [(7, 3), (5, 4, 3, 3), (1, 2, 6, 6), (64, 8, 8, 8)]:
        x = rng.normal(3, 2, shape)
        bs = resibn.compute_batch_stats(x)
        m, v = oracle.two_pass_stats(x)
        got += [bs.mu_b, bs.var_b]
        want += [m, v]
    return oracle.compare("batch_stats", np.concatenate(got), np.concatenate(want), atol=1e-10)


def check_ema(rng) -> oracle.OracleReport:
    state = _random_state(rng, 4)
    batches = [rng.normal(rng.normal(), rng.uniform(0.5, 2), (16, 4, 3, 3)) for _ in range(30)]
    stats = [resibn.compute_batch_stats(b) for b in batches]
    mu0, var0 = state.mu_t.copy(), state.var_t.copy()
    for bs in stats:
        state = resibn.ema_update(state, bs)
    want_mu = oracle.ema_closed_form(mu0, [s.mu_b for s in stats], state.nu_b)
    want_var = oracle.ema_closed_form(var0, [s.var_b for s in stats], state.nu_b)
    return oracle.compare("ema", np.r_[state.mu_t, state.var_t], np.r_[want_mu, want_var], atol=1e-10)


def check_w2_value(rng, n: int = 1000) -> oracle.OracleReport:
    got, want = [], []
    for _ in range(n):
        st = _random_state(rng, 1)
        got.append(resibn.wasserstein_sq(st)[0])
        want.append(oracle.gaussian_w2_sq(st.mu_s[0], st.sigma_s[0], st.mu_t[0], st.sigma_t[0]))
    return oracle.compare("w2_value", got, want, atol=1e-9)


def check_w2_grads(rng, n: int = 1000) -> oracle.OracleReport:
    got, want = [], []
    for _ in range(n):
        st = _random_state(rng, 1)
        ms, ss = st.mu_s[0], st.sigma_s[0]
        fd = oracle.finite_diff_grad(lambda th: oracle.gaussian_w2_sq(ms, ss, th[0], th[1]), [st.mu_t[0], st.sigma_t[0]])
        got += [resibn.w2_grad_mu(st)[0], resibn.w2_grad_sigma(st)[0]]
        want += list(fd)
    return oracle.compare("w2_grads", got, want, atol=1e-6)


def check_divergence_grads(rng, n: int = 200) -> list[oracle.OracleReport]:
    kl_got, kl_want, js_got, js_want, pub_got, pub_want = [], [], [], [], [], []
    for _ in range(n):
        st = _random_state(rng, 1)
        ms, ss, mt, stt = st.mu_s[0], st.sigma_s[0], st.mu_t[0], st.sigma_t[0]
        d = resibn.divergence_grad_diagnostics(st)
        kl_fd = oracle.finite_diff_grad(lambda th: oracle.gaussian_kl(th[0], th[1], ms, ss), [mt, stt], h=1e-6)
        js_fd = oracle.finite_diff_grad(lambda th: oracle.gaussian_sym_js(th[0], th[1], ms, ss), [mt, stt], h=1e-6)
        kl_got += [d.extra["kl_grad_mu"][0], d.kl_grad_sigma[0]]
        kl_want += list(kl_fd)
        js_got += [d.extra["js_grad_mu"][0], d.extra["js_grad_sigma_exact"][0]]
        js_want += list(js_fd)
        # the published sigma form agrees with the objective when the means coincide
        eq = replace(st, mu_t=st.mu_s.copy())
        pub_got.append(resibn.divergence_grad_diagnostics(eq).js_grad_sigma[0])
        pub_want.append(oracle.finite_diff_grad(lambda th: oracle.gaussian_sym_js(ms, th[0], ms, ss), [stt], h=1e-6)[0])
    return [
        oracle.compare("kl_grads", kl_got, kl_want, atol=1e-5, rtol=1e-6),
        oracle.compare("js_grads", js_got, js_want, atol=1e-5, rtol=1e-6),
        oracle.compare("js_grad_sigma_equal_means", pub_got, pub_want, atol=1e-5, rtol=1e-6),
    ]


def check_backprop(rng) -> list[oracle.OracleReport]:
    reports = []
    for mode in (nn.NormMode.TRAIN_BATCH, nn.NormMode.EVAL_TARGET):
        net = nn.toy_backbone(2, 4, 3, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        for bn in net.norm_layers:
            c = bn.state.channels
            bn.state = replace(bn.state, mu_t=rng.normal(0, 0.5, c), sigma_t=rng.uniform(0.5, 1.5, c))
        x = rng.normal(size=(5, 2, 4, 4))
        y = rng.integers(0, 3, 5)
        theta0 = net.params.copy()

        def f(theta):
            net.params[:] = theta
            return nn.softmax_cross_entropy(net.forward(x, mode), y)[0]

        idx = rng.choice(net.num_params, size=min(120, net.num_params), replace=False)
        loss, g = nn.softmax_cross_entropy(net.forward(x, mode), y)
        grads = net.backward(g).grads
        want = []
        for i in idx:
            def fi(t, i=i):
                th = theta0.copy()
                th[i] = t[0]
                return f(th)
            want.append(oracle.finite_diff_grad(fi, [theta0[i]], h=1e-6)[0])
        net.params[:] = theta0
        reports.append(oracle.compare(f"backprop_{mode.value}", grads[idx], want, atol=1e-6, rtol=1e-5))
    return reports


def check_bank(rng, sequences: int = 20, length: int = 1000) -> oracle.OracleReport:
    mismatches = 0
    worst_entropy = 0.0
    for _ in range(sequences):
        c = int(rng.integers(2, 21))
        cap = int(rng.integers(4, 65))
        t_forget = int(rng.integers(1, 400))
        t_mature = int(rng.integers(0, t_forget + 1))
        flags = rng.random(3) < 0.8
        cfg = BankConfig(cap, t_forget, t_mature, c, *map(bool, flags))
        bank = Bank(cfg)
        adds = []
        for i in range(length):
            d = rng.dirichlet(np.full(c, 0.3))
            adds.append((d, i))
            bank.add(i, d)
        ref = oracle.replay_bank(adds, cap, t_forget, t_mature, c, *map(bool, flags))
        # identities and ages must agree exactly; entropies only up to summation order
        got = sorted((r.sample, r.inferred_label, r.age, r.entropy) for r in bank.records)
        want = sorted((r["id"], r["label"], r["age"], r["entropy"]) for r in ref)
        if [g[:3] for g in got] != [w[:3] for w in want]:
            mismatches += 1
            continue
        worst_entropy = max([worst_entropy] + [abs(g[3] - w[3]) for g, w in zip(got, want)])
    ok = mismatches == 0 and worst_entropy <= 1e-12
    return oracle.OracleReport("bank_replay", worst_entropy, float(mismatches), sequences, ok, 1e-12)


def check_dirichlet_order(rng) -> oracle.OracleReport:
    n, c = 2000, 10
    labels = rng.integers(0, c, n)
    ds = stream.Dataset(np.zeros((n, 1, 1, 1), np.float32), labels, c)
    bad = 0
    for delta in (0.1, 1.0, 1e6):
        order = stream.dirichlet_order(ds, delta, seed=int(rng.integers(1 << 30)))
        bad += not np.array_equal(np.sort(order), np.arange(n))
    return oracle.OracleReport("dirichlet_permutation", float(bad), 0.0, 3, bad == 0, 0.0)


def check_teacher_ema(rng) -> oracle.OracleReport:
    net = nn.toy_backbone(2, 4, 3, seed=3, dtype=np.float64)
    pair = ModelPair.from_source(net, nu_m=0.05)
    t0 = pair.teacher.params.copy()
    trajectory = []
    for _ in range(25):
        pair.student.params += rng.normal(0, 0.01, pair.student.num_params)
        trajectory.append(pair.student.params.copy())
        teacher_ema(pair)
    want = oracle.ema_closed_form(t0, trajectory, 0.05)
    return oracle.compare("teacher_ema", pair.teacher.params, want, atol=1e-12)


def run_suite(seed: int = 1) -> list[oracle.OracleReport]:
    rng = np.random.default_rng(seed)
    reports = [
        check_batch_stats(rng),
        check_ema(rng),
        check_w2_value(rng),
        check_w2_grads(rng),
        *check_divergence_grads(rng),
        *check_backprop(rng),
        check_bank(rng),
        check_dirichlet_order(rng),
        check_teacher_ema(rng),
    ]
    return reports
