"""Acceptance gates for the whole lab, one test per gate.

Every test prints exactly one [Cn] PASS/FAIL line with the measured
numbers before asserting, so a full run leaves a readable scoreboard.
The heavy gates (C3, C7, C8) retrain everything they judge from
scratch; nothing here reads artifacts produced outside the test run.
"""

import time

import numpy as np

from optim4rl import agent, experiments, gridworld, metatrain, nets, optimizers
from optim4rl.autodiff import Tensor
from optim4rl.cli import main as cli_main
from optim4rl.experiments import RunConfig, run_training
from optim4rl.metatrain import MetaTrainConfig, meta_train, pipeline_offsets

from helpers import gradcheck, rel_err


def _report(tag, ok, detail):
    print(f"[{tag}] {'PASS' if ok else 'FAIL'} {detail}", flush=True)
    return ok


def _final_return(cfg):
    """Train one agent and score it by the mean of the last two
    evaluation points, the convention used for every gate below."""
    rows = run_training(cfg)
    return float(np.mean([r[4] for r in rows[-2:]]))


# shared across C7 / C8 so the meta-trained result can be put next to
# the tuned-Adam number from the same suite run
_classical_results = {}


# -- C1 -----------------------------------------------------------------------


def test_c1_gradcheck_all_blocks():
    """Tape gradients match central differences on every building block."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    results = {}

    p = nets.init_params("mlp", [5, 16, 16, 2], 11)
    x = rng.normal(size=(7, 5))
    tgt = rng.normal(size=(7, 2))

    def mlp_loss(pt):
        d = nets.mlp_apply(pt, Tensor(x)) - Tensor(tgt)
        return (d * d).mean()

    results["mlp"] = gradcheck(mlp_loss, p, n_coords=100, eps=1e-4)

    p = nets.init_params("gru", (2, 6), 12)
    xs = rng.normal(size=(3, 5, 2))
    tgt_h = rng.normal(size=(5, 6))

    def gru_loss(pt):
        h = Tensor(np.zeros((5, 6)))
        for t in range(3):
            h, _ = nets.gru_step(pt, h, Tensor(xs[t]))
        d = h - Tensor(tgt_h)
        return (d * d).mean()

    results["gru x3"] = gradcheck(gru_loss, p, n_coords=100, eps=1e-4)

    p = nets.init_params("lstm", (2, 6), 13)
    xs_l = rng.normal(size=(3, 5, 2))

    def lstm_loss(pt):
        h = Tensor(np.zeros((5, 6)))
        c = Tensor(np.zeros((5, 6)))
        for t in range(3):
            (h, c), _ = nets.lstm_step(pt, (h, c), Tensor(xs_l[t]))
        d = h - Tensor(tgt_h)
        return (d * d).mean()

    results["lstm x3"] = gradcheck(lstm_loss, p, n_coords=100, eps=1e-4)

    p = nets.init_params("conv", (3, 8, 3), 14)
    xc = rng.normal(size=(3, 3, 6, 7))
    tgt_c = rng.normal(size=(3, 8 * 4 * 5))

    def conv_loss(pt):
        d = nets.conv2d_apply(pt, Tensor(xc)) - Tensor(tgt_c)
        return (d * d).mean()

    results["conv"] = gradcheck(conv_loss, p, n_coords=100, eps=1e-4)

    config = gridworld.make_env("small_dense_short")
    theta = agent.init_agent_params(config, seed=15)
    traj, _ = agent.rollout(config, None, theta, agent.ROLLOUT_STEPS,
                            np.random.default_rng(15))
    results["a2c loss"] = gradcheck(lambda pt: agent.a2c_loss(traj, pt),
                                    theta, n_coords=100, eps=1e-4)

    elapsed = time.perf_counter() - t0
    worst = max(w for w, _ in results.values())
    fewest = min(n for _, n in results.values())
    ok = worst < 1e-4 and fewest >= 100 and elapsed < 60.0
    detail = (f"max rel err {worst:.2e} over {sorted(results)} "
              f"(>= {fewest} coords each), {elapsed:.1f}s")
    assert _report("C1", ok, detail)


# -- C2 -----------------------------------------------------------------------


def _fd_check_meta_gradient(kind, allowed_prefixes, n_coords, seed):
    """Compare the replayed meta-gradient against central differences on
    n_coords coordinates drawn among the given parameter-name prefixes.

    Returns (worst relative error, coordinates checked).  Probes only
    coordinates whose gradient clears the helpers floor; the update
    rules with a hard sign in the forward pass are only probed on their
    smooth branch, where the derivative is classical.
    """
    cfg = MetaTrainConfig(envs=("small_dense_short",), n_units=1,
                          optimizer=kind, inner_steps=2, reset_interval=8,
                          meta_lr=1e-3, iterations=1, seed=seed)
    units = metatrain.make_units(cfg)
    rng = np.random.default_rng(seed)
    phi = {k: v + rng.normal(0.0, 0.3, v.shape)
           for k, v in metatrain.init_phi(cfg).items()}
    state = optimizers.init_classical_state("adam", phi)
    records = []
    _, _, metrics = metatrain.meta_step(units, phi, state, cfg, record=records)
    live = metrics["grad"]
    assert live is not None and len(records) == 1

    flat, struct = nets.tree_flatten(live)
    spans = {}
    offset = 0
    for path, shape in struct:
        size = int(np.prod(shape)) if shape else 1
        spans[path] = (offset, size)
        offset += size
    eligible = [
        i
        for path, (start, size) in spans.items()
        if path.startswith(allowed_prefixes)
        for i in range(start, start + size)
        if abs(flat[i]) >= 1e-6
    ]
    picks = rng.choice(eligible, size=n_coords, replace=False)

    delta = 3e-5
    worst = 0.0
    for idx in picks:
        path = next(p for p, (s, n) in spans.items() if s <= idx < s + n)
        local = idx - spans[path][0]
        probe = {k: np.array(v) for k, v in phi.items()}
        probe[path].flat[local] += delta
        hi = metatrain.replay_outer_loss(probe, records, kind)
        probe[path].flat[local] -= 2 * delta
        lo = metatrain.replay_outer_loss(probe, records, kind)
        fd = (hi - lo) / (2 * delta)
        worst = max(worst, rel_err(fd, flat[idx]))
    return worst, len(picks)


def test_c2_meta_gradient_matches_finite_differences():
    """The meta-gradient through a two-update unroll is the true
    derivative of the replayed outer loss."""
    t0 = time.perf_counter()
    worst_rnn, n_rnn = _fd_check_meta_gradient(
        "rnn", ("rnn1/", "mlp1/"), n_coords=5, seed=21)
    worst_o4, n_o4 = _fd_check_meta_gradient(
        "optim4rl", ("rnn2/", "mlp2/"), n_coords=5, seed=22)
    elapsed = time.perf_counter() - t0
    worst = max(worst_rnn, worst_o4)
    ok = worst < 1e-3 and elapsed < 300.0
    detail = (f"max rel err {worst:.2e} (rnn rule {n_rnn} coords "
              f"{worst_rnn:.2e}, optim4rl v-branch {n_o4} coords "
              f"{worst_o4:.2e}), {elapsed:.1f}s")
    assert _report("C2", ok, detail)


# -- C3 -----------------------------------------------------------------------


def test_c3_identity_experiment_ordering():
    """Gate: echoing processed gradients beats echoing raw ones by ten
    points of band accuracy, and a uniform stream is near-trivial.

    The collection warms the agent up for 200k updates and records the
    next 200k at the stratified coordinate sample, the healthiest
    mixture a single-env desk-scale run produces; identity training
    runs every mode at the one lr whose curves converge smoothly.  The
    uniform control passes with margin.  The ten-point ordering gate
    does not hold on this stream at any protocol we measured: live
    magnitudes concentrate in a few decades where echoing the raw value
    through a near-linear cell is easier than synthesising exp from
    [sign, log], so the raw mode scores at or above the processed mode.
    The assertion states the gate anyway; a red here is a property of
    the desk-scale data regime, not a regression."""
    t0 = time.perf_counter()
    ds = experiments.collect_gradients(
        "big_dense_long", optimizer="rmsprop", iterations=200_000,
        warmup=200_000, seed=0, alpha=1e-4,
        coords=experiments.spread_coordinates("big_dense_long", 32, seed=0))
    acc = {}
    for mode in experiments.IDENTITY_MODES:
        res = experiments.identity_experiment(ds, mode, epochs=30_000,
                                              seed=0, lrs=(1e-4,))
        acc[mode] = res["final_accuracy"]
    elapsed = time.perf_counter() - t0
    ok = (acc["processed"] >= acc["raw"] + 0.10
          and acc["random"] >= 0.99
          and elapsed < 7200.0)
    detail = (f"accuracy raw {acc['raw']:.3f} processed {acc['processed']:.3f} "
              f"random {acc['random']:.3f} on {ds.count} collected values, "
              f"{elapsed / 60:.1f}min")
    assert _report("C3", ok, detail)


# -- C4 -----------------------------------------------------------------------


def test_c4_zero_init_equals_sign_sgd():
    """At zero initialization the learned rule is sign-SGD."""
    rng = np.random.default_rng(4)
    worst = 0.0
    checked = 0
    for block in range(100):
        n = 100
        mag = 10.0 ** rng.uniform(-12, 3, size=n)
        g = mag * rng.choice([-1.0, 1.0], size=n)
        g[rng.random(n) < 0.01] = 0.0
        alpha = 10.0 ** rng.uniform(-5, 0)
        phi = optimizers.init_learned_params("optim4rl", seed=block)
        bank = optimizers.init_bank("optim4rl", n)
        delta, _ = optimizers.optim4rl_update(phi, bank, g, alpha)
        expect = -alpha * np.sign(g)
        zero = expect == 0.0
        assert np.all(np.asarray(delta)[zero] == 0.0)
        nz = ~zero
        worst = max(worst, float(np.max(
            np.abs(np.asarray(delta)[nz] - expect[nz]) / np.abs(expect[nz]))))
        checked += n
    ok = worst < 1e-9 and checked == 10_000
    assert _report("C4", ok, f"max rel err {worst:.2e} over {checked} (g, alpha) draws")


# -- C5 -----------------------------------------------------------------------


def test_c5_update_rule_invariants():
    """Invariants of the dual-branch rule hold over random parameters
    and gradients: positive v, binary m_sign, clipped input, finite step."""
    rng = np.random.default_rng(5)
    bad_v = bad_sign = bad_clip = bad_finite = 0
    total = 0
    for block in range(10):
        n = 10_000
        scale = (0.1, 0.3, 1.0)[block % 3]
        phi = {k: v + rng.normal(0.0, scale, v.shape)
               for k, v in optimizers.init_learned_params("optim4rl", seed=block).items()}
        mag = 10.0 ** rng.uniform(-18, 6, size=n)
        g = mag * rng.choice([-1.0, 1.0], size=n)
        g[rng.random(n) < 0.01] = 0.0
        bank = nets.HiddenStateBank(rng.normal(0.0, scale, (n, optimizers.RNN_HIDDEN)),
                                    rng.normal(0.0, scale, (n, optimizers.RNN_HIDDEN)))
        delta, _ = optimizers.optim4rl_update(phi, bank, g, alpha=3e-3)

        clipped = np.clip(g, -optimizers.GRAD_CLIP, optimizers.GRAD_CLIP)
        gl = np.log(np.abs(clipped) + optimizers.PROCESS_EPS)[:, None]
        x1 = np.concatenate([np.sign(clipped)[:, None], gl], axis=1)
        o1, _ = optimizers._branch(phi, bank.h1, x1, "1", tape=False)
        o2, _ = optimizers._branch(phi, bank.h2, 2.0 * gl, "2", tape=False)
        m_sign = 2.0 * (np.tanh(o1 + optimizers.SIGN_BIAS) >= 0) - 1.0
        v = np.exp(o2)

        bad_v += int(np.sum(~(v > 0)))
        bad_sign += int(np.sum(~np.isin(m_sign, (-1.0, 1.0))))
        bad_clip += int(np.sum(np.abs(clipped) > optimizers.GRAD_CLIP))
        bad_finite += int(np.sum(~np.isfinite(np.asarray(delta))))
        total += n
    violations = bad_v + bad_sign + bad_clip + bad_finite
    ok = violations == 0 and total == 100_000
    assert _report(
        "C5", ok,
        f"{violations} violations over {total} samples "
        f"(v>0 {bad_v}, sign {bad_sign}, clip {bad_clip}, finite {bad_finite})")


# -- C6 -----------------------------------------------------------------------


def test_c6_pipeline_age_coverage():
    """Staggered resets keep the units' ages spread over a full period."""
    checked = 0
    for n, m in ((3, 3), (4, 8), (6, 512)):
        offsets = pipeline_offsets(n, m)
        assert offsets[0] == 0 and list(offsets) == sorted(set(offsets))
        assert all(0 <= r < m for r in offsets)
        ages = [0] * n
        for t in range(m - 1 + 3 * m + 1):
            for i, r in enumerate(offsets):
                if t % m == r:
                    ages[i] = 0
                elif t > 0:
                    ages[i] += 1
            if t >= m - 1:
                want = sorted((t - r) % m for r in offsets)
                assert sorted(ages) == want, (n, m, t)
                checked += 1
        if n == m:
            assert sorted(ages) == list(range(m))
    ok = checked == sum(3 * m + 1 for _, m in ((3, 3), (4, 8), (6, 512)))
    assert _report("C6", ok, f"age multiset exact at {checked} schedule points "
                             "for (n,m) in {(3,3),(4,8),(6,512)}")


# -- C7 -----------------------------------------------------------------------


def test_c7_classical_optimizers_beat_random_baseline():
    """Adam and RMSProp train the actor-critic far past a random policy
    within a fixed interaction budget."""
    t0 = time.perf_counter()
    baseline = experiments.random_policy_baseline(
        "small_dense_short", episodes=500, seed=0)
    bar = 5.0 * baseline
    means = {}
    for kind in ("adam", "rmsprop"):
        finals = [
            _final_return(RunConfig(
                env="small_dense_short", optimizer=kind, alpha=1e-3,
                seed=seed, iterations=5000, eval_every=500, eval_episodes=20))
            for seed in range(5)
        ]
        means[kind] = float(np.mean(finals))
        _classical_results[kind] = means[kind]
    elapsed = time.perf_counter() - t0
    steps = 5000 * agent.ROLLOUT_STEPS
    ok = (min(means.values()) >= bar and steps <= 100_000
          and elapsed < 1800.0)
    detail = (f"adam {means['adam']:.1f} rmsprop {means['rmsprop']:.1f} "
              f"vs bar {bar:.1f} (5x baseline {baseline:.2f}) "
              f"in {steps} env steps, 5 seeds each, {elapsed / 60:.1f}min")
    assert _report("C7", ok, detail)


# -- C8 -----------------------------------------------------------------------


def _evaluate_frozen(checkpoint):
    finals = np.array([
        _final_return(RunConfig(
            env="small_dense_short", optimizer="optim4rl", seed=seed,
            iterations=5000, eval_every=500, eval_episodes=20,
            checkpoint=checkpoint))
        for seed in (100, 101, 102, 103, 104)
    ])
    se = finals.std(ddof=1) / np.sqrt(len(finals))
    return float(finals.mean()), float(se)


def test_c8_meta_training_beats_its_own_zero_init(tmp_path):
    """Meta-training the learned optimizer from scratch, then freezing
    it, beats the frozen zero initialization (sign-SGD) on fresh seeds
    by more than one standard error on each side."""
    t0 = time.perf_counter()
    cfg = MetaTrainConfig(envs=("small_dense_short",), n_units=16,
                          optimizer="optim4rl", inner_steps=4,
                          reset_interval=256, meta_lr=1e-3,
                          iterations=3000, seed=0, checkpoint_every=250)
    meta_train(cfg, out_dir=str(tmp_path))
    meta_mean, meta_se = _evaluate_frozen(str(tmp_path / "checkpoint.bin"))
    zero_mean, zero_se = _evaluate_frozen("")
    elapsed = time.perf_counter() - t0
    ok = meta_mean - meta_se > zero_mean + zero_se and elapsed < 8 * 3600.0
    adam = _classical_results.get("adam")
    stretch = (f", tuned-adam {adam:.1f}" if adam is not None else "")
    detail = (f"frozen meta {meta_mean:.1f}+-{meta_se:.1f} vs zero-init "
              f"{zero_mean:.1f}+-{zero_se:.1f} over 5 fresh seeds"
              f"{stretch}, {elapsed / 3600:.2f}h")
    assert _report("C8", ok, detail)


# -- C9 -----------------------------------------------------------------------


def test_c9_scope_is_the_six_gridworlds(tmp_path, capsys):
    """The lab's task suite is exactly the six gridworlds; there is no
    physics simulation anywhere in the package."""
    import pathlib

    import optim4rl

    want = {"small_dense_short", "small_dense_long", "big_sparse_short",
            "big_sparse_long", "big_dense_short", "big_dense_long"}
    names_ok = set(gridworld.ENV_NAMES) == want

    root = pathlib.Path(optim4rl.__file__).parent
    offenders = []
    for src in sorted(root.rglob("*.py")) + sorted(root.rglob("*.pyx")):
        text = src.read_text()
        for engine in ("brax", "mujoco", "pybullet", "gymnasium"):
            if engine in text:
                offenders.append((src.name, engine))
    rc = cli_main(["train", "--env", "ant", "--out", str(tmp_path)])
    capsys.readouterr()
    ok = names_ok and not offenders and rc == 2
    assert _report("C9", ok, f"envs == six gridworlds: {names_ok}, physics "
                             f"imports: {offenders or 'none'}, physics env "
                             f"name rejected with exit {rc}")


# -- C10 ----------------------------------------------------------------------


def test_c10_reruns_are_bit_identical(tmp_path):
    """Same command, same seed: byte-equal metrics and checkpoints."""
    same = []
    train = ["train", "--optimizer", "adam", "--alpha", "0.001", "--seed", "3",
             "--iterations", "4", "--eval-every", "2", "--eval-episodes", "2"]
    meta = ["meta-train", "--envs", "small_dense_short", "--units", "2",
            "--optimizer", "rnn", "--inner-steps", "1", "--reset-interval", "4",
            "--iterations", "2", "--seed", "1"]
    grads = ["collect-grads", "--env", "small_dense_short", "--optimizer",
             "rmsprop", "--iterations", "20", "--coords", "3", "--seed", "2"]
    for args, files in ((train, ("run.csv",)),
                        (meta, ("metrics.csv", "checkpoint.bin")),
                        (grads, ("gradients.bin",))):
        a, b = tmp_path / f"{args[0]}_a", tmp_path / f"{args[0]}_b"
        assert cli_main(args + ["--out", str(a)]) == 0
        assert cli_main(args + ["--out", str(b)]) == 0
        for name in files:
            same.append(((a / name).read_bytes() == (b / name).read_bytes(),
                         f"{args[0]}/{name}"))
    ok = all(s for s, _ in same)
    assert _report("C10", ok, "byte-identical reruns: " +
                   ", ".join(f"{n}={'yes' if s else 'NO'}" for s, n in same))
