"""End-to-end acceptance checks at desk scale.

Each test records one PASS/FAIL line (printed, and repeated in the pytest
terminal summary). Runtimes are for one CPU core.
"""
import time

import numpy as np
import pytest

from scrl.algorithm import TrainConfig, train
from scrl.analysis import (binary_accuracy, evaluate_policy, held_out_batches, interpolate_and_retrieve,
                           interpolation_frames, oracle_rollout, pixel_interpolate_and_retrieve, q_trace,
                           run_ablation, sample_goals, spearman, start_goal_pairs, summarize)
from scrl.cli import main
from scrl.dataset import generate_offline, valid_transitions
from scrl.env import make_gridworld, make_pointmass, make_process
from scrl.gradcheck import TOLERANCE, run_suite
from scrl.oracle import dp_occupancy, marginal, occupancy_ratio, uniform_policy

pytestmark = pytest.mark.acceptance


def data_ratio(g, store, gamma):
    """Oracle p(s_f | s, a) / p(s_f) for the uniform policy, with p(s_f)
    marginalized over the dataset's (s, a) frequencies."""
    ids = valid_transitions(store)
    s = store.observation(ids)[:, 0].astype(int)
    a = store.action(ids)[:, 0].astype(int)
    d = np.zeros((g.n_states, g.action_dim))
    np.add.at(d, (s, a), 1)
    occ = dp_occupancy(g, uniform_policy(g), gamma)
    return occupancy_ratio(occ, marginal(occ, d / d.sum()))


def exp_critic_table(agent, g):
    """exp f(s, a, s_f) for every tabular (s, a, s_f)."""
    S, A = g.n_states, g.action_dim
    feats = g.features(np.arange(S))
    psi = agent.critic.psi(feats).astype(np.float64)
    out = np.zeros((S, A, S))
    for a in range(A):
        phi = agent.critic.phi(feats, np.tile(np.eye(A, dtype=np.float32)[[a]], (S, 1))).astype(np.float64)
        out[:, a] = np.exp(phi @ psi.T)
    return out


@pytest.fixture(scope="module")
def grid5_critic():
    """mc critic on a 5x5 gridworld, shared by the ratio and Q-trace checks."""
    g = make_gridworld(5, 5, 0.0)
    store = generate_offline(g, "uniform", 250_000, seed=0)
    cfg = TrainConfig(gamma=0.95, batch_size=256, repr_dim=32, mlp_width=128, mlp_depth=2, total_steps=20_000,
                      update_actor=False, seed=0)
    t0 = time.process_time()
    agent, _ = train(cfg, g, store)
    return g, store, agent, time.process_time() - t0


def test_oracle_ratio_recovery(grid5_critic, verdict):
    g, store, agent, seconds = grid5_critic
    ratio = data_ratio(g, store, 0.95)
    learned = exp_critic_table(agent, g)
    rhos = np.array([spearman(learned[s, a], ratio[s, a]) for s in range(g.n_states) for a in range(g.action_dim)])
    frac = float(np.mean(rhos >= 0.9))
    ok = frac >= 0.9 and seconds <= 600
    verdict(1, "oracle ratio recovery", ok,
            f"{frac:.3f} of (s,a) pairs with rho >= 0.9 (need 0.9), min rho {rhos.min():.3f}, {seconds:.0f}s")


def test_gradient_suite(verdict):
    t0 = time.process_time()
    results = run_suite(seed=0)
    seconds = time.process_time() - t0
    worst = max(results, key=lambda r: r.error)
    hard = next(r for r in results if r.name == "hard_negative")
    ok = all(r.passed for r in results) and hard.error == 0.0 and seconds <= 60
    verdict(2, "gradient suite", ok,
            f"{sum(r.passed for r in results)}/{len(results)} below {TOLERANCE:g}, worst {worst.name} "
            f"{worst.error:.2e}, hard-negative error {hard.error:.1e}, {seconds:.0f}s")


def test_td_mc_agreement(verdict):
    g = make_gridworld(3, 3, 0.0, horizon=200)
    gamma = 0.8
    store = generate_offline(g, "uniform", 250_000, seed=0)
    ratio = data_ratio(g, store, gamma)
    t0 = time.process_time()
    tables = {}
    for mode in ("mc", "td"):
        cfg = TrainConfig(gamma=gamma, batch_size=512, repr_dim=32, mlp_width=128, mlp_depth=2, lr=1e-4,
                          total_steps=8000, critic_mode=mode, update_actor=False, seed=0)
        agent, _ = train(cfg, g, store)
        tables[mode] = exp_critic_table(agent, g)
    seconds = time.process_time() - t0
    mask = (ratio >= 0.1) & (ratio <= 10)
    rel = (np.abs(tables["td"] - tables["mc"]) / tables["mc"])[mask]
    ok = rel.max() <= 0.2 and seconds <= 900
    verdict(3, "TD/MC agreement", ok,
            f"max rel err {rel.max():.3f} over {mask.sum()} entries (need <= 0.2), mean {rel.mean():.3f}, "
            f"{np.mean(rel <= 0.2):.2f} within 0.2, {seconds:.0f}s")


def test_ablation_trends(verdict):
    p = make_pointmass(2, 0.1, 0.0)
    store = generate_offline(p, "uniform", 100_000, seed=0)
    train_store, held_out = store.split(0.1, seed=0)
    base = TrainConfig(gamma=0.9, batch_size=128, repr_dim=16, mlp_width=64, mlp_depth=2, total_steps=300,
                       aug_prob=0.0)
    seeds = [0, 1, 2]
    t0 = time.process_time()

    def sweep(axis, values):
        return summarize(run_ablation(base, axis, values, seeds, p, train_store, held_out, num_goals=50))

    ln = sweep("layer_norm", [True, False])
    cold = sweep("cold_init_range", [1e-12, 1e-4])
    batch = sweep("batch_size", [32, 128, 512])
    dim = sweep("repr_dim", [16, 512])
    seconds = time.process_time() - t0
    acc = [batch[b][1] for b in (32, 128, 512)]
    parts = {
        "a": ln[True][0] > ln[False][0],
        "b": cold[1e-12][0] > cold[1e-4][0],
        "c": acc[0] <= acc[1] <= acc[2],
        "d": dim[16][0] >= dim[512][0],
    }
    ok = all(parts.values()) and seconds <= 3600
    detail = (f"(a) layer norm {ln[True][0]:.3f} vs {ln[False][0]:.3f} {'ok' if parts['a'] else 'X'}; "
              f"(b) eps 1e-12 {cold[1e-12][0]:.3f} vs 1e-4 {cold[1e-4][0]:.3f} {'ok' if parts['b'] else 'X'}; "
              f"(c) accuracy {acc[0]:.4f} {acc[1]:.4f} {acc[2]:.4f} {'ok' if parts['c'] else 'X'}; "
              f"(d) dim 16 {dim[16][0]:.3f} vs 512 {dim[512][0]:.3f} {'ok' if parts['d'] else 'X'}; {seconds:.0f}s")
    verdict(4, "ablation trends", ok, detail)


def test_policy_beats_gcbc(verdict):
    g = make_gridworld(9, 9, 0.0)
    store = generate_offline(g, "uniform", 250_000, seed=0)
    goals = sample_goals(g, 50, 1234)
    rates = {}
    for lam in (0.5, 1.0):
        runs = []
        for seed in range(3):
            cfg = TrainConfig(gamma=0.9, batch_size=256, repr_dim=16, mlp_width=128, mlp_depth=2, total_steps=3000,
                              lam=lam, aug_prob=0.0, seed=seed)
            agent, _ = train(cfg, g, store)
            runs.append(evaluate_policy(g, agent, goals=goals, seed=seed).success_rate)
        rates[lam] = float(np.mean(runs))
    verdict(5, "policy improvement over GCBC", rates[0.5] > rates[1.0],
            f"success lambda=0.5 {rates[0.5]:.3f} vs lambda=1 {rates[1.0]:.3f}")


def test_dataset_size_scaling(verdict):
    p = make_pointmass(2, 0.1, 0.0)
    held_out = generate_offline(p, "scripted", 25_000, seed=99)
    t0 = time.process_time()
    means = []
    for n in (25_000, 100_000, 250_000):
        store = generate_offline(p, "scripted", n, seed=0)
        accs = []
        for seed in range(3):
            cfg = TrainConfig(gamma=0.9, batch_size=256, repr_dim=16, mlp_width=128, mlp_depth=2, total_steps=2000,
                              update_actor=False, aug_prob=0.0, seed=seed)
            agent, _ = train(cfg, p, store)
            accs.append(binary_accuracy(agent.critic, held_out_batches(p, agent, held_out, 20, 256, 0.9, seed=7)))
        means.append(float(np.mean(accs)))
    seconds = time.process_time() - t0
    ok = means[0] < means[1] < means[2] and seconds <= 1800
    verdict(6, "dataset-size scaling", ok,
            f"held-out accuracy 25k {means[0]:.4f} 100k {means[1]:.4f} 250k {means[2]:.4f}, {seconds:.0f}s")


def test_interpolation_ordering(verdict):
    p = make_process("pixel", dim=2)
    store = generate_offline(p, "uniform", 50_000, seed=0)
    cfg = TrainConfig(gamma=0.9, batch_size=64, repr_dim=16, mlp_width=64, mlp_depth=1, total_steps=1000,
                      update_actor=False, aug_prob=0.0, seed=0)
    agent, _ = train(cfg, p, store)
    psi_err, pix_err = [], []
    for s, g in start_goal_pairs(p, 10, seed=0, min_states=8):
        frames = p.features(np.asarray(interpolation_frames(p, s, g, 8)))
        psi_err.append(interpolate_and_retrieve(agent.critic, frames[0], frames[-1], frames, 8).error)
        pix_err.append(pixel_interpolate_and_retrieve(frames[0], frames[-1], frames, 8).error)
    a, b = float(np.mean(psi_err)), float(np.mean(pix_err))
    verdict(7, "interpolation ordering", a < b, f"mean permutation error psi {a:.2f} vs pixel {b:.2f}")


def test_train_determinism(tmp_path, verdict):
    (tmp_path / "run.ini").write_text("[train]\nbatch_size = 64\nmlp_width = 32\nmlp_depth = 2\n"
                                      "gamma = 0.9\ntotal_steps = 40\nsteps_per_epoch = 20\n")
    assert main(["gen-data", "--env", "grid5", "--num-transitions", "5000", "--out", str(tmp_path / "d.scrl")]) == 0
    for run in ("a", "b"):
        assert main(["train", "--config", str(tmp_path / "run.ini"), "--data", str(tmp_path / "d.scrl"),
                     "--out-dir", str(tmp_path / run)]) == 0
    names = sorted(f.name for f in (tmp_path / "a").iterdir())
    same = [n for n in names if (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()]
    verdict(8, "determinism", "metrics.csv" in names and same == names,
            f"{len(same)}/{len(names)} files byte-identical ({', '.join(names)})")


def test_q_trace_monotone(grid5_critic, verdict):
    g, _, agent, _ = grid5_critic
    rhos = []
    for s, goal in start_goal_pairs(g, 10, seed=0):
        states, actions = oracle_rollout(g, s, goal)
        q = q_trace(agent.critic, g.features(np.array(states[:-1])), agent.action_features(actions),
                    g.features([goal])[0])
        rhos.append(spearman(q, np.arange(len(q))))
    mean = float(np.mean(rhos))
    verdict(9, "Q-trace diagnostic", mean >= 0.8, f"mean Spearman {mean:.3f} over 10 rollouts (need 0.8)")
