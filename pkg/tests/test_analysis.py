from types import SimpleNamespace

import numpy as np
import pytest

from scrl.algorithm import TrainConfig, build_agent
from scrl.analysis import (ABLATION_AXES, ablation_config, alignment_at_init, evaluate_policy, interpolate_and_retrieve,
                           interpolation_frames, mean_pairwise_cosine, normalize_trace, oracle_rollout, permutation_error,
                           pixel_interpolate_and_retrieve, q_trace, run_ablation, sample_goals, spearman, start_goal_pairs,
                           summarize, write_ablation_csv)
from scrl.dataset import generate_offline
from scrl.env import make_gridworld, make_pointmass
from scrl.oracle import dp_occupancy, marginal, optimal_logits, uniform_policy


def scripted(g):
    return lambda states, goals: [g.greedy_actions(s, goal)[0] for s, goal in zip(states, goals)]


def test_scripted_policy_always_succeeds():
    g = make_gridworld(9, 9, 0.0)
    report = evaluate_policy(g, scripted(g), goals=sample_goals(g, 40, seed=0), seed=0)
    assert report.success_rate == 1.0
    assert all(steps <= 16 for _, _, steps in report.outcomes)


def test_stay_policy_never_succeeds():
    g = make_gridworld(5, 5, 0.0)
    report = evaluate_policy(g, lambda s, goals: [4] * len(s), goals=sample_goals(g, 20, seed=1))
    assert report.success_rate == 0.0 and report.mean_episode_length == g.horizon


def test_empty_goals_rejected():
    with pytest.raises(ValueError):
        evaluate_policy(make_gridworld(3, 3), lambda s, g: [0] * len(s), goals=[])


def test_eval_report_csv(tmp_path):
    g = make_gridworld(4, 4, 0.0)
    report = evaluate_policy(g, scripted(g), goals=sample_goals(g, 3))
    report.to_csv(tmp_path / "e.csv")
    text = (tmp_path / "e.csv").read_text()
    assert text.startswith("goal_index,success,steps") and "success_rate,1.0" in text


@pytest.mark.parametrize("perm,err", [([0, 1, 2, 3], 0), ([3, 1, 2, 0], 6), ([3, 2, 1, 0], 8), ([1, 0, 2, 3], 2)])
def test_permutation_error(perm, err):
    assert permutation_error(perm) == err


def test_normalize_trace():
    np.testing.assert_array_equal(normalize_trace([2.0, 2.0, 2.0]), 0.0)
    np.testing.assert_allclose(normalize_trace([1.0, 3.0, 2.0]), [0.0, 1.0, 0.5])


def test_spearman_monotone():
    assert spearman([1, 2, 5, 9], [0, 1, 2, 3]) == pytest.approx(1.0)
    assert spearman([3, 2, 1], [0, 1, 2]) == pytest.approx(-1.0)
    assert spearman([1, 1, 1], [0, 1, 2]) == 0.0


def test_linear_embedding_retrieves_in_order():
    # psi = (1, x, y): frames along a straight line are recovered exactly
    psi = lambda x: np.hstack([np.ones((len(x), 1)), np.asarray(x, float)])
    critic = SimpleNamespace(psi=psi)
    frames = np.linspace([0.1, 0.2], [0.9, 0.6], 8)
    trace = interpolate_and_retrieve(critic, frames[0], frames[-1], frames, num_alphas=8)
    assert trace.error == 0 and list(trace.perm) == list(range(8))
    assert np.allclose(trace.similarity, 1.0)


def test_pixel_baseline_recovers_linear_frames():
    frames = np.linspace(np.zeros((1, 4, 4)), np.ones((1, 4, 4)), 5)
    trace = pixel_interpolate_and_retrieve(frames[0], frames[-1], frames, num_alphas=5)
    assert trace.error == 0


def test_interpolation_rejects_empty():
    with pytest.raises(ValueError):
        pixel_interpolate_and_retrieve(np.zeros(3), np.ones(3), np.zeros((0, 3)))


def test_oracle_rollout_grid():
    g = make_gridworld(6, 6, 0.0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        s, goal = (int(v) for v in rng.integers(36, size=2))
        states, actions = oracle_rollout(g, s, goal)
        assert len(actions) == g.distance(s, goal) and states[-1] == goal


def test_oracle_rollout_pointmass():
    p = make_pointmass(2, 0.1, 0.0)
    states, actions = oracle_rollout(p, np.array([0.1, 0.1]), np.array([0.8, 0.4]))
    assert len(actions) == 7 and np.linalg.norm(states[-1] - [0.8, 0.4]) <= 0.05
    frames = interpolation_frames(p, np.array([0.1, 0.1]), np.array([0.8, 0.4]), 4)
    assert len(frames) == 4 and np.allclose(frames[0], [0.1, 0.1])


def test_start_goal_pairs_min_length():
    g = make_gridworld(6, 6, 0.0)
    pairs = start_goal_pairs(g, 15, seed=3, min_states=6)
    assert len(pairs) == 15 and all(g.distance(s, goal) >= 5 for s, goal in pairs)
    assert pairs == start_goal_pairs(g, 15, seed=3, min_states=6)


def test_start_goal_pairs_impossible():
    with pytest.raises(ValueError):
        start_goal_pairs(make_gridworld(3, 3, 0.0), 2, min_states=8)


def test_oracle_rollout_needs_determinism():
    with pytest.raises(ValueError):
        oracle_rollout(make_gridworld(3, 3, 0.2), 0, 8)


def test_q_trace_of_oracle_logits_is_monotone():
    """f = ln(occupancy ratio) of the uniform policy rises along shortest paths."""
    g = make_gridworld(5, 5, 0.0)
    occ = dp_occupancy(g, uniform_policy(g), 0.95)
    F = optimal_logits(occ, marginal(occ, np.full((25, 5), 1 / 125)))
    critic = SimpleNamespace(phi=lambda s, a: F[np.argmax(s, 1), np.argmax(a, 1)],
                             psi=lambda x: np.eye(25)[np.argmax(x, 1)])
    rng = np.random.default_rng(1)
    for _ in range(30):
        s, goal = (int(v) for v in rng.integers(25, size=2))
        if g.distance(s, goal) < 2:
            continue
        states, actions = oracle_rollout(g, s, goal)
        q = q_trace(critic, g.features(np.array(states[:-1])), np.eye(5)[actions], g.features([goal])[0])
        assert spearman(q, np.arange(len(q))) == pytest.approx(1.0)


def test_q_trace_too_short():
    critic = SimpleNamespace(phi=lambda s, a: s, psi=lambda x: x)
    with pytest.raises(ValueError):
        q_trace(critic, np.ones((1, 3)), np.ones((1, 2)), np.ones(3))


def test_mean_pairwise_cosine():
    assert mean_pairwise_cosine(np.ones((4, 3))) == pytest.approx(1.0)
    assert mean_pairwise_cosine(np.eye(3)) == 0.0


def test_alignment_at_init_deterministic():
    g = make_gridworld(3, 3)
    cfg = TrainConfig(batch_size=8, mlp_width=16, mlp_depth=2)
    factory = lambda eps: build_agent(g, cfg.replace(cold_init_range=eps)).critic
    rng = np.random.default_rng(0)
    probe = [(g.features(rng.integers(9, size=8)), np.eye(5)[rng.integers(5, size=8)], g.features(rng.integers(9, size=8)))]
    a = alignment_at_init(factory, [1e-12, 1e-4], probe)
    assert a == alignment_at_init(factory, [1e-12, 1e-4], probe)
    assert all(-1.0 <= v <= 1.0 for v in a.values())
    with pytest.raises(ValueError):
        alignment_at_init(factory, [0.0], probe)


def test_ablation_config_axes():
    base = TrainConfig()
    assert ablation_config(base, "mlp_width_depth", (64, 2), 1).mlp_width == 64
    assert ablation_config(base, "layer_norm", False, 0).use_layer_norm is False
    assert ablation_config(base, "repr_dim", 512, 2).repr_dim == 512
    assert ablation_config(base, "batch_size", 32, 2).seed == 2
    assert len(ABLATION_AXES) == 6
    with pytest.raises(ValueError):
        ablation_config(base, "dropout", 0.1, 0)


def test_run_ablation_tiny(tmp_path):
    g = make_gridworld(3, 3, 0.0)
    store = generate_offline(g, "scripted", 600, seed=0)
    base = TrainConfig(batch_size=16, mlp_width=16, mlp_depth=1, total_steps=5, steps_per_epoch=5, gamma=0.9)
    rows = run_ablation(base, "repr_dim", [4, 8], [0, 1], g, store, num_goals=4, accuracy_batches=2,
                        out_csv=tmp_path / "a.csv")
    assert [(r.axis_value, r.seed) for r in rows] == [(4, 0), (4, 1), (8, 0), (8, 1)]
    assert set(summarize(rows)) == {4, 8}
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "axis_value,seed,success_rate,binary_accuracy" and len(lines) == 5
    write_ablation_csv(rows[:1], tmp_path / "b.csv")
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 2
