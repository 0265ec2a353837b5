import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from navreplay.env import EnvFactory, place_rewards
from navreplay.graph import generate_synthetic_environment, grid_spec
from navreplay.observation import EncoderSpec, encode_synthetic
from navreplay.qnet import init_params
from navreplay.trainers import (
    RMSProp,
    RolloutBatch,
    TrainerConfig,
    TrainingDiverged,
    _worker_seeds,
    a2c_loss,
    act,
    clip_by_global_norm,
    config_to_text,
    double_q_bootstrap,
    draw_head_assignment,
    log_softmax,
    nstep_returns,
    parse_run_config,
    q_loss,
    read_metrics,
    segment_targets,
    train,
    write_metrics,
)

from oracles import tabular_chain_returns


@pytest.fixture(scope="module")
def tiny_factory():
    g, _ = generate_synthetic_environment(grid_spec(3, 3), 0)
    lay = place_rewards(g, np.random.default_rng(0), 3)
    spec = EncoderSpec(d=4, view_noise=0.05, day_shift=0.3)
    models = {s: encode_synthetic(spec, g, 0, s, stochastic=True) for s in ("train", "validation")}
    return EnvFactory(g, lay, models, t_max=30)


def tiny_config(**kw):
    base = dict(n_workers=4, n=5, n_heads=3, embed_dim=8, recurrent_dim=8, total_frames=1200,
                target_sync_interval=200)
    base.update(kw)
    return TrainerConfig(**base)


# ---- targets -----------------------------------------------------------------


def test_nstep_returns_examples():
    np.testing.assert_allclose(nstep_returns([0.1, 0, 1.0], 0.0, 0.9), [0.91, 0.9, 1.0], rtol=1e-12)
    np.testing.assert_array_equal(nstep_returns([0.3, 0.0, 1.0], 7.0, 0.0), [0.3, 0.0, 1.0])
    g, b = 0.8, 2.5
    np.testing.assert_allclose(nstep_returns([0, 0, 0, 0], b, g), [g**4 * b, g**3 * b, g**2 * b, g * b], rtol=1e-12)


def test_nstep_returns_stop_at_episode_end():
    r = nstep_returns([1.0, 1.0, 1.0], 10.0, 0.5, [False, True, False])
    np.testing.assert_allclose(r, [1.5, 1.0, 6.0])


@settings(max_examples=200, deadline=None)
@given(
    rewards=st.lists(st.sampled_from([0.0, 0.1, 1.0]), min_size=1, max_size=25),
    gamma=st.floats(0.0, 1.0, exclude_min=True),
    boot=st.floats(-5, 5),
    data=st.data(),
)
def test_nstep_returns_match_enumeration(rewards, gamma, boot, data):
    done = data.draw(st.lists(st.booleans(), min_size=len(rewards), max_size=len(rewards)))
    got = nstep_returns(rewards, boot, gamma, done)
    want = tabular_chain_returns(rewards, gamma, boot, done)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)


def test_double_q_examples():
    q = np.array([[0.1, 0.5, 0.2], [3.0, 1.0, 2.0]])
    assert double_q_bootstrap(q, q, 1) == 3.0
    online = np.array([[0.0, 0.1, 0.9]])
    assert double_q_bootstrap(online, np.array([[5.0, 1.0, 0.0]]), 0) == 0.0
    with pytest.raises(IndexError):
        double_q_bootstrap(online, online, 1)


@pytest.mark.parametrize("n_states", [3, 5, 10])
def test_double_q_targets_on_tabular_chain(n_states):
    """Segment targets from tabular Q tables equal explicit enumeration."""
    rng = np.random.default_rng(n_states)
    K, A, n, gamma = 4, 3, 6, 0.9
    q_on = rng.standard_normal((n_states, K, A))
    q_tg = rng.standard_normal((n_states, K, A))
    states = rng.integers(n_states, size=n + 1)
    rewards = rng.choice([0.0, 0.1, 1.0], size=(n, 1))
    batch = RolloutBatch(
        np.zeros((n + 1, 1, 1)), rng.integers(A, size=(n, 1)), rewards, np.zeros(n, bool),
        (None, None), np.zeros(1, int), np.ones((1, K), bool),
    )
    got = segment_targets(TrainerConfig(gamma=gamma, n_heads=K), batch, q_on[states][:, None], q_tg[states][:, None])
    for k in range(K):
        last = states[n]
        boot = q_tg[last, k, int(np.argmax(q_on[last, k]))]
        want = tabular_chain_returns(rewards[:, 0], gamma, boot, [False] * n)
        np.testing.assert_allclose(got[:, 0, k], want, rtol=1e-12)
    # a segment ending the episode bootstraps from zero
    batch.done[-1] = True
    got = segment_targets(TrainerConfig(gamma=gamma, n_heads=K), batch, q_on[states][:, None], None)
    np.testing.assert_allclose(got[:, 0, 0], tabular_chain_returns(rewards[:, 0], gamma, 0.0, batch.done), rtol=1e-12)


def test_q_loss_examples():
    q = np.zeros((1, 1, 1, 3))
    q[0, 0, 0, 1] = 2.0
    loss, dq = q_loss(q, np.array([[1]]), np.array([[[1.0]]]), np.array([[True]]))
    assert loss == 1.0 and dq[0, 0, 0, 1] == 2.0 and np.count_nonzero(dq) == 1
    loss, dq = q_loss(q, np.array([[1]]), np.array([[[2.0]]]), np.array([[True]]))
    assert loss == 0.0 and not dq.any()
    loss, dq = q_loss(q, np.array([[1]]), np.array([[[1.0]]]), np.array([[False]]))
    assert loss == 0.0 and not dq.any()


# ---- actor-critic loss -------------------------------------------------------


def test_a2c_zero_advantage_and_uniform_entropy():
    logits = np.zeros((2, 3))
    res = a2c_loss(logits, np.array([1.0, 2.0]), np.array([0, 2]), np.array([1.0, 2.0]))
    assert res.policy == 0.0 and res.value == 0.0
    assert res.entropy == pytest.approx(2 * math.log(3), rel=1e-12)


def test_a2c_two_step_hand_computation():
    logits = np.array([[0.0, 0.0, 0.0], [math.log(2), 0.0, 0.0]])
    values = np.array([0.5, 0.0])
    actions = np.array([0, 1])
    returns = np.array([1.0, -0.5])
    res = a2c_loss(logits, values, actions, returns, entropy_weight=0.01, value_weight=0.5)
    # step 1: pi uniform, advantage 0.5; step 2: pi = (1/2, 1/4, 1/4), advantage -0.5
    policy = 0.5 * math.log(3) - math.log(2)
    value = 0.5
    entropy = math.log(3) + 1.5 * math.log(2)
    assert res.policy == pytest.approx(policy, rel=1e-12)
    assert res.value == pytest.approx(value, rel=1e-12)
    assert res.entropy == pytest.approx(entropy, rel=1e-12)
    assert res.total == pytest.approx(policy + 0.5 * value - 0.01 * entropy, rel=1e-12)


def test_a2c_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 3))
    values = rng.standard_normal(4)
    actions = rng.integers(3, size=4)
    returns = rng.standard_normal(4)
    res = a2c_loss(logits, values, actions, returns, 0.05, 0.5)
    eps = 1e-6
    for i in range(4):
        for j in range(3):
            up, down = logits.copy(), logits.copy()
            up[i, j] += eps
            down[i, j] -= eps
            # the advantage is a constant for the policy term
            f = lambda lg: (
                -(np.take_along_axis(log_softmax(lg), actions[:, None], 1)[:, 0] * (returns - values)).sum()
                + 0.05 * (np.exp(log_softmax(lg)) * log_softmax(lg)).sum()
            )
            assert res.dlogits[i, j] == pytest.approx((f(up) - f(down)) / (2 * eps), abs=1e-7)
    np.testing.assert_allclose(res.dvalues, -2 * 0.5 * (returns - values))


# ---- acting ------------------------------------------------------------------


def test_act_greedy_ties_and_epsilon():
    rng = np.random.default_rng(0)
    assert act(np.array([0.1, 0.9, 0.2]), 0, rng) == 1
    assert act(np.array([[0.5, 0.5, 0.1], [0, 0, 1]]), 0, rng) == 0
    assert act(np.array([[0.5, 0.5, 0.1], [0, 0, 1]]), 1, rng) == 2
    draws = [act(np.array([0.0, 10.0, 0.0]), 0, rng, epsilon=1.0) for _ in range(10_000)]
    assert chisquare(np.bincount(draws, minlength=3)).pvalue > 0.01


def test_act_sample_follows_softmax():
    rng = np.random.default_rng(1)
    logits = np.array([0.0, math.log(2), math.log(5)])
    draws = np.bincount([act(logits, 0, rng, "sample") for _ in range(20_000)], minlength=3)
    expected = np.array([1, 2, 5]) / 8 * 20_000
    assert chisquare(draws, expected).pvalue > 0.01


def test_mask_fraction_and_head_uniformity():
    rng = np.random.default_rng(3)
    probs = np.full(10, 0.5)
    heads, masks = zip(*(draw_head_assignment(rng, probs) for _ in range(10_000)))
    frac = np.mean(masks, axis=0)
    assert np.all(np.abs(frac - 0.5) <= 0.02)
    assert chisquare(np.bincount(heads, minlength=10)).pvalue > 0.01


# ---- optimizer ---------------------------------------------------------------


def test_global_norm_clip_and_rmsprop_step():
    g = np.array([30.0, 40.0])
    clipped, norm = clip_by_global_norm(g, 40.0)
    assert norm == 50.0 and np.linalg.norm(clipped) == pytest.approx(40.0)
    assert clip_by_global_norm(g, 100.0)[0] is g
    from navreplay.qnet import NetworkConfig, ParameterSet

    p = ParameterSet(NetworkConfig(1, 1, 1), np.zeros(len(ParameterSet(NetworkConfig(1, 1, 1)))))
    opt = RMSProp(len(p), lr=0.1, decay=0.99, eps=1e-5)
    grad = np.ones(len(p))
    opt.step(p, grad)
    expect = -0.1 / math.sqrt(0.01 + 1e-5)
    np.testing.assert_allclose(p.flat, expect)


# ---- training loop -----------------------------------------------------------


def test_zero_frames_returns_initial_parameters(tiny_factory):
    cfg = tiny_config(total_frames=0)
    res = train(tiny_factory, cfg, 5)
    ref = init_params(cfg.network(tiny_factory.obs_dim), _worker_seeds(5, cfg.n_workers)[0])
    np.testing.assert_array_equal(res.params.flat, ref.flat)
    assert res.frames == 0 and res.train_metrics == []


def test_full_scale_config_accepted():
    cfg = TrainerConfig(n_workers=64, n_heads=10, p_mask=0.5, total_frames=int(3e8))
    assert cfg.n_workers == 64 and cfg.total_frames == 300_000_000
    with pytest.raises(ValueError):
        TrainerConfig(p_mask=0.0)
    with pytest.raises(ValueError):
        TrainerConfig(n=0)


def test_masked_out_head_is_never_updated(tiny_factory):
    cfg = tiny_config(n_heads=3, head_p_mask=(1.0, 0.0, 0.5))
    res = train(tiny_factory, cfg, 1)
    init = init_params(cfg.network(tiny_factory.obs_dim), _worker_seeds(1, cfg.n_workers)[0])
    for sl in res.params.head_slices(1):
        np.testing.assert_array_equal(res.params.flat[sl], init.flat[sl])
    for sl in res.params.head_slices(0):
        assert not np.array_equal(res.params.flat[sl], init.flat[sl])


def test_heads_and_masks_constant_within_episode(tiny_factory):
    seen = []
    cfg = tiny_config()
    train(tiny_factory, cfg, 2, on_segment=lambda b: seen.append((b.heads.copy(), b.masks.copy(), b.done[-1])))
    episode = []
    for heads, masks, end in seen:
        episode.append((heads, masks))
        if end:
            for h, m in episode:
                np.testing.assert_array_equal(h, episode[0][0])
                np.testing.assert_array_equal(m, episode[0][1])
            episode = []
    assert all(h.max() < cfg.n_heads for h, _, _ in seen)


@pytest.mark.parametrize("algorithm", ["a2c", "nstep_q", "bootstrap_q"])
def test_training_is_reproducible(tiny_factory, algorithm):
    cfg = tiny_config(algorithm=algorithm)
    a = train(tiny_factory, cfg, 9)
    b = train(tiny_factory, cfg, 9)
    assert a.train_metrics == b.train_metrics and a.val_metrics == b.val_metrics
    np.testing.assert_array_equal(a.params.flat, b.params.flat)
    assert a.frames == 1200 and a.episodes == 40


def test_single_head_bootstrap_reduces_to_nstep(tiny_factory):
    nstep = tiny_config(algorithm="nstep_q")
    boot = tiny_config(algorithm="bootstrap_q", n_heads=1, p_mask=1.0,
                       epsilon_start=nstep.epsilon_start, epsilon_end=nstep.epsilon_end)
    a = train(tiny_factory, nstep, 4)
    b = train(tiny_factory, boot, 4)
    assert a.train_metrics == b.train_metrics and a.val_metrics == b.val_metrics
    np.testing.assert_array_equal(a.params.flat, b.params.flat)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(tiny_factory):
    cfg = tiny_config(learning_rate=float("nan"))
    with pytest.raises(TrainingDiverged, match="saved"):
        train(tiny_factory, cfg, 0, on_divergence=lambda r: "diag.txt")
    cfg = tiny_config(learning_rate=1e300, clip_norm=0.0)
    with pytest.raises(TrainingDiverged):
        train(tiny_factory, cfg, 0)


def test_metrics_and_config_round_trip(tmp_path, tiny_factory):
    res = train(tiny_factory, tiny_config(), 0)
    write_metrics(res.train_metrics, tmp_path / "m.txt")
    assert read_metrics(tmp_path / "m.txt") == res.train_metrics
    write_metrics(read_metrics(tmp_path / "m.txt"), tmp_path / "m2.txt")
    assert (tmp_path / "m.txt").read_bytes() == (tmp_path / "m2.txt").read_bytes()
    cfg = tiny_config(head_p_mask=(0.2, 0.3, 1.0))
    back, extra = parse_run_config(config_to_text(cfg, {"env_dir": "x"}))
    assert back == cfg and extra == {"env_dir": "x"}
    assert parse_run_config("total_frames = 3e8\n")[0].total_frames == 300_000_000
    with pytest.raises(ValueError, match="line 1"):
        parse_run_config("gamma = fast\n")
