import numpy as np
import pytest
import torch
from scipy import stats as sps

from conftest import tiny_config
from synthcf.harness import preprocess
from synthcf.model import ModelConfig, forward, init_parameters, save_checkpoint, zero_parameters
from synthcf.panel import InterventionSpec, Panel, PanelError
from synthcf.synthgen import SynthConfig, generate
from synthcf.training import (
    AdamState,
    TrainConfig,
    TrainingError,
    adam_step,
    compute_gradients,
    decoder_inputs,
    finetune,
    learning_rate_at,
    pretrain,
    sample_finetune_window,
    sample_pretrain_window,
    training_loss,
)


def _panel(rng, U=3, T=12, K=2):
    return Panel(rng.random((U, T, K)), np.ones((U, T, K), bool))


# ---------------------------------------------------------------- loss


def test_training_loss_cases():
    pred = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    loss, skipped = training_loss(pred, pred.clone(), np.ones((2, 2), bool))
    assert loss.item() == 0.0 and not skipped
    loss, skipped = training_loss(pred, pred + 5, np.zeros((2, 2), bool))
    assert loss.item() == 0.0 and skipped
    truth = pred - torch.tensor([[1.0, -1.0], [0.0, 2.0]])
    loss, _ = training_loss(pred, truth, np.ones((2, 2), bool))
    assert loss.item() == pytest.approx(1.5, abs=1e-12)
    mask = np.array([[True, False], [False, True]])
    assert training_loss(pred, truth, mask)[0].item() == pytest.approx(2.5)


def test_decoder_inputs_shift():
    pre = np.arange(2 * 3 * 1, dtype=float).reshape(2, 3, 1)
    post = 100 + np.arange(2 * 2 * 1, dtype=float).reshape(2, 2, 1)
    out = decoder_inputs(pre, post, target_pos=1)
    np.testing.assert_array_equal(out[1, :, 0], [pre[1, -1, 0], post[1, 0, 0]])
    np.testing.assert_array_equal(out[0], post[0])


# ---------------------------------------------------------------- gradients


def _window(rng, panel=None):
    panel = panel if panel is not None else _panel(rng)
    return sample_finetune_window(panel, InterventionSpec(0, 10), 4, 2, rng)


def test_zero_loss_gives_zero_gradients():
    cfg = tiny_config()
    params = zero_parameters(cfg, dtype=torch.float64)
    panel = Panel(np.zeros((3, 12, 2)), np.ones((3, 12, 2), bool))
    loss, grads = compute_gradients(_window(np.random.default_rng(0), panel), params)
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_gradient_linearity(tiny_params, rng):
    w1, w2 = _window(rng), _window(rng)
    _, g1 = compute_gradients(w1, tiny_params)
    _, g11 = compute_gradients([w1, w1], tiny_params)
    _, g2 = compute_gradients(w2, tiny_params)
    _, g12 = compute_gradients([w1, w2], tiny_params)
    for n in g1:
        torch.testing.assert_close(g11[n], g1[n], atol=1e-12, rtol=1e-10)
        torch.testing.assert_close(g12[n], (g1[n] + g2[n]) / 2, atol=1e-12, rtol=1e-10)


def test_masked_last_step_exact():
    """A masked target entry at the final decoder step feeds nothing and scores nothing."""
    params = init_parameters(tiny_config(), seed=2, dtype=torch.float64, std=0.5)
    rng = np.random.default_rng(9)
    values = rng.random((3, 7, 2))
    observed = np.ones_like(values, bool)
    observed[0, 5, 0] = False  # t0 = 6, l_minus + l_plus = 6 -> the only anchor is 4, window t = 4, 5
    spec = InterventionSpec(0, 6)
    w = sample_finetune_window(Panel(values, observed), spec, 4, 2, rng)
    assert w.anchor == 4 and not w.loss_mask[1, 0]
    bumped = values.copy()
    bumped[0, 5, 0] = 1e3
    w2 = sample_finetune_window(Panel(bumped, observed), spec, 4, 2, rng)
    _, g1 = compute_gradients(w, params)
    _, g2 = compute_gradients(w2, params)
    for n in g1:
        assert torch.equal(g1[n], g2[n]), n


def test_teacher_forcing_causality(tiny_params, rng):
    cfg = tiny_config(l_plus=4)
    params = init_parameters(cfg, seed=4, dtype=torch.float64, std=0.5)
    pre, post = rng.random((3, 4, 2)), rng.random((3, 4, 2))
    base = forward(torch.tensor(pre), torch.tensor(decoder_inputs(pre, post, 1)), 1, 4, params)
    for t in range(4):
        bumped = post.copy()
        bumped[1, t:] += 10.0
        out = forward(torch.tensor(pre), torch.tensor(decoder_inputs(pre, bumped, 1)), 1, 4, params)
        assert torch.equal(out[:t + 1], base[:t + 1])
        if t < 3:
            assert not torch.equal(out[t + 1:], base[t + 1:])


def test_non_finite_gradient_names_parameter(rng):
    params = init_parameters(tiny_config(), seed=0, dtype=torch.float64)
    params["W_d"].fill_(1e300)
    with pytest.raises(TrainingError, match="non-finite gradient for parameter"):
        compute_gradients(_window(rng), params)


# ---------------------------------------------------------------- optimiser


def test_adam_zero_gradient_no_decay():
    params = init_parameters(tiny_config(), seed=1, dtype=torch.float64)
    before = params.clone()
    grads = {n: torch.zeros_like(p) for n, p in params.items()}
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0, warmup_steps=0, total_iterations=10)
    adam_step(params, grads, AdamState(), 1, cfg)
    for n, p in params.items():
        assert torch.equal(p, before[n])


def test_adam_weight_decay_targets():
    params = init_parameters(tiny_config(), seed=1, dtype=torch.float64)
    before = params.clone()
    grads = {n: torch.zeros_like(p) for n, p in params.items()}
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5, warmup_steps=0, total_iterations=10)
    adam_step(params, grads, AdamState(), 1, cfg)
    factor = 1 - learning_rate_at(1, cfg) * 0.5
    for n, p in params.items():
        if "embedding" in n or ".ln" in n:
            assert torch.equal(p, before[n]), n
        else:
            torch.testing.assert_close(p, before[n] * factor, rtol=1e-15, atol=0)


def test_adam_scalar_oracle():
    cfg = ModelConfig(num_units=1, num_covariates=1, max_time=2, num_layers=1, hidden_dim=4)
    params = zero_parameters(cfg, dtype=torch.float64)
    tc = TrainConfig(learning_rate=0.01, weight_decay=0.0, warmup_steps=4, total_iterations=10)
    state = AdamState()
    grads = {n: torch.ones_like(p) for n, p in params.items()}
    # hand-stepped Adam on one scalar with constant gradient 1
    m = v = x = 0.0
    for step in range(1, 6):
        adam_step(params, grads, state, step, tc)
        m = 0.9 * m + 0.1
        v = 0.999 * v + 0.001
        lr = 0.01 * min(step / 4, 1.0) * (1.0 if step <= 4 else (10 - step) / 6)
        x -= lr * (m / (1 - 0.9 ** step)) / ((v / (1 - 0.999 ** step)) ** 0.5 + 1e-8)
        assert params["W_e"][0, 0].item() == pytest.approx(x, rel=1e-12, abs=1e-15)
        if step == 1:
            assert x == pytest.approx(-0.01 * 0.25 / (1 + 1e-8), rel=1e-12)


def test_learning_rate_schedule():
    tc = TrainConfig(learning_rate=1.0, warmup_steps=10, total_iterations=30)
    assert learning_rate_at(5, tc) == 0.5
    assert learning_rate_at(10, tc) == 1.0
    assert learning_rate_at(20, tc) == 0.5
    assert learning_rate_at(30, tc) == 0.0
    flat = TrainConfig(learning_rate=1.0, warmup_steps=0, total_iterations=0)
    assert learning_rate_at(1, flat) == 1.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=20, total_iterations=10)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


# ---------------------------------------------------------------- sampling


def test_pretrain_sampler_uniform():
    rng = np.random.default_rng(2024)
    panel = _panel(rng, U=4, T=9, K=1)
    donors = [1, 2, 3]
    l_minus, l_plus = 3, 2
    anchors = range(l_minus, 9 - l_plus + 1)
    counts = np.zeros((3, len(anchors)))
    for _ in range(100_000):
        w = sample_pretrain_window(panel, donors, l_minus, l_plus, rng)
        counts[w.target_pos, w.anchor - l_minus] += 1
    stat, p = sps.chisquare(counts.ravel())
    assert p > 0.01, (stat, p)


def test_pretrain_window_contents(rng):
    panel = _panel(rng, U=4, T=6, K=2)
    w = sample_pretrain_window(panel, [1, 2, 3], 4, 2, rng)
    assert w.anchor == 4  # T = l_minus + l_plus leaves one anchor
    assert 0 not in w.unit_ids.tolist()
    assert w.pseudo_target in (1, 2, 3)
    others = [u for k, u in enumerate(w.unit_ids) if k != w.target_pos]
    assert w.pseudo_target not in others and len(others) == 2
    np.testing.assert_array_equal(w.truth, panel.values[w.pseudo_target, 4:6])
    with pytest.raises(PanelError):
        sample_pretrain_window(panel, [1, 2, 3], 5, 2, rng)
    np.testing.assert_array_equal(w.spatial_ids, w.unit_ids)


def test_pretrain_window_target_slot(rng):
    panel = _panel(rng, U=4, T=12, K=2)
    for _ in range(50):
        w = sample_pretrain_window(panel, [1, 2, 3], 4, 2, rng, target_slot=0)
        assert w.spatial_ids[w.target_pos] == 0
        rest = np.delete(w.spatial_ids, w.target_pos)
        np.testing.assert_array_equal(rest, np.delete(w.unit_ids, w.target_pos))
        # data rows still come from the real pseudo-target
        np.testing.assert_array_equal(w.truth, panel.values[w.pseudo_target, w.anchor:w.anchor + 2])


def test_finetune_window_bounds(rng):
    panel = _panel(rng, U=3, T=20, K=2)
    spec = InterventionSpec(1, 12)
    for _ in range(200):
        w = sample_finetune_window(panel, spec, 4, 3, rng)
        assert w.pseudo_target == 1 and w.unit_ids.tolist() == [0, 1, 2]
        assert 4 <= w.anchor and w.anchor + 3 <= 12
    assert sample_finetune_window(panel, InterventionSpec(1, 7), 4, 3, rng).anchor == 4
    with pytest.raises(PanelError, match="smaller windows"):
        sample_finetune_window(panel, InterventionSpec(1, 6), 4, 3, rng)


# ---------------------------------------------------------------- loops


def test_zero_iterations_leave_parameters(rng):
    panel = _panel(rng)
    init = init_parameters(tiny_config(), seed=3)
    out, log = pretrain(panel, InterventionSpec(0, 10), tiny_config(), TrainConfig(warmup_steps=0, total_iterations=0),
                        init=init)
    for n, p in init.items():
        assert torch.equal(out[n], p)
    assert log.losses == []


def test_finetune_freezes_temporal_table(rng):
    panel = _panel(rng, U=3, T=12, K=2)
    spec = InterventionSpec(0, 10)
    init = init_parameters(tiny_config(), seed=4)
    cfg = TrainConfig(learning_rate=1e-2, warmup_steps=1, total_iterations=5, batch_size=2)
    out, _ = finetune(init, panel, spec, cfg)
    assert torch.equal(out["temporal_embedding"], init["temporal_embedding"])
    assert not torch.equal(out["W_e"], init["W_e"])
    free, _ = finetune(init, panel, spec, cfg, frozen=())
    assert not torch.equal(free["temporal_embedding"][:10], init["temporal_embedding"][:10])
    # rows past t0 are never inside a fine-tuning window
    assert torch.equal(free["temporal_embedding"][10:], init["temporal_embedding"][10:])
    with pytest.raises(TrainingError, match="unknown"):
        finetune(init, panel, spec, cfg, frozen=("nope",))


def test_overfit_single_window():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=0, dtype=torch.float64)
    rng = np.random.default_rng(11)
    panel = Panel(rng.random((3, 7, 2)), np.ones((3, 7, 2), bool))
    spec = InterventionSpec(0, 6)  # l_minus + l_plus = 6: a single fixed window
    tc = TrainConfig(learning_rate=1e-2, weight_decay=0.0, warmup_steps=50, total_iterations=2000, batch_size=1)
    trained, log = finetune(params, panel, spec, tc)
    loss, _ = compute_gradients(sample_finetune_window(panel, spec, 4, 2, rng), trained)
    assert loss < 1e-3
    assert np.mean(log.losses[-200:]) < np.mean(log.losses[:200])


def _desk_run(seed, tmp_path, name):
    sp = generate(SynthConfig(N=4, T=80, T0=64, seed=1))
    data, _ = preprocess(sp.observed, sp.spec)
    mc = ModelConfig(num_units=5, num_covariates=2, max_time=80, num_layers=1, hidden_dim=8, l_minus=6, l_plus=3)
    tc = TrainConfig(learning_rate=3e-3, warmup_steps=20, total_iterations=200, batch_size=8, seed=seed)
    params, log = pretrain(data, sp.spec, mc, tc)
    params, _ = finetune(params, data, sp.spec, TrainConfig(learning_rate=1e-3, warmup_steps=5, total_iterations=30,
                                                            batch_size=4, seed=seed))
    return save_checkpoint(params, tmp_path / name), log


def test_pretrain_loss_decreases_and_is_deterministic(tmp_path):
    d1, log = _desk_run(5, tmp_path, "a.ckpt")
    d2, _ = _desk_run(5, tmp_path, "b.ckpt")
    assert d1 == d2
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    n = len(log.losses) // 10
    assert np.mean(log.losses[-n:]) < np.mean(log.losses[:n])
    d3, _ = _desk_run(6, tmp_path, "c.ckpt")
    assert d3 != d1


def test_log_csv(tmp_path, rng):
    _, log = pretrain(_panel(rng), InterventionSpec(0, 10), tiny_config(),
                      TrainConfig(warmup_steps=1, total_iterations=3, batch_size=2))
    lines = log.write_csv(tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,learning_rate" and len(lines) == 4
