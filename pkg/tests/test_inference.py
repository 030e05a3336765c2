import numpy as np
import pytest
import torch

import synthcf.inference as inference
from conftest import tiny_config
from synthcf.estimate import read_estimate, write_estimate
from synthcf.harness import preprocess
from synthcf.inference import (
    attention_report,
    generate_counterfactual,
    read_attention_csv,
    write_attention_csv,
)
from synthcf.model import init_parameters
from synthcf.panel import InterventionSpec, Panel, PanelError, scale_series
from synthcf.synthgen import SynthConfig, generate
from synthcf.training import TrainConfig, finetune


def _setup(T=20, U=3, seed=0, std=0.3):
    rng = np.random.default_rng(seed)
    panel = Panel(rng.random((U, T, 2)), np.ones((U, T, 2), bool))
    params = init_parameters(tiny_config(num_units=U, max_time=T), seed=seed, dtype=torch.float64, std=std)
    return panel, params


@pytest.mark.parametrize("t0", [4, 5, 11, 18, 19])
def test_output_length(t0):
    panel, params = _setup()
    est = generate_counterfactual(params, panel, InterventionSpec(0, t0))
    assert est.prediction.shape == (20 - t0,) and est.scaled.shape == (20 - t0, 2)
    assert est.time_labels == panel.time_labels[t0:]
    assert np.all(np.isfinite(est.prediction))


@pytest.mark.parametrize("t0,windows", [(18, 1), (17, 2), (10, 5)])
def test_window_count(monkeypatch, t0, windows):
    panel, params = _setup()
    calls = []
    real = inference.encoder_forward
    monkeypatch.setattr(inference, "encoder_forward", lambda *a, **k: calls.append(1) or real(*a, **k))
    generate_counterfactual(params, panel, InterventionSpec(0, t0))
    assert len(calls) == windows


def test_t0_before_l_minus():
    panel, params = _setup()
    with pytest.raises(PanelError, match="l_minus"):
        generate_counterfactual(params, panel, InterventionSpec(0, 3))


def test_determinism_and_no_target_leakage():
    panel, params = _setup()
    spec = InterventionSpec(1, 10)
    a = generate_counterfactual(params, panel, spec)
    b = generate_counterfactual(params, panel, spec)
    assert a.prediction.tobytes() == b.prediction.tobytes()
    leaked = panel.values.copy()
    leaked[1, 10:] = 99.0
    c = generate_counterfactual(params, panel.with_values(leaked), spec)
    assert c.prediction.tobytes() == a.prediction.tobytes()


@pytest.mark.parametrize("t_cut", [11, 12, 13, 15])
def test_causality_across_windows(t_cut):
    panel, params = _setup()
    spec = InterventionSpec(0, 10)
    base = generate_counterfactual(params, panel, spec).scaled
    bumped = panel.values.copy()
    bumped[1:, t_cut:] += 5.0
    out = generate_counterfactual(params, panel.with_values(bumped), spec).scaled
    k = t_cut - 10
    assert out[:k].tobytes() == base[:k].tobytes()
    assert not np.array_equal(out[k:], base[k:])


def test_generated_values_feed_back():
    panel, params = _setup()
    spec = InterventionSpec(0, 10)
    est = generate_counterfactual(params, panel, spec)
    # with the generated values written in as "real" target data the output is a fixed point
    filled = panel.values.copy()
    filled[0, 10:] = est.scaled
    again = generate_counterfactual(params, panel.with_values(filled), spec)
    np.testing.assert_array_equal(again.scaled, est.scaled)


def test_rescaled_output_round_trip():
    sp = generate(SynthConfig(N=3, T=30, T0=22, seed=2))
    data, stats = preprocess(sp.observed, sp.spec)
    params = init_parameters(tiny_config(num_units=4, max_time=30), seed=1, dtype=torch.float64, std=0.3)
    est = generate_counterfactual(params, data, sp.spec, stats)
    assert est.metadata["original_scale"]
    np.testing.assert_allclose(scale_series(est.prediction, stats, 0), est.scaled[:, 0], rtol=0, atol=1e-10)
    raw = generate_counterfactual(params, data, sp.spec)
    np.testing.assert_array_equal(raw.prediction, est.scaled[:, 0])


def test_missing_donor_post_cells_recorded():
    panel, params = _setup()
    observed = panel.observed.copy()
    observed[2, 12:14, 0] = False
    values = np.where(observed, panel.values, 0.0)
    est = generate_counterfactual(params, Panel(values, observed), InterventionSpec(0, 10))
    assert est.metadata["donor_missing_post_cells"] == 2


def test_attention_report_shape_and_labels(tmp_path):
    panel, params = _setup()
    spec = InterventionSpec(1, 11)
    rep = attention_report(params, panel, spec)
    est = generate_counterfactual(params, panel, spec)
    assert rep.weights.shape == (2, 9)
    assert rep.time_labels == est.time_labels
    assert rep.donor_labels == (panel.unit_labels[0], panel.unit_labels[2])
    assert np.all((rep.weights >= 0) & (rep.weights <= 1))
    back = read_attention_csv(write_attention_csv(rep, tmp_path / "a.csv"))
    np.testing.assert_array_equal(back.weights, rep.weights)
    assert back.time_labels == rep.time_labels and back.donor_labels == rep.donor_labels


def test_attention_single_donor():
    panel, params = _setup(U=2)
    rep = attention_report(params, panel, InterventionSpec(0, 12))
    assert rep.weights.shape == (1, 8)
    assert np.all(rep.weights <= 1.0)


def test_estimate_csv_round_trip(tmp_path):
    panel, params = _setup()
    est = generate_counterfactual(params, panel, InterventionSpec(0, 10), metadata={"checkpoint_id": "abc"})
    path, sidecar = write_estimate(est, tmp_path / "est.csv")
    assert path.read_text().splitlines()[0] == "time,predicted_value"
    back = read_estimate(path)
    np.testing.assert_array_equal(back.prediction, est.prediction)
    assert back.time_labels == est.time_labels
    assert back.estimator == "transformer" and back.metadata["checkpoint_id"] == "abc"


@pytest.fixture(scope="module")
def copy_task():
    """Target is an exact copy of donor 1; the other donors are unrelated sinusoids."""
    rng = np.random.default_rng(0)
    U, T, t0 = 4, 100, 80
    t = np.arange(T)
    values = np.empty((U, T, 2))
    for u in range(1, U):
        for k in range(2):
            values[u, :, k] = 0.5 + 0.4 * np.sin(rng.uniform(0.05, 0.3) * t + rng.uniform(0, 2 * np.pi))
    values[0] = values[1]
    spec = InterventionSpec(0, t0)
    hidden = Panel(values, np.ones_like(values, bool)).hide_target_post(spec)
    hidden = hidden.with_values(np.where(hidden.observed, hidden.values, 0.0))
    cfg = tiny_config(num_units=U, max_time=T, hidden_dim=16)
    params, _ = finetune(init_parameters(cfg, seed=0), hidden, spec,
                         TrainConfig(learning_rate=1e-2, weight_decay=0.0, warmup_steps=100, total_iterations=1000,
                                     batch_size=8, seed=0))
    return params, hidden, spec, values[0, t0:, 0]


def test_copy_task_counterfactual(copy_task):
    params, panel, spec, truth = copy_task
    est = generate_counterfactual(params, panel, spec)
    assert np.sqrt(np.mean((est.scaled[:, 0] - truth) ** 2)) < 0.05


def test_copy_task_attention_on_duplicate(copy_task):
    params, panel, spec, _ = copy_task
    mean = attention_report(params, panel, spec).weights.mean(axis=1)
    assert mean.argmax() == 0 and mean[0] > 2 * mean[1:].max()
