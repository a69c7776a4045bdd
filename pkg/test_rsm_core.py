"""
Test RSM Core - Encoder, RRL, residual mode, backward e checkpoint.
"""

from dataclasses import replace

import numpy as np
import pytest

import rsm_core
from config import ConfigError, RsmConfig
from gradcheck import run_gradcheck
from numerics import ShapeError, finite_diff_gradient, relative_error
from rsm_core import (
    CheckpointError,
    ResidualSpeakerModule,
    RrlParams,
    StateError,
    checkpoint_bytes,
    load_checkpoint,
    rrl_forward,
    save_checkpoint,
)


def small_config(**overrides) -> RsmConfig:
    base = RsmConfig(
        d_s=8, alpha=2, n_tokens=4, n_layers=3, mel_bins=16,
        conv_channels=(2, 3), kernel_size=5, stride=2, hidden_dim=8, seed=7,
    )
    return replace(base, **overrides)


def random_frames(t: int, bins: int = 16, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(t, bins))


# =====================
# Encoder
# =====================


@pytest.mark.parametrize("t", [1, 5, 128, 1000])
def test_embedding_has_fixed_length(t):
    model = ResidualSpeakerModule(small_config())
    out = model.forward(random_frames(t))
    assert out.speaker_vector.shape == (8,)
    assert out.embedding.shape == (8,)


def test_speaker_vector_permutation_invariant_bitwise():
    model = ResidualSpeakerModule(small_config())
    frames = random_frames(40)
    permuted = frames[np.random.default_rng(1).permutation(40)]
    a = model.forward(frames)
    b = model.forward(permuted)
    np.testing.assert_array_equal(a.speaker_vector, b.speaker_vector)
    np.testing.assert_array_equal(a.embedding, b.embedding)


def test_speaker_vector_duplication_invariant():
    model = ResidualSpeakerModule(small_config())
    frames = random_frames(25)
    doubled = np.repeat(frames, 2, axis=0)
    diff = model.speaker_vector(frames) - model.speaker_vector(doubled)
    assert np.max(np.abs(diff)) <= 1e-12


def test_mel_bins_mismatch_raises():
    model = ResidualSpeakerModule(small_config())
    with pytest.raises(ShapeError):
        model.forward(random_frames(5, bins=20))


def test_empty_mel_raises():
    model = ResidualSpeakerModule(small_config())
    with pytest.raises(ShapeError):
        model.forward(np.zeros((0, 16)))


def test_invalid_config_raises():
    with pytest.raises(ConfigError):
        ResidualSpeakerModule(small_config(d_s=9))


def test_init_is_deterministic():
    a = ResidualSpeakerModule(small_config())
    b = ResidualSpeakerModule(small_config())
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].value, b.params[name].value)


# =====================
# RRL
# =====================


def test_single_token_weight_is_one():
    rng = np.random.default_rng(2)
    layer = RrlParams(
        down=rng.normal(size=(4, 2)), tokens=rng.normal(size=(1, 2)),
        w_q=rng.normal(size=(2, 2)), w_k=rng.normal(size=(2, 2)),
        w_v=rng.normal(size=(2, 2)), w_o=rng.normal(size=(2, 4)),
    )
    e, w = rrl_forward(rng.normal(size=4), layer, 2.0)
    np.testing.assert_array_equal(w, [1.0])
    np.testing.assert_allclose(e, (layer.tokens[0] @ layer.w_v) @ layer.w_o, atol=1e-15)


def test_identical_tokens_give_uniform_weights():
    rng = np.random.default_rng(3)
    token = rng.normal(size=(1, 2))
    layer = RrlParams(
        down=rng.normal(size=(4, 2)), tokens=np.repeat(token, 5, axis=0),
        w_q=rng.normal(size=(2, 2)), w_k=rng.normal(size=(2, 2)),
        w_v=rng.normal(size=(2, 2)), w_o=rng.normal(size=(2, 4)),
    )
    _, w = rrl_forward(rng.normal(size=4), layer, 2.0)
    np.testing.assert_allclose(w, np.full(5, 0.2), atol=1e-15)


def test_rrl_matches_direct_formula():
    layer = RrlParams(
        down=np.array([[1.0, 0.0], [0.0, 1.0], [1.0, -1.0], [2.0, 1.0]]),
        tokens=np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 1.0]]),
        w_q=np.array([[1.0, -1.0], [0.0, 2.0]]),
        w_k=np.array([[2.0, 0.0], [1.0, 1.0]]),
        w_v=np.array([[0.0, 1.0], [1.0, 0.0]]),
        w_o=np.array([[1.0, 0.0, -1.0, 2.0], [0.0, 1.0, 1.0, -1.0]]),
    )
    query = np.array([0.5, -0.25, 0.125, 0.0])
    divisor = 2.0

    q_low = [sum(query[a] * layer.down[a, b] for a in range(4)) for b in range(2)]
    q = [sum(q_low[a] * layer.w_q[a, b] for a in range(2)) for b in range(2)]
    scores = []
    for j in range(3):
        key = [sum(layer.tokens[j, a] * layer.w_k[a, b] for a in range(2)) for b in range(2)]
        scores.append(sum(q[b] * key[b] for b in range(2)) / divisor)
    exps = [np.exp(s - max(scores)) for s in scores]
    weights = [x / sum(exps) for x in exps]
    attended = [0.0, 0.0]
    for j in range(3):
        value = [sum(layer.tokens[j, a] * layer.w_v[a, b] for a in range(2)) for b in range(2)]
        for b in range(2):
            attended[b] += weights[j] * value[b]
    expected = [sum(attended[a] * layer.w_o[a, c] for a in range(2)) for c in range(4)]

    e, w = rrl_forward(query, layer, divisor)
    assert np.max(np.abs(e - np.array(expected))) <= 1e-12
    assert np.max(np.abs(w - np.array(weights))) <= 1e-12


# =====================
# Residual mode
# =====================


@pytest.mark.parametrize("mode", ["per_layer", "verbatim_algorithm", "none"])
def test_single_layer_equals_rrl(mode):
    model = ResidualSpeakerModule(small_config(n_layers=1, residual_mode=mode))
    out = model.forward(random_frames(6))
    e, w = rrl_forward(out.speaker_vector, model.layer_params(0), model.divisor)
    np.testing.assert_array_equal(out.embedding, np.zeros(8) + e)
    np.testing.assert_array_equal(out.layers[0].weights, w)


def test_per_layer_telescoping_identity():
    model = ResidualSpeakerModule(small_config(n_layers=4))
    out = model.forward(random_frames(10))
    final_residual = out.layers[-1].query_residual
    assert np.max(np.abs(out.speaker_vector - out.embedding - final_residual)) <= 1e-9


def test_weights_on_simplex_and_contributions_recomputable():
    model = ResidualSpeakerModule(small_config(n_layers=4))
    out = model.forward(random_frames(10, seed=5))
    for i, layer in enumerate(out.layers):
        assert np.all(layer.weights >= 0)
        assert abs(layer.weights.sum() - 1.0) <= 1e-9
        p = model.layer_params(i)
        recomputed = (layer.weights @ (p.tokens @ p.w_v)) @ p.w_o
        np.testing.assert_allclose(layer.contribution, recomputed, atol=1e-12)
    np.testing.assert_allclose(out.embedding, out.contributions.sum(axis=0), atol=1e-12)


def test_verbatim_and_per_layer_at_two_layers():
    frames = random_frames(12, seed=9)
    per_layer = ResidualSpeakerModule(small_config(n_layers=2)).forward(frames)
    verbatim = ResidualSpeakerModule(small_config(n_layers=2, residual_mode="verbatim_algorithm")).forward(frames)
    # Con due layer cambia solo la query residua finale
    np.testing.assert_allclose(per_layer.embedding, verbatim.embedding, atol=1e-12)
    residual_gap = per_layer.layers[-1].query_residual - verbatim.layers[-1].query_residual
    np.testing.assert_allclose(residual_gap, per_layer.layers[0].contribution, atol=1e-12)


def test_verbatim_diverges_from_per_layer_at_three_layers():
    frames = random_frames(12, seed=9)
    per_layer = ResidualSpeakerModule(small_config(n_layers=3)).forward(frames)
    verbatim = ResidualSpeakerModule(small_config(n_layers=3, residual_mode="verbatim_algorithm")).forward(frames)
    assert np.max(np.abs(per_layer.embedding - verbatim.embedding)) > 1e-6


def test_none_mode_queries_original_speaker_vector():
    model = ResidualSpeakerModule(small_config(residual_mode="none"))
    out = model.forward(random_frames(8))
    for i, layer in enumerate(out.layers):
        e, w = rrl_forward(out.speaker_vector, model.layer_params(i), model.divisor)
        np.testing.assert_array_equal(layer.contribution, e)
        np.testing.assert_array_equal(layer.weights, w)


# =====================
# Backward
# =====================


def test_backward_before_forward_raises():
    model = ResidualSpeakerModule(small_config())
    with pytest.raises(StateError):
        model.backward(np.ones(8))


def test_backward_consumes_cache():
    model = ResidualSpeakerModule(small_config())
    model.forward(random_frames(4))
    model.backward(np.ones(8))
    with pytest.raises(StateError):
        model.backward(np.ones(8))


def test_zero_upstream_gradient_gives_zero_gradients():
    model = ResidualSpeakerModule(small_config())
    model.forward(random_frames(4))
    model.backward(np.zeros(8))
    for grad in model.gradients().values():
        assert np.all(grad == 0.0)


def test_token_gradients_finite_and_nonzero():
    model = ResidualSpeakerModule(small_config())
    model.forward(random_frames(6))
    model.backward(np.random.default_rng(4).normal(size=8))
    for i in range(3):
        grad = model.params[f"rrl.{i}.tokens"].grad
        assert np.all(np.isfinite(grad))
        assert np.any(grad != 0.0)


@pytest.mark.parametrize("mode", ["per_layer", "verbatim_algorithm", "none"])
def test_speaker_vector_gradient_matches_finite_differences(mode):
    model = ResidualSpeakerModule(small_config(residual_mode=mode))
    frames = random_frames(3, seed=2)
    rng = np.random.default_rng(9)
    g_embedding, g_speaker = rng.normal(size=8), rng.normal(size=8)

    _, tape = model.forward_with_tape(frames)
    model.zero_grad()
    model.backward_from_tape(tape, g_embedding, g_speaker)

    def objective(_):
        out = model.forward_with_tape(frames)[0]
        return float(out.embedding @ g_embedding + out.speaker_vector @ g_speaker)

    for name in ("encoder.conv1.weight", "encoder.fc2.weight", "rrl.down"):
        param = model.params[name]
        numeric = finite_diff_gradient(objective, param)
        assert relative_error(param.grad, numeric) <= 1e-4, name


def test_speaker_gradient_shape_checked():
    model = ResidualSpeakerModule(small_config())
    _, tape = model.forward_with_tape(random_frames(3))
    with pytest.raises(ShapeError):
        model.backward_from_tape(tape, np.ones(8), np.ones(5))


def test_gradcheck_default_small_instance():
    report = run_gradcheck(small_config(), num_frames=3, seed=11)
    assert [m.residual_mode for m in report.modes] == ["per_layer", "verbatim_algorithm", "none"]
    assert report.passed, report.to_dict()


@pytest.mark.parametrize(
    "d_s,alpha,n_tokens,n_layers",
    [(8, 2, 2, 1), (12, 3, 5, 2), (16, 4, 8, 4), (16, 2, 3, 3)],
)
def test_gradcheck_shape_sweep(d_s, alpha, n_tokens, n_layers):
    cfg = small_config(d_s=d_s, alpha=alpha, n_tokens=n_tokens, n_layers=n_layers)
    assert run_gradcheck(cfg, num_frames=3, seed=d_s + n_layers).passed


def test_gradcheck_detects_corrupted_backward(monkeypatch):
    original = rsm_core._rrl_backward

    def corrupted(grad_e, layer, tape, divisor):
        g_query, grads = original(grad_e, layer, tape, divisor)
        grads["w_o"] = grads["w_o"] * 1.1
        return g_query, grads

    monkeypatch.setattr(rsm_core, "_rrl_backward", corrupted)
    report = run_gradcheck(small_config(), num_frames=3, seed=11)
    assert not report.passed
    failing = {c.name for m in report.modes for c in m.checks if not c.passed}
    assert "rrl.0.w_o" in failing


def test_gradcheck_rejects_large_model():
    with pytest.raises(ConfigError):
        run_gradcheck(small_config(d_s=32))


# =====================
# Checkpoint
# =====================


def test_checkpoint_roundtrip(tmp_path):
    model = ResidualSpeakerModule(small_config(residual_mode="none"))
    model.training_step = 17
    path = save_checkpoint(tmp_path / "m.rsmc", model, extra={"note": "x"})
    loaded, manifest = load_checkpoint(path)
    assert manifest["residual_mode"] == "none"
    assert manifest["training_step"] == 17
    assert manifest["extra"] == {"note": "x"}
    assert loaded.config == model.config
    frames = random_frames(7)
    np.testing.assert_array_equal(loaded.forward(frames).embedding, model.forward(frames).embedding)


def test_checkpoint_bytes_deterministic():
    a = checkpoint_bytes(ResidualSpeakerModule(small_config()))
    b = checkpoint_bytes(ResidualSpeakerModule(small_config()))
    assert a == b


def test_checkpoint_parameter_order():
    model = ResidualSpeakerModule(small_config(n_layers=2))
    names = list(model.params)
    assert names[0] == "encoder.conv1.weight"
    assert names.index("rrl.down") < names.index("rrl.0.tokens") < names.index("rrl.1.tokens")


def test_truncated_checkpoint_raises(tmp_path):
    path = save_checkpoint(tmp_path / "m.rsmc", ResidualSpeakerModule(small_config()))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_foreign_file_raises(tmp_path):
    path = tmp_path / "x.rsmc"
    path.write_bytes(b'{"format": "MELF"}\n')
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
