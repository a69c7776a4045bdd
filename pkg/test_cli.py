"""
Test CLI - Comandi end-to-end su corpus e modelli minuscoli.
"""

import json

import numpy as np
import pandas as pd
import pytest

import main
import rsm_core
from control import recompose
from features import read_melf
from rsm_core import load_checkpoint
from storage import read_matrix_csv, sha256_file

TINY_CONFIG = {
    "seed": 1234,
    "heldout_per_speaker": 2,
    "unseen_speakers": 2,
    "mel": {"mel_bins": 16},
    "model": {
        "d_s": 8, "alpha": 2, "n_tokens": 4, "n_layers": 2, "mel_bins": 16,
        "conv_channels": [2, 3], "kernel_size": 5, "stride": 2, "hidden_dim": 8,
    },
    "train": {
        "batch_size": 4, "segment_frames": 12, "max_steps": 3,
        "num_speakers": 3, "utterances_per_speaker": 2,
        "min_duration": 0.3, "max_duration": 0.4, "log_every": 1,
    },
}


def write_config(path, **overrides):
    data = json.loads(json.dumps(TINY_CONFIG))
    for key, value in overrides.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus sintetico + checkpoint allenato, condivisi dai test."""
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root / "tiny.json")
    assert main.main(["--config", config, "--out", str(root / "corpus"), "gen-corpus"]) == 0
    assert main.main(["--config", config, "--out", str(root / "train"), "train"]) == 0
    return root, config


# =====================
# extract
# =====================


def test_extract_directory_and_rerun_identical(workspace, tmp_path):
    root, config = workspace
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main.main(["extract", str(root / "corpus"), "--config", config, "--out", str(out_a)]) == 0
    assert main.main(["extract", str(root / "corpus"), "--config", config, "--out", str(out_b)]) == 0

    files = sorted(p.relative_to(out_a) for p in out_a.rglob("*.melf"))
    assert len(files) == 6
    for relative in files:
        assert (out_a / relative).read_bytes() == (out_b / relative).read_bytes()
    assert read_melf(out_a / files[0]).num_bins == 16


def test_extract_single_file_to_melf_path(workspace, tmp_path):
    root, _ = workspace
    wav = sorted((root / "corpus").rglob("*.wav"))[0]
    target = tmp_path / "one.melf"
    assert main.main(["extract", str(wav), "--out", str(target)]) == 0
    assert read_melf(target).num_bins == 80


def test_extract_empty_directory_fails(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main.main(["extract", str(empty), "--out", str(tmp_path / "out")]) == 1


def test_extract_invalid_file_reported(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    (src / "broken.wav").write_bytes(b"RIFF????")
    assert main.main(["extract", str(src), "--out", str(tmp_path / "out")]) == 1


# =====================
# train
# =====================


def test_train_outputs(workspace):
    root, _ = workspace
    train_dir = root / "train"
    assert (train_dir / "checkpoint.rsmc").is_file()
    records = [json.loads(line) for line in (train_dir / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [1, 2, 3]
    evaluation = json.loads((train_dir / "evaluation.json").read_text())
    assert 0.0 <= evaluation["accuracy"] <= 1.0


def test_train_checkpoint_hash_is_reproducible(workspace, tmp_path):
    root, config = workspace
    assert main.main(["--config", config, "--out", str(tmp_path), "train"]) == 0
    assert sha256_file(tmp_path / "checkpoint.rsmc") == sha256_file(root / "train" / "checkpoint.rsmc")


def test_train_ablation_mode_recorded(tmp_path):
    config = write_config(tmp_path / "p02.json", model={"residual_mode": "none"})
    assert main.main(["--config", config, "--out", str(tmp_path / "run"), "train"]) == 0
    _, manifest = load_checkpoint(tmp_path / "run" / "checkpoint.rsmc")
    assert manifest["residual_mode"] == "none"


def test_train_defaults_to_shipped_config():
    assert main.resolve_config_path("train", None) == str(main.DEFAULT_TRAIN_CONFIG)
    assert main.resolve_config_path("train", "mine.json") == "mine.json"
    assert main.resolve_config_path("weights", None) is None
    run_cfg = main.load_run_config(main.resolve_config_path("train", None), None)
    assert (run_cfg.model.d_s, run_cfg.model.n_tokens, run_cfg.model.n_layers) == (64, 16, 4)
    assert run_cfg.train.max_steps == 2000


def test_train_missing_corpus_is_config_error(tmp_path):
    config = write_config(tmp_path / "c.json", corpus_dir=str(tmp_path / "missing"))
    assert main.main(["--config", config, "--out", str(tmp_path / "run"), "train"]) == 2


def test_unknown_config_key_is_config_error(tmp_path):
    config = write_config(tmp_path / "c.json", model={"n_heads": 4})
    assert main.main(["--config", config, "--out", str(tmp_path / "run"), "train"]) == 2


def test_train_from_saved_corpus(workspace, tmp_path):
    root, _ = workspace
    config = write_config(tmp_path / "c.json", corpus_dir=str(root / "corpus"), heldout_per_speaker=0)
    assert main.main(["--config", config, "--out", str(tmp_path / "run"), "train"]) == 0
    assert not (tmp_path / "run" / "evaluation.json").exists()


# =====================
# weights / edit
# =====================


def test_weights_csv(workspace, tmp_path):
    root, _ = workspace
    wavs = sorted((root / "corpus").rglob("*.wav"))[:2]
    checkpoint = str(root / "train" / "checkpoint.rsmc")
    assert main.main(["weights", "--checkpoint", checkpoint, *map(str, wavs), "--json", "--out", str(tmp_path)]) == 0

    weights = read_matrix_csv(tmp_path / f"{wavs[0].stem}.csv")
    assert weights.shape == (2, 4)
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-6)
    similarity = pd.read_csv(tmp_path / "similarity.csv", index_col=0)
    assert similarity.shape == (2, 2)
    assert (tmp_path / f"{wavs[0].stem}.weights").is_file()


def test_weights_same_speaker_pair_at_least_cross_speaker(workspace, tmp_path):
    root, _ = workspace
    wavs = sorted((root / "corpus").rglob("*.wav"))
    same_a, same_b, other = wavs[0], wavs[1], wavs[-1]
    assert same_a.parent == same_b.parent != other.parent
    checkpoint = str(root / "train" / "checkpoint.rsmc")
    assert main.main(["weights", "--checkpoint", checkpoint, str(same_a), str(same_b), str(other), "--out", str(tmp_path)]) == 0

    similarity = pd.read_csv(tmp_path / "similarity.csv", index_col=0)
    assert similarity.loc[same_a.stem, same_b.stem] >= similarity.loc[same_a.stem, other.stem]


def test_weights_mismatched_features_fail(workspace, tmp_path):
    root, _ = workspace
    wav = sorted((root / "corpus").rglob("*.wav"))[0]
    melf = tmp_path / "x.melf"
    assert main.main(["extract", str(wav), "--out", str(melf)]) == 0
    checkpoint = str(root / "train" / "checkpoint.rsmc")
    assert main.main(["weights", "--checkpoint", checkpoint, str(melf), "--out", str(tmp_path / "w.csv")]) == 1


def run_edit(root, tmp_path, edits, name="edit.json"):
    wavs = sorted((root / "corpus").rglob("*.wav"))
    src, tgt = wavs[0], wavs[-1]
    script = tmp_path / f"{name}.script"
    script.write_text(json.dumps({"version": 1, "edits": edits}))
    out = tmp_path / name
    code = main.main([
        "edit", "--checkpoint", str(root / "train" / "checkpoint.rsmc"),
        "--src", str(src), "--tgt", str(tgt), "--script", str(script), "--out", str(out),
    ])
    return code, out


def test_edit_empty_script_returns_source(workspace, tmp_path):
    root, _ = workspace
    code, out = run_edit(root, tmp_path, [])
    assert code == 0
    result = json.loads(out.read_text())
    model, _ = load_checkpoint(root / "train" / "checkpoint.rsmc")
    src_weights = np.array(result["weights"])
    np.testing.assert_allclose(result["embedding"], recompose(src_weights, model), atol=1e-12)
    provenance = json.loads(out.with_name("edit.provenance.json").read_text())
    assert provenance["distance_to_source"] == pytest.approx(0.0, abs=1e-12)
    assert set(provenance["inputs"]) == {"checkpoint", "src", "tgt", "script"}


def test_edit_replace_all_reaches_target(workspace, tmp_path):
    root, _ = workspace
    code, out = run_edit(root, tmp_path, [{"op": "replace_layer", "layer": 0}, {"op": "replace_layer", "layer": 1}])
    assert code == 0
    provenance = json.loads(out.with_name("edit.provenance.json").read_text())
    assert provenance["distance_to_target"] == pytest.approx(0.0, abs=1e-9)


def test_edit_single_layer_provenance(workspace, tmp_path):
    root, _ = workspace
    code, out = run_edit(root, tmp_path, [{"op": "replace_layer", "layer": 1}])
    assert code == 0
    per_layer = json.loads(out.with_name("edit.provenance.json").read_text())["per_layer"]
    assert per_layer[1]["distance_to_target"] == pytest.approx(0.0, abs=1e-9)
    assert per_layer[0]["distance_to_source"] == pytest.approx(0.0, abs=1e-9)


def test_edit_last_layer_moves_toward_target(workspace, tmp_path):
    root, _ = workspace
    _, baseline = run_edit(root, tmp_path, [], name="baseline.json")
    code, edited = run_edit(root, tmp_path, [{"op": "replace_layer", "layer": 1}], name="layer.json")
    assert code == 0
    before = json.loads(baseline.with_name("baseline.provenance.json").read_text())
    after = json.loads(edited.with_name("layer.provenance.json").read_text())
    assert after["distance_to_target"] < before["distance_to_target"]


def test_edit_invalid_script_is_config_error(workspace, tmp_path):
    root, _ = workspace
    code, _ = run_edit(root, tmp_path, [{"op": "replace_layer", "layer": 7}])
    assert code == 2


# =====================
# analyze-std / evaluate
# =====================


def test_analyze_std_two_systems(workspace, tmp_path):
    root, _ = workspace
    p02 = tmp_path / "p02"
    config = write_config(tmp_path / "p02.json", model={"residual_mode": "none"})
    assert main.main(["--config", config, "--out", str(p02), "train"]) == 0

    out = tmp_path / "analysis"
    code = main.main([
        "analyze-std",
        "--checkpoint", str(root / "train" / "checkpoint.rsmc"),
        "--checkpoint", str(p02 / "checkpoint.rsmc"),
        "--corpus", str(root / "corpus"),
        "--out", str(out),
    ])
    assert code == 0
    table = pd.read_csv(out / "std_report.csv", index_col=0)
    assert list(table.columns) == ["Layer 1", "Layer 2"]
    assert len(table) == 2
    assert (table.values >= 0).all()
    reports = json.loads((out / "std_report.json").read_text())
    assert reports[0]["corpus_fingerprint"] == reports[1]["corpus_fingerprint"]


def test_analyze_std_identical_utterances_zero(workspace, tmp_path):
    root, _ = workspace
    wav = sorted((root / "corpus").rglob("*.wav"))[0]
    same = tmp_path / "same"
    same.mkdir()
    for name in ("a.wav", "b.wav", "c.wav"):
        (same / name).write_bytes(wav.read_bytes())
    out = tmp_path / "analysis"
    code = main.main([
        "analyze-std", "--checkpoint", str(root / "train" / "checkpoint.rsmc"),
        "--corpus", str(same), "--out", str(out),
    ])
    assert code == 0
    report = json.loads((out / "std_report.json").read_text())[0]
    assert report["stds"] == [0.0, 0.0]


def test_analyze_std_empty_corpus_fails(workspace, tmp_path):
    root, _ = workspace
    empty = tmp_path / "empty"
    empty.mkdir()
    code = main.main([
        "analyze-std", "--checkpoint", str(root / "train" / "checkpoint.rsmc"),
        "--corpus", str(empty), "--out", str(tmp_path / "a"),
    ])
    assert code == 1


def test_evaluate_command(workspace, tmp_path):
    root, _ = workspace
    out = tmp_path / "evaluation.json"
    code = main.main([
        "evaluate", "--checkpoint", str(root / "train" / "checkpoint.rsmc"),
        "--corpus", str(root / "corpus"), "--out", str(out),
    ])
    assert code == 0
    assert json.loads(out.read_text())["num_speakers"] == 3


# =====================
# gradcheck
# =====================


def test_gradcheck_shipped_config_passes(tmp_path):
    out = tmp_path / "gradcheck.json"
    assert main.main(["gradcheck", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert [m["residual_mode"] for m in report["modes"]] == ["per_layer", "verbatim_algorithm", "none"]
    assert report["passed"] is True


def test_gradcheck_corrupted_backward_fails(monkeypatch):
    original = rsm_core._rrl_backward

    def corrupted(grad_e, layer, tape, divisor):
        g_query, grads = original(grad_e, layer, tape, divisor)
        grads["tokens"] = grads["tokens"] * 0.5
        return g_query, grads

    monkeypatch.setattr(rsm_core, "_rrl_backward", corrupted)
    assert main.main(["gradcheck"]) == 1


def test_gradcheck_large_model_is_config_error(tmp_path):
    config = write_config(tmp_path / "big.json", model={"d_s": 32, "alpha": 4})
    assert main.main(["gradcheck", "--config", config]) == 2
