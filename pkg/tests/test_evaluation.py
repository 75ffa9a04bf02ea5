"""AUC against a brute-force oracle plus the evaluation drivers."""

import json

import numpy as np
import pytest

from novelty_ae.checkpoint import checkpoint_name, save_checkpoint
from novelty_ae.evaluation import (EvalError, EvalResult, RESULT_COLUMNS,
                                   ablation_driver, adversarial_harness, auc,
                                   evaluate_split, load_trained_model,
                                   make_adversarial_surrogate, registry_key,
                                   resolve_model, score_split,
                                   write_results_json, write_results_tsv)


def brute_force_auc(scores_in, scores_out):
    """O(n*m) pairwise definition, the oracle the fast path must match."""
    total = 0.0
    for o in scores_out:
        for i in scores_in:
            if o > i:
                total += 1.0
            elif o == i:
                total += 0.5
    return total / (len(scores_in) * len(scores_out))


# -- AUC ---------------------------------------------------------------------

def test_auc_matches_brute_force_on_tie_heavy_random_sets():
    rng = np.random.default_rng(42)
    for trial in range(200):
        n = int(rng.integers(1, 101))
        m = int(rng.integers(1, 101))
        # coarse integer grid forces plenty of exact ties
        s_in = rng.integers(0, 12, size=n).astype(np.float64)
        s_out = rng.integers(0, 12, size=m).astype(np.float64)
        fast = auc(s_in, s_out)
        slow = brute_force_auc(s_in.tolist(), s_out.tolist())
        assert fast == slow, f"trial {trial}: {fast} != {slow}"


def test_auc_perfect_separation():
    assert auc([0.0, 0.1], [1.0, 2.0]) == 1.0
    assert auc([1.0, 2.0], [0.0, 0.1]) == 0.0


def test_auc_identical_distributions_is_half():
    assert auc([3.0, 3.0], [3.0, 3.0]) == 0.5


def test_auc_single_pair_tie():
    assert auc([1.0], [1.0]) == 0.5


def test_auc_rejects_empty_or_nonfinite():
    with pytest.raises(EvalError):
        auc([], [1.0])
    with pytest.raises(EvalError):
        auc([1.0], [])
    with pytest.raises(EvalError):
        auc([np.nan], [1.0])
    with pytest.raises(EvalError):
        auc([1.0], [np.inf])


def test_auc_unordered_input():
    rng = np.random.default_rng(1)
    s_in = rng.standard_normal(50)
    s_out = rng.standard_normal(60)
    assert auc(s_in, s_out) == auc(np.sort(s_in), s_out)


# -- model registry ------------------------------------------------------------

def test_registry_key_layout():
    assert registry_key("digits_idx", 3) == "model_digits_idx_3"


def test_resolve_model_lists_available_runs(tmp_path):
    good = tmp_path / "model_digits_idx_0"
    good.mkdir()
    # a completed checkpoint makes the run discoverable
    from test_checkpoint import _payload
    payload, _ = _payload()
    save_checkpoint(good / checkpoint_name(10), **payload)
    (tmp_path / "model_digits_idx_9").mkdir()  # no checkpoint: not listed

    assert resolve_model(tmp_path, "digits_idx", 0) == good
    with pytest.raises(EvalError) as err:
        resolve_model(tmp_path, "digits_idx", 5)
    assert "model_digits_idx_0" in str(err.value)
    assert "model_digits_idx_9" not in str(err.value)


def test_load_trained_model_restores_weights(tmp_path):
    from test_checkpoint import _payload
    payload, model = _payload(iteration=77)
    run = tmp_path / "run"
    run.mkdir()
    save_checkpoint(run / checkpoint_name(77), **payload)
    loaded, config = load_trained_model(run)
    assert loaded.trained_iterations == 77
    assert not loaded.training
    assert config.to_dict() == payload["config_dict"]
    for key, tensor in model.state_dict().items():
        if key == "iteration":
            continue  # rewritten to the checkpoint's step on load
        got = dict(loaded.state_dict())[key]
        assert np.array_equal(got.numpy(), tensor.detach().numpy())


def test_load_trained_model_requires_checkpoint(tmp_path):
    with pytest.raises(EvalError):
        load_trained_model(tmp_path)


# -- surrogate perturbations ------------------------------------------------------

def test_surrogate_stays_in_ball_and_range():
    rng = np.random.default_rng(3)
    images = rng.uniform(-1, 1, size=(10, 32, 32, 1)).astype(np.float32)
    out = make_adversarial_surrogate(images, 0.1, np.random.default_rng(0))
    assert np.all(np.abs(out - images) <= 0.1 + 1e-6)
    assert out.min() >= -1.0 and out.max() <= 1.0
    assert out.dtype == np.float32


def test_surrogate_epsilon_zero_is_identity():
    images = np.zeros((2, 32, 32, 1), dtype=np.float32)
    out = make_adversarial_surrogate(images, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out, images)
    with pytest.raises(EvalError):
        make_adversarial_surrogate(images, -0.5, np.random.default_rng(0))


# -- drivers over a synthetic split -------------------------------------------------

@pytest.fixture()
def synthetic_split():
    from novelty_ae.data import LabeledImages, make_split
    rng = np.random.default_rng(11)
    n = 40
    pixels = rng.uniform(-1, 1, size=(n, 32, 32, 1)).astype(np.float32)
    labels = np.repeat([0, 1], n // 2).astype(np.int64)
    collection = LabeledImages(pixels=pixels, labels=labels, test_mask=None,
                               source="synthetic")
    return make_split(collection, known_class=0, protocol="A", seed=0)


def test_evaluate_split_produces_result(tiny_model, synthetic_split):
    from novelty_ae.config import desk_preset
    cfg = desk_preset(base_width=2, d_z=6, channels=1, seed=3)
    result = evaluate_split(tiny_model, synthetic_split, cfg, "sa", 4,
                            dataset_name="synthetic")
    assert isinstance(result, EvalResult)
    assert 0.0 <= result.auc <= 1.0
    assert result.n_in == synthetic_split.test_in.shape[0]
    assert result.n_out == synthetic_split.test_out.shape[0]
    assert result.method == "sa" and result.level == 4
    assert len(result.row()) == len(RESULT_COLUMNS)


def test_score_split_labels_sides(tiny_model, synthetic_split):
    from novelty_ae.config import desk_preset
    cfg = desk_preset(base_width=2, d_z=6, channels=1, seed=3)
    recs_in, recs_out = score_split(tiny_model, synthetic_split, cfg)
    assert {r.label for r in recs_in} == {"in"}
    assert {r.label for r in recs_out} == {"out"}
    assert len(recs_in) == synthetic_split.test_in.shape[0]


def test_adversarial_harness_monotone_epsilons(tiny_model, synthetic_split):
    from novelty_ae.config import desk_preset
    cfg = desk_preset(base_width=2, d_z=6, channels=1, seed=3)
    rows = adversarial_harness(tiny_model, synthetic_split, cfg,
                               epsilons=[0.0, 0.05], seed=0)
    assert [eps for eps, _ in rows] == [0.0, 0.05]
    for _eps, value in rows:
        assert 0.0 <= value <= 1.0


def test_adversarial_harness_is_seed_deterministic(tiny_model, synthetic_split):
    from novelty_ae.config import desk_preset
    cfg = desk_preset(base_width=2, d_z=6, channels=1, seed=3)
    a = adversarial_harness(tiny_model, synthetic_split, cfg, [0.1], seed=5)
    b = adversarial_harness(tiny_model, synthetic_split, cfg, [0.1], seed=5)
    assert a == b
    # different seeds draw different noise (AUC itself may still coincide
    # on a tiny split, so compare the perturbations directly)
    n5 = make_adversarial_surrogate(synthetic_split.test_in, 0.1,
                                    np.random.default_rng(5))
    n6 = make_adversarial_surrogate(synthetic_split.test_in, 0.1,
                                    np.random.default_rng(6))
    assert not np.array_equal(n5, n6)


# -- result writers -------------------------------------------------------------------

def _fake_results():
    return [EvalResult("digits", 0, "A", "sa", 4, 0.875, 10, 10, 100, "abc123"),
            EvalResult("digits", 1, "A", "sa", 4, 0.9375, 12, 10, 100, "abc123")]


def test_write_results_tsv(tmp_path):
    path = tmp_path / "results.tsv"
    write_results_tsv(_fake_results(), path)
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == RESULT_COLUMNS
    assert len(lines) == 3
    assert float(lines[1].split("\t")[5]) == 0.875


def test_write_results_json_includes_mean(tmp_path):
    path = tmp_path / "results.json"
    write_results_json(_fake_results(), path)
    blob = json.loads(path.read_text())
    assert blob["mean_auc"] == pytest.approx((0.875 + 0.9375) / 2)
    assert len(blob["results"]) == 2
    assert blob["results"][0]["auc"] == 0.875
