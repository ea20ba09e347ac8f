from __future__ import annotations

import numpy as np
import pytest

from rankseg.errors import ConfigError, DivergenceError
from rankseg.head import SelectionMode, complete_selection, predicted_ids, top_k_select
from rankseg.metrics import ConfusionMatrix
from rankseg.model import ModelRole, load_bundle, model_stats, save_bundle
from rankseg.synth import Dataset
from rankseg.tensor import no_tape, precision
from rankseg.train import EvalSelection, evaluate, train, training_selection


def _state(result) -> dict[str, np.ndarray]:
    return {
        f"{model.role.value}/{name}": array
        for model in result.bundle.models()
        for name, array in model.registry.state_dict().items()
    }


def test_training_is_deterministic(tiny_config, tiny_data) -> None:
    train_data, _ = tiny_data
    first = train(tiny_config(), train_data)
    second = train(tiny_config(), train_data)
    assert [r.total for r in first.steps] == [r.total for r in second.steps]
    for name, array in _state(first).items():
        np.testing.assert_array_equal(array, _state(second)[name])


def test_step_loss_decomposes_into_weighted_terms(tiny_config, tiny_data) -> None:
    config = tiny_config(loss__ml_weight=3.0, loss__seg_weight=0.5)
    result = train(config, tiny_data[0])
    assert len(result.steps) == 4
    for record in result.steps:
        assert record.total == pytest.approx(0.5 * record.seg + 3.0 * record.ml, abs=1e-12)
        assert record.ml > 0.0
    assert [epoch.epoch for epoch in result.epochs] == [1, 2]


def test_baseline_never_calls_the_multilabel_head(tiny_config, tiny_data) -> None:
    result = train(tiny_config(run__mode="baseline"), tiny_data[0])
    assert result.multilabel_calls == 0
    assert all(record.ml == 0.0 for record in result.steps)
    assert result.trained_ranks == 8
    assert result.tau_spearman() is None


def test_zero_epochs_returns_the_initial_model(tiny_config, tiny_data) -> None:
    train_data, test_data = tiny_data
    result = train(tiny_config(train__epochs=0), train_data)
    assert result.steps == [] and result.epochs == []
    log_inverse_tau = result.bundle.segmenter.temps.log_inverse_tau.data
    np.testing.assert_allclose(np.exp(log_inverse_tau), 10.0)
    evaluation = evaluate(result.bundle, test_data)
    assert 0.0 <= evaluation.miou <= 1.0


def test_training_rejects_mismatched_datasets(tiny_config) -> None:
    with pytest.raises(ConfigError, match="classes"):
        train(tiny_config(), Dataset(num_classes=5))


def test_non_finite_inputs_abort_with_divergence(tiny_config, tiny_data) -> None:
    train_data, _ = tiny_data
    broken = Dataset(train_data.num_classes, list(train_data.samples))
    for sample in broken.samples:
        sample.image = np.full_like(sample.image, np.nan)
    with pytest.raises(DivergenceError) as info:
        train(tiny_config(), broken)
    assert info.value.step == 0


def test_evaluation_kappa_can_differ_from_training(tiny_config, tiny_data) -> None:
    train_data, test_data = tiny_data
    bundle = train(tiny_config(), train_data).bundle
    for kappa in (1, 3, 5):
        evaluation = evaluate(bundle, test_data, kappa=kappa)
        assert evaluation.selection_stats["mean_kappa"] == kappa
        assert evaluation.kappa == kappa
        assert evaluation.mode == "fixed"
    with pytest.raises(ConfigError, match="kappa"):
        evaluate(bundle, test_data, kappa=9)


def test_dynamic_evaluation_records_no_kappa(tiny_config, tiny_data) -> None:
    train_data, test_data = tiny_data
    bundle = train(tiny_config(), train_data).bundle
    evaluation = evaluate(bundle, test_data, mode="dynamic", threshold=0.5)
    assert evaluation.mode == SelectionMode.DYNAMIC_THRESHOLD.value
    assert evaluation.kappa is None
    assert 1.0 <= evaluation.selection_stats["mean_kappa"] <= 8.0


def test_complete_evaluation_never_excludes_pixels(tiny_config, tiny_data) -> None:
    train_data, test_data = tiny_data
    bundle = train(tiny_config(), train_data).bundle
    evaluation = evaluate(bundle, test_data, selection=EvalSelection.COMPLETE)
    assert evaluation.excluded_pixels == 0
    assert evaluation.selection_stats["mean_kappa"] == 8.0
    assert evaluation.selection_stats["label_recall"] == 1.0


@pytest.mark.parametrize(
    ("mode", "shared", "eval_kappa", "has_map"),
    [
        ("baseline", True, 8.0, False),
        ("mt", True, 8.0, True),
        ("mt_ls", True, 3.0, True),
        ("mt_ls_ra", False, 3.0, True),
    ],
)
def test_mode_ladder(tiny_config, tiny_data, mode, shared, eval_kappa, has_map) -> None:
    train_data, test_data = tiny_data
    result = train(tiny_config(run__mode=mode), train_data)
    assert result.bundle.segmenter.temps.shared is shared
    evaluation = evaluate(result.bundle, test_data)
    assert evaluation.selection_stats["mean_kappa"] == eval_kappa
    assert (evaluation.map is not None) is has_map
    assert (result.multilabel_calls > 0) is has_map


def test_rank_adaptive_run_reports_rank_correlation(tiny_config, tiny_data) -> None:
    result = train(tiny_config(), tiny_data[0])
    assert result.trained_ranks == 3
    correlation = result.tau_spearman()
    assert correlation is None or -1.0 <= correlation <= 1.0


@pytest.mark.parametrize("variant", ["gap_linear", "tranenc1", "trandec2"])
def test_every_head_variant_trains(tiny_config, tiny_data, variant) -> None:
    result = train(tiny_config(model__head_variant=variant), tiny_data[0])
    assert len(result.bundle.segmenter.ml_head.layers) == {
        "gap_linear": 0,
        "tranenc1": 1,
        "trandec2": 2,
    }[variant]
    assert np.isfinite(result.steps[-1].total)


def test_refined_category_embeddings_feed_the_pixel_classifier(tiny_config, tiny_data) -> None:
    train_data, test_data = tiny_data
    result = train(tiny_config(model__category_source="refined"), train_data)
    assert 0.0 <= evaluate(result.bundle, test_data).miou <= 1.0


def test_independent_scheme_trains_a_separate_labeler(tiny_config, tiny_data) -> None:
    train_data, test_data = tiny_data
    config = tiny_config(run__scheme="independent", train__ml_epochs=1)
    result = train(config, train_data)
    bundle = result.bundle
    assert bundle.labeler.role is ModelRole.MULTILABEL
    assert bundle.segmenter.role is ModelRole.SEGMENTATION
    assert bundle.segmenter.ml_head is None
    assert len(result.labeler_epochs) == 1
    assert len(result.labeler_steps) == 2
    assert all(record.ml == 0.0 for record in result.steps)
    assert result.multilabel_calls > 0
    evaluation = evaluate(bundle, test_data)
    assert evaluation.map is not None
    assert evaluation.selection_stats["mean_kappa"] == 3.0


def test_training_oracle_selects_exactly_the_present_classes(tiny_config, tiny_data) -> None:
    train_data, test_data = tiny_data
    result = train(tiny_config(run__oracle="gt_train_eval"), train_data)
    evaluation = evaluate(result.bundle, test_data)
    assert evaluation.selection is EvalSelection.ORACLE
    assert evaluation.excluded_pixels == 0
    assert evaluation.selection_stats["label_precision"] == 1.0
    assert evaluation.selection_stats["label_recall"] == 1.0


def test_eval_oracle_uses_predictions_while_training(tiny_config, tiny_data) -> None:
    train_data, test_data = tiny_data
    config = tiny_config(run__oracle="gt_eval")
    result = train(config, train_data)
    assert result.trained_ranks == 3
    assert evaluate(result.bundle, test_data).selection is EvalSelection.ORACLE
    predicted = evaluate(result.bundle, test_data, selection="predicted")
    assert predicted.selection_stats["mean_kappa"] == 3.0


def test_training_selection_needs_predictions_for_selection_modes(tiny_config) -> None:
    target = np.array([1, 0, 1, 0, 0, 0, 0, 0])
    with pytest.raises(ConfigError, match="multi-label"):
        training_selection(tiny_config(), None, target)
    assert training_selection(tiny_config(run__mode="mt"), None, target).size == 8
    oracle = training_selection(tiny_config(run__oracle="gt_train_eval"), None, target)
    assert oracle.indices == (0, 2)


def test_periodic_evaluation_fills_the_curves(tiny_config, tiny_data) -> None:
    train_data, test_data = tiny_data
    result = train(tiny_config(train__eval_every=1), train_data, test_data)
    assert all(epoch.miou is not None and epoch.map is not None for epoch in result.epochs)


def test_saved_models_reload_bit_exact(tiny_config, tiny_data, tmp_path) -> None:
    train_data, test_data = tiny_data
    result = train(tiny_config(run__scheme="independent", train__ml_epochs=1), train_data)
    path = save_bundle(tmp_path / "model.npz", result.bundle)
    loaded = load_bundle(path)
    assert loaded.config == result.bundle.config
    for original, copy in zip(result.bundle.models(), loaded.models(), strict=True):
        assert original.role is copy.role
        for name, array in original.registry.state_dict().items():
            np.testing.assert_array_equal(copy.registry[name].data, array)
    assert evaluate(loaded, test_data).miou == evaluate(result.bundle, test_data).miou
    with pytest.raises(ConfigError, match="not found"):
        load_bundle(tmp_path / "missing.npz")


def test_model_stats_do_not_count_as_head_calls(tiny_config, tiny_data) -> None:
    result = train(tiny_config(), tiny_data[0])
    calls = result.multilabel_calls
    stats = model_stats(result.bundle)
    assert result.multilabel_calls == calls
    assert stats["flops_per_image"] > 0
    assert stats["total"] == sum(model.registry.count() for model in result.bundle.models())


def test_shared_temperature_predictions_ignore_selection_order(tiny_config, tiny_data) -> None:
    train_data, test_data = tiny_data
    model = train(tiny_config(run__mode="mt"), train_data).bundle.segmenter
    rng = np.random.default_rng(0)
    with precision("float64"), no_tape():
        for index in range(100):
            sample = test_data.samples[index % len(test_data)]
            image = sample.image + rng.normal(0.0, 0.5, size=sample.image.shape)
            tokens = model.encode(image)
            complete = complete_selection(8)
            ranked = top_k_select(model.multilabel(tokens).probs, 8)
            shuffled = ranked.reordered(rng.permutation(8).tolist())
            expected = predicted_ids(model.classify(tokens, complete, shared=True), complete)
            for sel in (ranked, shuffled):
                z = model.classify(tokens, sel, shared=True)
                np.testing.assert_array_equal(predicted_ids(z, sel), expected)


def test_baseline_complete_evaluation_matches_full_fixed_selection(
    tiny_config, tiny_data
) -> None:
    train_data, test_data = tiny_data
    bundle = train(tiny_config(run__mode="baseline"), train_data).bundle
    model = bundle.segmenter
    evaluation = evaluate(bundle, test_data, selection="complete")
    confusion = None
    with precision("float64"), no_tape():
        for sample in test_data.samples:
            tokens = model.encode(sample.image)
            sel = top_k_select(np.zeros(8), 8)
            pred = predicted_ids(model.classify(tokens, sel, shared=True), sel)
            step = ConfusionMatrix.from_maps(pred, sample.seg_map, 8, model.ignore_index)
            confusion = step if confusion is None else confusion + step
    np.testing.assert_array_equal(confusion.counts, evaluation.confusion.counts)
