from __future__ import annotations

import numpy as np
import pytest

from rankseg.blocks import DecoderLayer, EncoderLayer, ParameterInit
from rankseg.errors import SelectionError, ShapeError
from rankseg.head import (
    CategoryTable,
    MultiLabelHead,
    MultiLabelHeadVariant,
    RankTemperatures,
    SelectionMode,
    SelectionResult,
    build_multilabel_target,
    complete_label_classify,
    complete_selection,
    initial_log_inverse_tau,
    multilabel_forward,
    pixel_index,
    predicted_ids,
    rank_adaptive_pixel_classify,
    rank_adaptive_softmax,
    top_k_select,
    upsample_tokens,
)
from rankseg.optim import ParameterGroup, ParameterRegistry
from rankseg.tensor import Tensor


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _init(seed: int = 0) -> ParameterInit:
    return ParameterInit(ParameterRegistry(), np.random.default_rng(seed), ParameterGroup.SEG_HEAD)


def _table(rng: np.random.Generator, K: int, dim: int) -> CategoryTable:  # noqa: N803
    return CategoryTable(
        w=Tensor(rng.normal(size=(K, dim))),
        h=Tensor(rng.normal(size=(K, dim))),
        bias=Tensor(rng.normal(size=K)),
    )


def test_rank_adaptive_softmax_matches_brute_force() -> None:
    rng = np.random.default_rng(0)
    for _ in range(1000):
        count = int(rng.integers(1, 6))
        logits = rng.uniform(-1.0, 1.0, size=(int(rng.integers(1, 5)), count))
        log_inverse_tau = rng.uniform(-1.0, 3.0, size=count + int(rng.integers(0, 3)))
        temps = RankTemperatures(Tensor(log_inverse_tau))
        expected = np.array(
            [
                [np.exp(row[k] * np.exp(log_inverse_tau[k])) for k in range(count)]
                for row in logits
            ]
        )
        expected /= expected.sum(axis=1, keepdims=True)
        got = rank_adaptive_softmax(Tensor(logits), temps).data
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)


def test_shared_unit_temperature_is_plain_softmax() -> None:
    rng = np.random.default_rng(1)
    logits = rng.uniform(-1.0, 1.0, size=(7, 5))
    temps = RankTemperatures(Tensor(rng.normal(size=5)), shared=True)
    temps.log_inverse_tau.data[0] = 0.0
    got = rank_adaptive_softmax(Tensor(logits), temps).data
    np.testing.assert_allclose(got, _softmax(logits), rtol=0, atol=1e-12)


def test_initial_temperatures_and_rank_scales() -> None:
    temps = RankTemperatures(Tensor(initial_log_inverse_tau(4)))
    np.testing.assert_allclose(temps.inverse_tau(), 10.0)
    assert temps.rank_scales(3).shape == (3,)
    with pytest.raises(SelectionError):
        temps.rank_scales(5)
    with pytest.raises(SelectionError):
        temps.rank_scales(0)


def test_shared_temperatures_read_only_the_first_rank() -> None:
    temps = RankTemperatures(Tensor(np.log([2.0, 5.0, 7.0])), shared=True)
    np.testing.assert_allclose(temps.rank_scales(3).data, [2.0, 2.0, 2.0])
    assert temps.as_shared().shared


def test_fixed_selection_breaks_ties_by_lower_id() -> None:
    sel = top_k_select(np.array([0.5, 0.9, 0.5, 0.1]), kappa=3)
    assert sel.indices == (1, 0, 2)
    assert sel.scores == (0.9, 0.5, 0.5)
    assert sel.mode is SelectionMode.FIXED_K


@pytest.mark.parametrize("kappa", [0, 5, None])
def test_fixed_selection_rejects_out_of_range_kappa(kappa: int | None) -> None:
    with pytest.raises(SelectionError, match="kappa"):
        top_k_select(np.array([0.1, 0.2, 0.3, 0.4]), kappa=kappa)


def test_dynamic_selection_thresholds_and_falls_back_to_the_best() -> None:
    probs = np.array([0.2, 0.7, 0.9])
    assert top_k_select(probs, mode="dynamic", threshold=0.6).indices == (2, 1)
    assert top_k_select(probs, mode="dynamic", threshold=0.95).indices == (2,)
    with pytest.raises(SelectionError, match="threshold"):
        top_k_select(probs, mode="dynamic", threshold=1.0)


def test_oracle_selection_uses_present_classes() -> None:
    probs = np.array([0.1, 0.5, 0.9])
    assert top_k_select(probs, mode="oracle", gt_target=np.array([1, 0, 1])).indices == (2, 0)
    assert top_k_select(None, mode="oracle", gt_target=np.array([0, 1, 1])).indices == (1, 2)
    with pytest.raises(SelectionError, match="at least one"):
        top_k_select(probs, mode="oracle", gt_target=np.zeros(3))
    with pytest.raises(SelectionError, match="ground-truth"):
        top_k_select(probs, mode="oracle")
    with pytest.raises(ShapeError):
        top_k_select(probs, mode="oracle", gt_target=np.ones(4))


def test_complete_selection_keeps_id_order() -> None:
    sel = top_k_select(np.array([0.1, 0.9, 0.5]), mode="complete")
    assert sel.indices == (0, 1, 2)
    assert complete_selection(3).indices == (0, 1, 2)


def test_selection_result_invariants() -> None:
    with pytest.raises(SelectionError):
        SelectionResult((), (), SelectionMode.FIXED_K)
    with pytest.raises(SelectionError):
        SelectionResult((1, 1), (0.5, 0.4), SelectionMode.FIXED_K)
    with pytest.raises(SelectionError):
        SelectionResult((0, 1), (0.4, 0.5), SelectionMode.FIXED_K)
    sel = SelectionResult((3, 0, 2), (0.9, 0.5, 0.1), SelectionMode.FIXED_K)
    moved = sel.reordered([2, 0, 1])
    assert moved.indices == (2, 3, 0)
    assert moved.scores == (0.1, 0.9, 0.5)
    with pytest.raises(SelectionError, match="permutation"):
        sel.reordered([0, 0, 1])


def test_build_multilabel_target_skips_ignored_pixels() -> None:
    seg = np.array([[0, 2], [255, 2]])
    np.testing.assert_array_equal(build_multilabel_target(seg, 4, 255), [1, 0, 1, 0])
    np.testing.assert_array_equal(build_multilabel_target(np.full((2, 2), 255), 3, 255), [0, 0, 0])
    with pytest.raises(SelectionError):
        build_multilabel_target(np.array([[4]]), 4, 255)


def test_category_table_validates_shapes() -> None:
    with pytest.raises(ShapeError):
        CategoryTable(Tensor(np.ones((1, 4))))
    with pytest.raises(ShapeError):
        CategoryTable(Tensor(np.ones((3, 4))), h=Tensor(np.ones((3, 4))))
    with pytest.raises(ShapeError):
        CategoryTable(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 5))), Tensor(np.ones(3)))
    table = CategoryTable(Tensor(np.ones((3, 4))))
    assert (table.K, table.dim, table.has_multilabel) == (3, 4, False)


def test_gap_linear_head_matches_pooled_linear_scores() -> None:
    rng = np.random.default_rng(2)
    table = _table(rng, 5, 4)
    tokens = rng.normal(size=(4, 4))
    head = MultiLabelHead(MultiLabelHeadVariant.GAP_LINEAR)
    out = head(Tensor(tokens), (2, 2), table)
    logits = table.h.data @ tokens.mean(axis=0) + table.bias.data
    np.testing.assert_allclose(out.logits.data, logits, atol=1e-12)
    np.testing.assert_allclose(out.probs.data, 1.0 / (1.0 + np.exp(-logits)), atol=1e-12)
    assert out.refined is None
    assert head.calls == 1

    probs, raw = multilabel_forward(Tensor(tokens), (2, 2), table, head)
    np.testing.assert_array_equal(probs.data, out.probs.data)
    np.testing.assert_array_equal(raw.data, out.logits.data)
    assert head.calls == 2


@pytest.mark.parametrize("variant", ["tranenc1", "trandec2"])
def test_transformer_heads_refine_category_embeddings(variant: str) -> None:
    init = _init()
    layer_type = EncoderLayer if variant == "tranenc1" else DecoderLayer
    count = 1 if variant == "tranenc1" else 2
    layers = [layer_type.create(init, f"ml{i}", dim=8, heads=2) for i in range(count)]
    head = MultiLabelHead(variant, layers, downsample_factor=2)
    table = _table(init.rng, 6, 8)
    out = head(Tensor(init.rng.normal(size=(16, 8))), (4, 4), table)
    assert out.probs.shape == (6,)
    assert out.refined.shape == (6, 8)
    assert np.all((out.probs.data > 0.0) & (out.probs.data < 1.0))


def test_head_rejects_mismatched_layers_and_tables() -> None:
    init = _init()
    encoder = EncoderLayer.create(init, "enc", dim=8, heads=2)
    with pytest.raises(ShapeError):
        MultiLabelHead("trandec2", [encoder])
    with pytest.raises(ShapeError):
        MultiLabelHead("gap_linear", [encoder])
    head = MultiLabelHead("gap_linear")
    with pytest.raises(ShapeError, match="no multi-label"):
        head(Tensor(np.ones((4, 8))), (2, 2), CategoryTable(Tensor(np.ones((3, 8)))))


def test_rank_adaptive_classifier_outputs_distributions_over_selection() -> None:
    init = _init(4)
    psi = [EncoderLayer.create(init, "psi0", dim=8, heads=2)]
    table = _table(init.rng, 6, 8)
    sel = top_k_select(np.array([0.1, 0.8, 0.3, 0.9, 0.2, 0.05]), kappa=3)
    temps = RankTemperatures(Tensor(initial_log_inverse_tau(4)))
    z, logits = rank_adaptive_pixel_classify(
        Tensor(init.rng.normal(size=(5, 8))), table, sel, temps, psi
    )
    assert z.shape == logits.shape == (5, 3)
    np.testing.assert_allclose(z.data.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.abs(logits.data) <= 1.0 + 1e-12)
    assert set(predicted_ids(z, sel)) <= {3, 1, 2}


def test_rank_adaptive_classifier_rejects_oversized_selection() -> None:
    rng = np.random.default_rng(5)
    table = _table(rng, 6, 4)
    temps = RankTemperatures(Tensor(initial_log_inverse_tau(2)))
    sel = top_k_select(rng.uniform(size=6), kappa=3)
    with pytest.raises(SelectionError, match="temperatures"):
        rank_adaptive_pixel_classify(Tensor(rng.normal(size=(2, 4))), table, sel, temps, [])


def test_complete_label_classify_equals_identity_selection() -> None:
    init = _init(6)
    psi = [EncoderLayer.create(init, "psi0", dim=8, heads=2)]
    table = _table(init.rng, 5, 8)
    tokens = Tensor(init.rng.normal(size=(4, 8)))
    temps = RankTemperatures(Tensor(init.rng.normal(size=5)))
    z, logits = complete_label_classify(tokens, table, temps, psi)
    identity = top_k_select(None, mode="complete", K=5)
    z_ref, logits_ref = rank_adaptive_pixel_classify(
        tokens, table, identity, temps.as_shared(), psi
    )
    np.testing.assert_array_equal(z.data, z_ref.data)
    np.testing.assert_array_equal(logits.data, logits_ref.data)


def test_shared_temperature_prediction_ignores_rank_order() -> None:
    init = _init(7)
    psi = [EncoderLayer.create(init, "psi0", dim=8, heads=2)]
    table = _table(init.rng, 6, 8)
    tokens = Tensor(init.rng.normal(size=(9, 8)))
    temps = RankTemperatures(Tensor(initial_log_inverse_tau(6)), shared=True)
    sel = top_k_select(init.rng.uniform(size=6), kappa=4)
    moved = sel.reordered([2, 0, 3, 1])
    z, _ = rank_adaptive_pixel_classify(tokens, table, sel, temps, psi)
    z_moved, _ = rank_adaptive_pixel_classify(tokens, table, moved, temps, psi)
    np.testing.assert_allclose(z_moved.data, z.data[:, [2, 0, 3, 1]], atol=1e-10)
    np.testing.assert_array_equal(predicted_ids(z_moved, moved), predicted_ids(z, sel))


def test_pixel_index_and_upsample_follow_the_patch_grid() -> None:
    np.testing.assert_array_equal(
        pixel_index((2, 2), 2), [0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]
    )
    z = Tensor(np.arange(4.0).reshape(4, 1))
    assert upsample_tokens(z, (2, 2), 2).shape == (16, 1)
    with pytest.raises(ShapeError):
        upsample_tokens(z, (2, 3), 2)


def _pass_through(layer: EncoderLayer | DecoderLayer) -> EncoderLayer | DecoderLayer:
    if isinstance(layer, EncoderLayer):
        silenced = [layer.attention.output, layer.mlp.output]
    else:
        silenced = [layer.self_attention.output, layer.cross_attention.output, layer.mlp.output]
    for linear in silenced:
        linear.weight.data[...] = 0.0
        linear.bias.data[...] = 0.0
    return layer


@pytest.mark.parametrize("variant", ["tranenc1", "trandec2"])
def test_pass_through_transformer_heads_score_the_raw_embeddings(variant: str) -> None:
    init = _init(11)
    layer_type = EncoderLayer if variant == "tranenc1" else DecoderLayer
    count = 1 if variant == "tranenc1" else 2
    layers = [
        _pass_through(layer_type.create(init, f"ml{i}", dim=2, heads=1)) for i in range(count)
    ]
    w = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    table = CategoryTable(
        w=Tensor(w),
        h=Tensor(np.array([[2.0, 0.0], [0.0, 1.0], [-1.0, 1.0]])),
        bias=Tensor(np.array([0.0, 0.5, -0.5])),
    )
    head = MultiLabelHead(variant, layers, downsample_factor=2)
    out = head(Tensor(init.rng.normal(size=(4, 2))), (2, 2), table)
    np.testing.assert_array_equal(out.refined.data, w)
    np.testing.assert_allclose(out.logits.data, [2.0, 2.5, -0.5], atol=1e-12)
    np.testing.assert_allclose(
        out.probs.data, [0.8807970779778823, 0.9241418199787566, 0.3775406687981454], atol=1e-9
    )


def test_complete_label_classify_on_known_embeddings() -> None:
    table = CategoryTable(Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])))
    tokens = Tensor(np.array([[2.0, 0.0], [0.0, 3.0], [0.0, -2.0]]))
    temps = RankTemperatures(Tensor(np.zeros(3)))
    z, logits = complete_label_classify(tokens, table, temps, [])
    np.testing.assert_allclose(
        logits.data, [[1.0, 0.0, -1.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]], atol=1e-12
    )
    np.testing.assert_allclose(
        z.data,
        [
            [0.6652409557748219, 0.24472847105479764, 0.09003057317038046],
            [0.21194155761708544, 0.5761168847658291, 0.21194155761708544],
            [0.4223187982515182, 0.1553624034969636, 0.4223187982515182],
        ],
        atol=1e-10,
    )


def test_rank_specific_temperatures_depend_on_rank_order() -> None:
    table = CategoryTable(Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])))
    tokens = Tensor(np.array([[1.0, 0.0]]))
    temps = RankTemperatures(Tensor(np.array([0.0, np.log(3.0)])))
    sel = top_k_select(np.array([0.9, 0.5, 0.1]), kappa=2)
    assert sel.indices == (0, 1)
    swapped = sel.reordered([1, 0])
    z, _ = rank_adaptive_pixel_classify(tokens, table, sel, temps, [])
    z_swapped, _ = rank_adaptive_pixel_classify(tokens, table, swapped, temps, [])
    np.testing.assert_allclose(z.data[0], _softmax(np.array([1.0, 0.0])), atol=1e-12)
    np.testing.assert_allclose(z_swapped.data[0], _softmax(np.array([0.0, 3.0])), atol=1e-12)
    assert not np.allclose(z_swapped.data[:, [1, 0]], z.data)
