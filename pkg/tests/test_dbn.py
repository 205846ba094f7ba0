import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from adaptive_dbn.data import LabeledPatchSet
from adaptive_dbn.dbn import (
    DbnModel,
    Metrics,
    OutputHead,
    StructureEvent,
    TrainConfig,
    evaluate,
    format_ratio,
    forward,
    forward_fast,
    predict,
    propagate_layer,
    replay_structure,
    softmax,
    train_adaptive_dbn,
    train_head,
)
from adaptive_dbn.rbm import ContractError, RbmParams, hidden_conditional
from adaptive_dbn.structure import StructureThresholds


def zero_model(sizes, n_classes=2):
    layers = [RbmParams.zeros(a, b) for a, b in zip(sizes, sizes[1:])]
    return DbnModel(layers, OutputHead(np.zeros((sizes[-1], n_classes)), np.zeros(n_classes)))


def random_model(sizes, n_classes=2, seed=0):
    rng = np.random.default_rng(seed)
    layers = [RbmParams(rng.normal(size=a), rng.normal(size=b), rng.normal(size=(a, b)))
              for a, b in zip(sizes, sizes[1:])]
    return DbnModel(layers, OutputHead(rng.normal(size=(sizes[-1], n_classes)),
                                       rng.normal(size=n_classes)))


# -- propagation ------------------------------------------------------------------------------

def test_zero_layer_gives_half():
    assert np.all(propagate_layer(RbmParams.zeros(4, 3), np.ones(4)) == 0.5)


def test_propagation_is_hidden_conditional():
    p = random_model([5, 3]).layers[0]
    v = np.random.default_rng(1).random(5)
    np.testing.assert_array_equal(propagate_layer(p, v), hidden_conditional(p, v))


def test_propagation_matches_loops():
    p = random_model([4, 3], seed=2).layers[0]
    v = np.random.default_rng(3).random(4)
    np.testing.assert_allclose(propagate_layer(p, v),
                               oracles.sigmoid_layer_loops(p.W, p.c, v), atol=1e-14)


def test_two_zero_layers():
    model = zero_model([3, 4, 2])
    h = propagate_layer(model.layers[1], propagate_layer(model.layers[0], [1.0, 0.0, 1.0]))
    assert np.all(h == 0.5)


def test_propagation_dimension_mismatch():
    with pytest.raises(ContractError):
        propagate_layer(RbmParams.zeros(4, 3), np.ones(5))


# -- softmax head -------------------------------------------------------------------------------

def test_equal_logits_give_uniform_output():
    np.testing.assert_array_equal(forward(zero_model([3, 2]), np.ones(3)), [0.5, 0.5])


def test_softmax_shift_invariance():
    z = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(softmax(z + 123.4), softmax(z), atol=1e-12)


def test_softmax_log_ratio_example():
    np.testing.assert_allclose(softmax([math.log(1), math.log(2), math.log(3)]),
                               [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_survives_huge_logits():
    out = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(out)) and out[0] == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_forward_is_probability_vector(seed):
    model = random_model([6, 4, 3], n_classes=3, seed=seed % 1000)
    v = np.random.default_rng(seed).random((5, 6))
    out = forward(model, v)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_forward_fast_matches_forward():
    model = random_model([6, 4, 3], seed=5)
    v = np.random.default_rng(0).random(6)
    np.testing.assert_allclose(forward_fast(model, v), forward(model, v), atol=1e-15)


def test_model_dimension_chain_is_checked():
    with pytest.raises(ContractError):
        DbnModel([RbmParams.zeros(4, 3), RbmParams.zeros(2, 2)],
                 OutputHead(np.zeros((2, 2)), np.zeros(2)))
    with pytest.raises(ContractError):
        DbnModel([RbmParams.zeros(4, 3)], OutputHead(np.zeros((2, 2)), np.zeros(2)))
    with pytest.raises(ContractError):
        OutputHead(np.zeros((3, 1)), np.zeros(1))


# -- structure log -------------------------------------------------------------------------------

def test_event_line_round_trip():
    ev = StructureEvent("annihilate", 1, 7, 12, (3, 9), note="x")
    assert StructureEvent.from_line(ev.to_line()) == ev
    add = StructureEvent("layer-add", 0, 0, 16, input_dim=1024)
    assert StructureEvent.from_line(add.to_line()) == add


def test_replay_detects_inconsistency():
    events = [StructureEvent("layer-add", 0, 0, 4, input_dim=9),
              StructureEvent("generate", 0, 2, 5, (1,)),
              StructureEvent("annihilate", 0, 3, 3, (0, 2))]
    assert replay_structure(events) == (9, [3])
    with pytest.raises(ValueError):
        replay_structure(events[:1] + [StructureEvent("generate", 0, 2, 7, (1,))])


# -- adaptive training ------------------------------------------------------------------------------

def separable_set(n=200, seed=0):
    """Two classes that differ in which half of the inputs is bright."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    bright = np.where(labels[:, None] == 1, np.r_[np.full(8, 0.8), np.full(8, 0.2)],
                      np.r_[np.full(8, 0.2), np.full(8, 0.8)])
    return LabeledPatchSet(np.clip(bright + rng.normal(0, 0.1, (n, 16)), 0, 1), labels)


SMALL = TrainConfig(initial_hidden=8, max_epochs_per_layer=8, batch_size=10, head_epochs=30,
                    smoothing_window=20, seed=0)


def test_separable_set_needs_one_layer():
    data = separable_set()
    assert oracles.logistic_regression_accuracy(data.features, data.labels) >= 0.99
    model = train_adaptive_dbn(data, SMALL, StructureThresholds(max_layers=1))
    assert len(model.layers) == 1
    assert evaluate(model, data).accuracy >= 0.99


def test_zero_layer_thresholds_stack_to_the_limit():
    thresholds = StructureThresholds(layer_wd=0.0, layer_energy=0.0, max_layers=3)
    model = train_adaptive_dbn(separable_set(), SMALL, thresholds)
    assert len(model.layers) == 3


def test_training_is_deterministic():
    a = train_adaptive_dbn(separable_set(), SMALL, StructureThresholds(max_layers=2))
    b = train_adaptive_dbn(separable_set(), SMALL, StructureThresholds(max_layers=2))
    assert [e.to_line() for e in a.structure_log] == [e.to_line() for e in b.structure_log]
    assert all(x.equals(y) for x, y in zip(a.layers, b.layers))


def test_structure_log_replays_to_final_sizes():
    thresholds = StructureThresholds(generation=1e-3, annihilation=1e-3, max_layers=2)
    model = train_adaptive_dbn(separable_set(), SMALL, thresholds)
    assert replay_structure(model.structure_log) == (model.input_dim, model.hidden_sizes)
    assert any(e.kind in ("generate", "annihilate") for e in model.structure_log)


def test_exhausted_budget_is_flagged():
    config = replace(SMALL, max_epochs_per_layer=2, wd_floor=0.0)
    model = train_adaptive_dbn(separable_set(), config, StructureThresholds(max_layers=1))
    assert model.structure_log[-1].kind == "warning"


def test_empty_training_data():
    with pytest.raises(ValueError):
        train_adaptive_dbn(LabeledPatchSet(np.zeros((0, 4)), []), SMALL)


def test_head_training_reduces_cross_entropy():
    data = separable_set()
    features = hidden_conditional(RbmParams.random(16, 6, np.random.default_rng(0), std=0.5),
                                  data.features)
    _, losses = train_head(features, data.labels, 2, replace(SMALL, head_epochs=10),
                           np.random.default_rng(0))
    assert np.all(np.diff(losses) < 0)


# -- evaluation -------------------------------------------------------------------------------------

def test_constant_classifier_scores_half():
    model = DbnModel([RbmParams.zeros(4, 2)], OutputHead(np.zeros((2, 2)), np.array([1.0, 0.0])))
    data = LabeledPatchSet(np.zeros((10, 4)), np.arange(10) % 2)
    m = evaluate(model, data)
    assert m.accuracy == 0.5
    assert m.confusion.sum() == 10
    assert list(m.class_incorrect()) == [0, 5]


def test_memorised_set_scores_full_marks():
    data = separable_set(40)
    model = DbnModel([RbmParams(np.zeros(16), np.zeros(1),
                                np.r_[np.full(8, 10.0), np.full(8, -10.0)][:, None])],
                     OutputHead(np.array([[-20.0, 20.0]]), np.array([10.0, -10.0])))
    m = evaluate(model, data)
    assert m.accuracy == 1.0 and not m.class_incorrect().any()


def test_labels_out_of_range():
    data = LabeledPatchSet(np.zeros((2, 3)), [0, 2], n_classes=3)
    with pytest.raises(ValueError):
        evaluate(zero_model([3, 2]), data)


def test_ratio_format():
    assert format_ratio(64, 1834) == "96.5% (64/1834)"
    table = Metrics(np.array([[5, 1], [0, 4]])).table(["plain", "cracked"]).splitlines()
    assert table[0].split() == ["plain", "83.3%", "(1/6)"]
    assert table[-1].split() == ["overall", "90.0%", "(1/10)"]


def test_predict_returns_argmax():
    model = random_model([5, 3], seed=8)
    v = np.random.default_rng(1).random((7, 5))
    np.testing.assert_array_equal(predict(model, v), np.argmax(forward(model, v), axis=1))
