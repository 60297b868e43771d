import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from swinkoa import heads
from swinkoa import numerics as nx
from swinkoa.config import SWIN_B, TOY
from swinkoa.heads import EvaluationError, MultiHeadClassifier, SingleHeadClassifier, fuse_predictions
from swinkoa.numerics import DimensionError, Tensor


def _layer_shapes(mlp):
    return [layer.weight.shape for layer in mlp.layers]


def test_head_layer_sizes(rng):
    mh = MultiHeadClassifier(192, TOY.head_layer_sizes, rng)
    assert len(mh.heads) == 5
    assert _layer_shapes(mh.heads[0]) == [(192, 384), (384, 48), (48, 48), (48, 1)]
    assert SWIN_B.classifier_sizes() == [1024, 384, 48, 48, 1]


def test_single_head_mirrors_trunk(rng):
    sh = heads.build_classifier(TOY.replace(classifier_mode="single-head"), rng)
    assert isinstance(sh, SingleHeadClassifier)
    assert _layer_shapes(sh.mlp) == [(192, 384), (384, 48), (48, 48), (48, 5)]
    # parameter-count audit against the config formula
    cfg = TOY.replace(classifier_mode="single-head")
    sizes = cfg.classifier_sizes()
    assert sh.num_parameters() == sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def test_zero_weights_give_half_and_uniform(rng):
    mh = MultiHeadClassifier(192, TOY.head_layer_sizes, rng)
    sh = SingleHeadClassifier(192, TOY.head_layer_sizes[:-1], rng)
    for m in (mh, sh):
        for p in m.parameters():
            p.data[...] = 0.0
    f = Tensor(rng.normal(size=(3, 192)))
    assert mh.head_logit(f, 2).shape == (3,)
    np.testing.assert_array_equal(mh.head_logit(f, 2).data, 0.0)
    np.testing.assert_array_equal(mh.probabilities(mh(f).data), 0.5)
    np.testing.assert_allclose(sh.probabilities(sh(f).data), 0.2, atol=1e-7)


def test_initial_output_layer_is_zero(rng):
    mh = MultiHeadClassifier(192, TOY.head_layer_sizes, rng)
    out = mh(Tensor(rng.normal(size=(4, 192)))).data
    np.testing.assert_array_equal(out, 0.0)


def test_wrong_feature_dim(rng):
    mh = MultiHeadClassifier(192, TOY.head_layer_sizes, rng)
    with pytest.raises(DimensionError):
        mh(Tensor(np.zeros((1, 100))))


def test_fuse_predictions():
    assert fuse_predictions([0.1, 2.3, 0.5, -1.0, 0.0]) == 1
    assert fuse_predictions([0.7] * 5) == 0
    np.testing.assert_array_equal(fuse_predictions(np.array([[0, 0, 1, 0, 0], [3, 0, 0, 0, 3.0]])), [2, 0])
    with pytest.raises(EvaluationError):
        fuse_predictions([0.0, np.nan, 0.0, 0.0, 0.0])
    with pytest.raises(EvaluationError):
        fuse_predictions([0.0, 1.0])


@given(arrays(np.int32, (6, 5), elements=st.integers(-8000, 8000), unique=True))
def test_argmax_invariant_under_sigmoid(milli):
    # distinct logits in [-8, 8] at least 1e-3 apart survive float32 sigmoid rounding
    z = (milli / 1000.0).astype(np.float32)
    np.testing.assert_array_equal(fuse_predictions(z), fuse_predictions(MultiHeadClassifier.probabilities(z)))


@given(arrays(np.float32, (4, 5), elements=st.floats(-30, 30, width=32)))
def test_single_head_probabilities_sum_to_one(z):
    np.testing.assert_allclose(SingleHeadClassifier.probabilities(z).sum(axis=1), 1.0, atol=1e-6)


def test_heads_do_not_share_parameters(rng):
    mh = MultiHeadClassifier(8, (4, 1), rng)
    ids = [id(p) for h in mh.heads for p in h.parameters()]
    assert len(ids) == len(set(ids))
    f = Tensor(rng.normal(size=(2, 8)))
    for h in mh.heads:
        h.layers[-1].weight.data[...] = 1.0
    nx.backward(nx.tsum(mh.head_logit(f, 3)))
    assert all(p.grad is None for i, h in enumerate(mh.heads) if i != 3 for p in h.parameters())
