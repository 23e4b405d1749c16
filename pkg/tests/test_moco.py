import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isoscan.moco import (DegradationEncoder, EncoderConfig, encode, info_nce, make_moco,
                          moco_train_step, momentum_update, separation)
from isoscan.optim import adam_init

SMALL = EncoderConfig(channels=4, n_blocks=2, embed_dim=8)


def test_embedding_unit_norm():
    enc = DegradationEncoder(SMALL)
    e = encode(np.random.default_rng(0).random((4, 8, 8)), enc)
    assert e.shape == (8,)
    assert abs(np.linalg.norm(e) - 1) < 1e-12


def test_encoder_rejects_tiny_input():
    with pytest.raises(ValueError):
        encode(np.zeros((2, 8, 8)), DegradationEncoder(SMALL))


def test_ema_closed_forms():
    st_ = make_moco(SMALL, momentum=0.0)
    for v in st_.query.store.params.values():
        v += 1.0
    momentum_update(st_)
    for k, v in st_.query.store.params.items():
        np.testing.assert_array_equal(st_.key.store.params[k], v)
    st1 = make_moco(SMALL, momentum=1.0)
    before = {k: v.copy() for k, v in st1.key.store.params.items()}
    for v in st1.query.store.params.values():
        v += 1.0
    momentum_update(st1)
    for k, v in before.items():
        np.testing.assert_array_equal(st1.key.store.params[k], v)


def test_ema_two_steps():
    st_ = make_moco(SMALL, momentum=0.9)
    k0 = {k: v.copy() for k, v in st_.key.store.params.items()}
    for v in st_.query.store.params.values():
        v += 1.0
    momentum_update(momentum_update(st_))
    for k, v in st_.query.store.params.items():
        np.testing.assert_allclose(st_.key.store.params[k], 0.81 * k0[k] + 0.19 * v, atol=1e-12)


def test_info_nce_identical_embeddings():
    e = np.tile([[0.0, 1.0]], (6, 1))
    assert abs(info_nce(e, e, 0.07)[0] - 6 * math.log(6)) < 1e-9


def test_info_nce_orthogonal_pairs():
    e = np.eye(4)
    loss = info_nce(e, e, 0.5)[0]
    assert abs(loss - 4 * math.log(1 + 3 * math.exp(-2))) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_info_nce_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    q, k = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    perm = rng.permutation(5)
    assert abs(info_nce(q, k, 0.1)[0] - info_nce(q[perm], k[perm], 0.1)[0]) < 1e-9


def test_key_encoder_receives_no_gradient():
    st_ = make_moco(SMALL, momentum=0.5)
    opt = adam_init(st_.query.store)
    rng = np.random.default_rng(1)
    pairs = [(rng.random((4, 8, 8)), rng.random((4, 8, 8))) for _ in range(3)]
    moco_train_step(pairs, st_, opt, 1e-3)
    assert st_.key.store.grads_all_zero()
    assert not st_.query.store.grads_all_zero()


def test_separation_example():
    e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    assert separation(e, [0, 0, 1, 1]) == (1.0, 0.0)
