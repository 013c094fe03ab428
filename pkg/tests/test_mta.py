import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarfield import autodiff as ad
from avatarfield.gradcheck import check_mta
from avatarfield.mta import MtaParams, mta_fuse, write_attention_csv


def make(seed, n, c=4, r=3, scale=1.0):
    rng = np.random.default_rng(seed)
    params = MtaParams(c, r, rng, seed=seed, scale=scale)
    sources = [ad.Tensor(rng.normal(size=(3, c, r, r))) for _ in range(n)]
    return params, sources


def scalar_fuse(sources, params):
    q, wq, bq = params.query.data, params.lq.weight.data, params.lq.bias.data
    wk, bk = params.lk.weight.data, params.lk.bias.data
    _, c, r, _ = q.shape
    out = np.zeros_like(sources[0])
    for p in range(3):
        for i in range(r):
            for j in range(r):
                qv = q[p, :, i, j] @ wq + bq
                scores = [float(qv @ (s[p, :, i, j] @ wk + bk)) / np.sqrt(c) for s in sources]
                m = max(scores)
                e = [np.exp(s - m) for s in scores]
                for w, s in zip(e, sources):
                    out[p, :, i, j] += (w / sum(e)) * s[p, :, i, j]
    return out


def test_two_sources_match_scalar_reference():
    params, sources = make(1, 2)
    got, weights = mta_fuse(sources, params, return_weights=True)
    assert np.abs(got.data - scalar_fuse([s.data for s in sources], params)).max() < 1e-12
    assert np.abs(weights.sum(axis=0) - 1).max() < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 5))
def test_weights_convex_and_output_in_hull(seed, n):
    params, sources = make(seed, n)
    out, weights = mta_fuse(sources, params, return_weights=True)
    assert (weights >= 0).all()
    assert np.abs(weights.sum(axis=0) - 1).max() < 1e-12
    stack = np.stack([s.data for s in sources])
    tol = 1e-12 * (1 + np.abs(stack).max())
    assert (out.data >= stack.min(axis=0) - tol).all() and (out.data <= stack.max(axis=0) + tol).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_single_source_is_identity(seed):
    params, sources = make(seed, 1, scale=3.0)
    assert np.array_equal(mta_fuse(sources, params).data, sources[0].data)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 5))
def test_identical_sources_give_identity(seed, n):
    params, sources = make(seed, 1)
    assert np.array_equal(mta_fuse(sources * n, params).data, sources[0].data)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.permutations(range(4)))
def test_permutation_equivariance_is_bit_exact(seed, perm):
    params, sources = make(seed, 4)
    a, wa = mta_fuse(sources, params, return_weights=True)
    b, wb = mta_fuse([sources[i] for i in perm], params, return_weights=True)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(wa[list(perm)], wb)


def test_key_bias_gradient_vanishes():
    rng = np.random.default_rng(0)
    params, _ = make(2, 3)
    sources = [ad.Parameter(f"s{i}", rng.normal(size=(3, 4, 3, 3))) for i in range(3)]
    for p in params.parameters():
        p.grad = np.zeros_like(p.data)
    ad.backward(ad.tsum(mta_fuse(sources, params) * rng.normal(size=(3, 4, 3, 3))))
    # a shared key bias shifts every source score equally, so softmax ignores it
    assert np.abs(params.lk.bias.grad).max() < 1e-13 * np.abs(params.lk.weight.grad).max() + 1e-14
    assert np.abs(params.lk.weight.grad).max() > 1e-3


def test_gradients_pass_finite_difference_check():
    assert max(check_mta(1).values()) < 1e-4


def test_errors():
    params, sources = make(0, 2)
    with pytest.raises(ValueError):
        mta_fuse([], params)
    with pytest.raises(ad.ShapeError):
        mta_fuse([sources[0], ad.Tensor(np.zeros((3, 4, 2, 2)))], params)


def test_attention_csv_dump(tmp_path):
    params, sources = make(0, 2, r=2)
    _, w = mta_fuse(sources, params, return_weights=True)
    write_attention_csv(w, tmp_path / "att.csv")
    rows = list(csv.reader(open(tmp_path / "att.csv")))
    assert rows[0] == ["source", "plane", "row", "col", "weight"]
    assert len(rows) == 1 + 2 * 3 * 2 * 2
    assert float(rows[1][4]) == w[0, 0, 0, 0]
