import math

import numpy as np
import pytest

import reference as ref
from conftest import make_mfn
from mfnrec.centers import InterestCenters
from mfnrec.data import collate
from mfnrec.diffcore import Tensor, adam_step, backward, tape
from mfnrec.features import ChannelFieldSpec
from mfnrec.mfn import (
    ChannelParams,
    ConfigError,
    InterestMatrix,
    MsaParams,
    aggregate,
    combination_interests,
    msa,
    similarity_interests,
)
from mfnrec.nets import batch_loss, bce, forward

CID = ChannelFieldSpec(("cid",))


def channel(K=2, d=2, hidden=3, heads=1, seed=0):
    rng = np.random.default_rng(seed)
    centers = InterestCenters.from_array(rng.normal(size=(K, d)))
    return ChannelParams(rng, CID, centers, d, hidden, heads, "ch")


# -- similarity interests -------------------------------------------------------

def test_single_center_sums_columns():
    rng = np.random.default_rng(0)
    Ef, Et = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    R = similarity_interests(Ef, Et, InterestCenters.from_array(rng.normal(size=(1, 3)))).data
    np.testing.assert_allclose(R[0], Et.sum(axis=0), atol=1e-15)


def test_single_behavior_rows_proportional():
    rng = np.random.default_rng(1)
    Ef, Et = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    centers = InterestCenters.from_array(rng.normal(size=(3, 3)))
    R = similarity_interests(Ef, Et, centers).data
    P = ref.softmax(ref.mm(Ef.tolist(), ref.tr(centers.C.data.tolist()))[0])
    for j in range(3):
        np.testing.assert_allclose(R[j], P[j] * Et[0], atol=1e-15)


def test_three_behavior_fixture():
    Ef = [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]
    Et = [[1.0, 2.0], [3.0, -1.0], [0.0, 0.5]]
    C = [[1.0, -1.0], [0.0, 2.0]]
    P = [ref.softmax(r) for r in ref.mm(Ef, ref.tr(C))]
    expected = ref.mm(ref.tr(P), Et)
    got = similarity_interests(np.array(Ef), np.array(Et), InterestCenters.from_array(np.array(C))).data
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


# -- msa ----------------------------------------------------------------------------

def test_heads_must_divide_dim():
    with pytest.raises(ConfigError):
        MsaParams(np.random.default_rng(0), 6, 4)


def test_zero_value_projection_gives_zero():
    p = MsaParams(np.random.default_rng(0), 4, 2)
    p.wv.data[...] = 0.0
    assert np.all(msa(np.random.default_rng(1).normal(size=(3, 4)), p).data == 0.0)


def test_single_behavior_passes_value_and_output():
    p = MsaParams(np.random.default_rng(0), 4, 2)
    x = np.random.default_rng(1).normal(size=(1, 4))
    np.testing.assert_allclose(msa(x, p).data, x @ p.wv.data @ p.wo.data, atol=1e-15)


def test_msa_hand_fixture():
    p = MsaParams(np.random.default_rng(0), 2, 1)
    p.wq.data[...] = [[1.0, 0.5], [0.0, -1.0]]
    p.wk.data[...] = [[0.3, 0.0], [1.0, 2.0]]
    p.wv.data[...] = [[2.0, 1.0], [-1.0, 0.0]]
    p.wo.data[...] = [[1.0, 0.0], [0.5, 1.0]]
    x = [[1.0, 2.0], [-0.5, 1.0]]
    # by hand, one head of width 2
    q = [[1.0, -1.5], [-0.5, -1.25]]
    k = [[2.3, 4.0], [0.85, 2.0]]
    v = [[0.0, 1.0], [-2.0, -0.5]]
    out = []
    for i in range(2):
        s = [(q[i][0] * k[j][0] + q[i][1] * k[j][1]) / math.sqrt(2) for j in range(2)]
        w = ref.softmax(s)
        h = [w[0] * v[0][c] + w[1] * v[1][c] for c in range(2)]
        out.append([h[0] * 1.0 + h[1] * 0.5, h[1]])
    np.testing.assert_allclose(msa(np.array(x), p).data, out, rtol=0, atol=1e-10)
    np.testing.assert_allclose(out, ref.msa(x, p.wq.data, p.wk.data, p.wv.data, p.wo.data, 1), atol=1e-12)


def test_msa_matches_reference_multihead():
    p = MsaParams(np.random.default_rng(2), 6, 3)
    x = np.random.default_rng(3).normal(size=(5, 6))
    expected = ref.msa(x.tolist(), p.wq.data, p.wk.data, p.wv.data, p.wo.data, 3)
    np.testing.assert_allclose(msa(x, p).data, expected, rtol=0, atol=1e-12)


# -- combination interests --------------------------------------------------------------

def test_single_behavior_combination():
    ch = channel(K=3, d=2)
    Et = np.array([[0.4, -1.2]])
    R_c, A = combination_interests(Et, ch)
    assert np.all(A.data == 1.0) and A.shape == (3, 1)
    np.testing.assert_array_equal(R_c.data, np.repeat(Et, 3, axis=0))


def test_zero_w2_gives_uniform_weights():
    ch = channel(K=2, d=2)
    ch.W2.data[...] = 0.0
    Et = np.random.default_rng(4).normal(size=(5, 2))
    R_c, A = combination_interests(Et, ch)
    np.testing.assert_allclose(A.data, 0.2, atol=1e-15)
    np.testing.assert_allclose(R_c.data, np.repeat(Et.mean(axis=0, keepdims=True), 2, axis=0), atol=1e-15)


def test_combination_hand_fixture():
    ch = channel(K=2, d=2, hidden=3, heads=1, seed=5)
    Et = [[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]]
    H = ref.msa(Et, ch.msa.wq.data, ch.msa.wk.data, ch.msa.wv.data, ch.msa.wo.data, 1)
    W1, W2 = ch.W1.data.tolist(), ch.W2.data.tolist()
    hidden = [[ref.swish(sum(W1[a][c] * H[t][c] for c in range(2))) for a in range(3)] for t in range(3)]
    logits = [[sum(hidden[t][a] * W2[a][k] for a in range(3)) for t in range(3)] for k in range(2)]
    A = [ref.softmax(r) for r in logits]
    R_c = ref.mm(A, Et)
    got_R, got_A = combination_interests(np.array(Et), ch)
    np.testing.assert_allclose(got_A.data, A, rtol=0, atol=1e-10)
    np.testing.assert_allclose(got_R.data, R_c, rtol=0, atol=1e-10)
    np.testing.assert_allclose(got_A.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_interests_ignore_behavior_order():
    ch = channel(K=3, d=4, hidden=5, heads=2, seed=6)
    rng = np.random.default_rng(7)
    Ef, Et = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    perm = rng.permutation(6)
    R_s = similarity_interests(Ef, Et, ch.centers).data
    R_s2 = similarity_interests(Ef[perm], Et[perm], ch.centers).data
    np.testing.assert_allclose(R_s, R_s2, rtol=0, atol=1e-13)
    trace, trace2 = {}, {}
    R_c = combination_interests(Et, ch, trace)[0].data
    R_c2 = combination_interests(Et[perm], ch, trace2)[0].data
    np.testing.assert_allclose(R_c, R_c2, rtol=0, atol=1e-13)
    np.testing.assert_allclose(trace2["A"][0], trace["A"][0][:, perm], rtol=0, atol=1e-13)


# -- aggregation -------------------------------------------------------------------------

def test_single_center_aggregate_is_sum():
    ch = channel(K=1, d=2)
    r1, r2 = np.array([[1.0, 2.0]]), np.array([[-0.5, 4.0]])
    out = aggregate(InterestMatrix(Tensor(r1), Tensor(r2)), np.array([0.3, 0.3]), ch).data
    np.testing.assert_allclose(out, (r1 + r2)[0], atol=1e-15)


def test_identical_rows_give_twice_the_row():
    ch = channel(K=3, d=2, seed=8)
    r = np.array([0.7, -1.1])
    rows = Tensor(np.tile(r, (3, 1)))
    out = aggregate(InterestMatrix(rows, rows), np.array([2.0, -3.0]), ch).data
    np.testing.assert_allclose(out, 2 * r, atol=1e-14)


def test_aggregate_hand_fixture():
    ch = channel(K=2, d=2, hidden=3, seed=9)
    R_s = [[1.0, 0.0], [0.0, 2.0]]
    R_c = [[-1.0, 1.0], [0.5, 0.5]]
    c = [0.2, -0.4]
    w1 = ref.softmax([ref.mlp(r + c, ref.layers_of(ch.agg_sim))[0] for r in R_s])
    w2 = ref.softmax([ref.mlp(r + c, ref.layers_of(ch.agg_comb))[0] for r in R_c])
    expected = [sum(w1[j] * R_s[j][k] for j in range(2)) + sum(w2[j] * R_c[j][k] for j in range(2)) for k in range(2)]
    trace = {}
    out = aggregate(InterestMatrix(Tensor(np.array(R_s)), Tensor(np.array(R_c))), np.array(c), ch, trace).data
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-10)
    np.testing.assert_allclose(trace["w1"][0], w1, atol=1e-12)


def test_aggregate_convexity_certificate():
    rng = np.random.default_rng(10)
    for seed in range(20):
        ch = channel(K=4, d=3, hidden=4, seed=seed)
        R_s, R_c = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        trace = {}
        out = aggregate(InterestMatrix(Tensor(R_s), Tensor(R_c)), rng.normal(size=3), ch, trace).data
        w1, w2 = trace["w1"][0], trace["w2"][0]
        assert np.all(w1 >= 0) and np.all(w2 >= 0)
        assert abs(w1.sum() - 1) < 1e-12 and abs(w2.sum() - 1) < 1e-12
        np.testing.assert_allclose(out - w2 @ R_c, w1 @ R_s, atol=1e-13)


# -- full model -------------------------------------------------------------------------------

def test_forward_matches_reference(small_world, small_mfn):
    train = small_world[3]
    for ex in train.examples[:5]:
        p_ref, traces = ref.model_forward(small_mfn, ex)
        assert forward(ex, small_mfn) == pytest.approx(p_ref, rel=0, abs=1e-12)
    trace = {}
    small_mfn.probabilities(collate([train.examples[0]]), trace)
    _, traces = ref.model_forward(small_mfn, train.examples[0])
    for c, t in enumerate(traces):
        for key in ("P", "A", "w1", "w2"):
            np.testing.assert_allclose(trace[key][c][0], t[key], atol=1e-12)


def test_forward_without_combination_matches_reference(small_world):
    model = make_mfn(small_world[0], combination=False, seed=4)
    for ex in small_world[3].examples[:3]:
        assert forward(ex, model) == pytest.approx(ref.model_forward(model, ex)[0], abs=1e-12)


def test_zero_head_gives_half(small_world, small_mfn):
    small_mfn.head.final.W.data[...] = 0.0
    small_mfn.head.final.b.data[...] = 0.0
    probs = small_mfn.predict(small_world[3].examples[:20])
    assert np.all(probs == 0.5)


def test_label_never_enters_forward(small_world, small_mfn):
    from dataclasses import replace
    ex = small_world[3].examples[0]
    assert forward(ex, small_mfn) == forward(replace(ex, label=1 - ex.label), small_mfn)


def test_bce_values():
    assert bce(Tensor(np.full(4, 0.5)), np.array([0, 1, 1, 0])).item() / 4 == pytest.approx(math.log(2), abs=1e-15)
    assert bce(Tensor(np.array([1.0, 0.0])), np.array([1, 0])).item() < 1e-11
    two = bce(Tensor(np.array([0.9, 0.2])), np.array([1, 0])).item() / 2
    assert two == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-15)
    assert two == pytest.approx(0.164252, abs=1e-6)


def test_batch_loss_zero_head_is_ln2(small_world, small_mfn):
    small_mfn.head.final.W.data[...] = 0.0
    small_mfn.head.final.b.data[...] = 0.0
    loss = batch_loss(small_world[3].examples[:16], small_mfn).item()
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_aux_term_adds_weighted_entropy(small_world):
    exs = small_world[3].examples[:8]
    plain = make_mfn(small_world[0], seed=2)
    weighted = make_mfn(small_world[0], seed=2, aux_weight=0.3)
    extra = weighted.aux_loss(collate(exs)).item()
    assert batch_loss(exs, weighted).item() == pytest.approx(batch_loss(exs, plain).item() + 0.3 * extra / 8, abs=1e-14)


def test_softmaxes_normalized_over_many_examples(small_world, small_mfn):
    trace = {}
    exs = small_world[3].examples[:40]
    small_mfn.probabilities(collate(exs), trace)
    for key in ("P", "A", "w1", "w2", "msa"):
        for arr in trace[key]:
            np.testing.assert_allclose(arr.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_training_is_bit_deterministic(small_world):
    def run():
        model = make_mfn(small_world[0], seed=1)
        exs = small_world[3].examples
        out = []
        for lo in range(0, 64, 16):
            with tape():
                loss = batch_loss(exs[lo:lo + 16], model)
                backward(loss)
            adam_step(model.parameters(), lr=1e-3)
            out.append(loss.item())
        return out

    assert run() == run()


def test_frozen_centers_receive_no_gradient(small_world, small_mfn):
    with tape():
        backward(batch_loss(small_world[3].examples[:8], small_mfn))
    for ch in small_mfn.channels:
        assert ch.centers.C.grad is None
    small_mfn.freeze_centers(False)
    with tape():
        backward(batch_loss(small_world[3].examples[:8], small_mfn))
    assert all(ch.centers.C.grad is not None for ch in small_mfn.channels)
