import csv
import math

import numpy as np
import pytest

from pulse import thought_space as T
from pulse.core import autodiff as ad
from pulse.data import ItemInfo
from pulse.errors import (DegenerateInput, EmptyText, InvalidArgument, NoNegativesAvailable,
                          ProtocolViolation)
from pulse.rationale import MockBackend, Rationale, expand_tot

from oracles import central_difference, rel_error

SMALL = T.EncoderConfig(hash_vocab_size=64, embed_dim=8, n_layers=1, n_heads=2)


def test_infonce_scalar_oracles():
    assert T.infonce_loss(1.0, None, [0.0] * 10, 1.0) == pytest.approx(math.log(1 + 10 / math.e), abs=1e-4)
    assert T.infonce_loss(0.3, None, [0.3] * 10, 0.07) == pytest.approx(math.log(11), abs=1e-6)
    with pytest.raises(InvalidArgument):
        T.infonce_loss(1.0, None, [], 1.0)
    with pytest.raises(InvalidArgument):
        T.infonce_loss(1.0, None, [0.0], 0.0)


def test_infonce_vector_form_matches_cosines():
    rng = np.random.default_rng(0)
    h, p, n = rng.normal(size=4), rng.normal(size=4), rng.normal(size=(3, 4))
    cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    expect = T.infonce_loss(cos(p, h), None, [cos(v, h) for v in n], 0.5)
    assert T.infonce_loss(p, h, n, 0.5) == pytest.approx(expect, rel=1e-12)


def test_infonce_graph_is_mean_of_rows():
    rng = np.random.default_rng(1)
    zp = rng.normal(size=(5, 6))
    zh = rng.normal(size=(5, 6))
    zp /= np.linalg.norm(zp, axis=1, keepdims=True)
    zh /= np.linalg.norm(zh, axis=1, keepdims=True)
    neg = np.array([[j for j in range(5) if j != i][:3] for i in range(5)])
    got = T.infonce_graph(ad.Tensor(zp), ad.Tensor(zh), neg, 0.07).item()
    rows = [T.infonce_loss(zp[i], zh[i], zp[neg[i]], 0.07) for i in range(5)]
    assert got == pytest.approx(np.mean(rows), rel=1e-10)


def test_encoder_loss_gradient_matches_finite_differences():
    ts = T.init_thought_space(SMALL, 0, dtype=np.float64)
    texts_r = ["alpha beta gamma", "delta alpha", "beta beta eps zeta"]
    texts_b = ["history: one | two ; next: three", "history: four ; next: five", "history: six ; next: one"]
    neg = np.array([[1, 2], [0, 2], [0, 1]])
    names = ["e1.emb", "e1.blk0.q.w", "e1.blk0.ff2.w", "e1.proj.b", "e2.blk0.ln1.g", "e2.blk0.k.w", "e2.proj.w"]

    def f(arrs):
        for k, v in arrs.items():
            ts.params.set(k, v)
        return T.batch_loss(ts, texts_r, texts_b, neg, 0.5).item()

    base = {n: ts.params[n].data.copy() for n in names}
    analytic = ad.grad(T.batch_loss(ts, texts_r, texts_b, neg, 0.5), ts.params)
    numeric = central_difference(f, base, h=1e-5)
    for n in names:
        assert rel_error(analytic[n], numeric[n]) <= 1e-3, n


def test_sample_negatives():
    users = [f"u{k}" for k in range(12)]
    negs = T.sample_rationale_negatives(users, 10, seed=3)
    for u, src in negs.items():
        assert len(src) == 10 and u not in src and len(set(src)) == 10
    assert negs == T.sample_rationale_negatives(users, 10, seed=3)
    small = T.sample_rationale_negatives(users[:4], 10, seed=0)
    assert all(len(v) == 10 and u not in v for u, v in small.items())
    with pytest.raises(NoNegativesAvailable):
        T.sample_rationale_negatives(["solo"], 10)


def test_batches_never_leave_a_singleton():
    rng = np.random.default_rng(0)
    out = T._batches([f"u{k}" for k in range(65)], 32, rng)
    assert [len(b) for b in out] == [32, 33]


def test_behavior_text_format():
    cat = {"a": ItemInfo("Serum  a|b", ""), "b": ItemInfo("Balm b", "")}
    assert T.build_behavior_text(["a"], "b", cat) == "history: Serum a¦b ; next: Balm b"
    assert T.build_behavior_text(["a", "b"], "b", cat, [5.0, None]) == \
        "history: Serum a¦b (5.0) | Balm b ; next: Balm b"
    assert T.candidate_text(ItemInfo("T", " d ")) == "T. d"


def test_encode_is_unit_norm_and_batch_independent():
    ts = T.init_thought_space(SMALL, 0)
    texts = ["a short one", "a much longer text with many more tokens in it"]
    ids, mask = T._pad([T.token_ids(t, SMALL.hash_vocab_size) for t in texts])
    with ad.no_grad():
        batched = ts.e1.forward(ids, mask).data
    for k, t in enumerate(texts):
        z = ts.e1.encode(t)
        assert np.linalg.norm(z) == pytest.approx(1.0, abs=1e-5)
        np.testing.assert_allclose(batched[k], z, atol=1e-5)
    with pytest.raises(EmptyText):
        ts.e1.encode("!!! ...")


def test_shared_weights_and_embedding_table(tmp_path):
    cfg = T.EncoderConfig(64, 8, 1, 2, shared_weights=True)
    ts = T.init_thought_space(cfg, 0)
    assert ts.e1 is ts.e2 and not any(n.startswith("e2.") for n in ts.params.names())
    table = np.arange(64 * 8, dtype=np.float32).reshape(64, 8)
    np.save(tmp_path / "t.npy", table)
    ts = T.init_thought_space(SMALL, 0, embedding_table=tmp_path / "t.npy")
    np.testing.assert_array_equal(ts.params["e2.emb"].data, table)
    with pytest.raises(InvalidArgument):
        T.init_thought_space(SMALL, 0, embedding_table=table[:10])


def _tiny_corpus(n=24):
    traits = ["floral", "matte", "vintage"]
    pos = {f"u{k:02d}": f"the shopper wants {traits[k % 3]} goods" for k in range(n)}
    beh = {f"u{k:02d}": f"history: {traits[k % 3]} {k} ; next: {traits[k % 3]}" for k in range(n)}
    return pos, beh


def test_training_lowers_loss_and_writes_epoch_checkpoints(tmp_path):
    pos, beh = _tiny_corpus()
    cfg = T.ThoughtSpaceConfig(batch_size=8, lr=3e-3, epochs=4, negatives=3)
    ts, curve = T.train_thought_space(pos, beh, cfg, SMALL, checkpoint_dir=tmp_path)
    assert curve.loss[-1] < curve.loss[0]
    assert sorted(p.name for p in tmp_path.iterdir()) == [f"encoders_epoch{k:03d}.ckpt" for k in range(1, 5)]


def test_training_is_deterministic():
    pos, beh = _tiny_corpus()
    cfg = T.ThoughtSpaceConfig(batch_size=8, lr=3e-3, epochs=2, negatives=3)
    a, _ = T.train_thought_space(pos, beh, cfg, SMALL)
    b, _ = T.train_thought_space(pos, beh, cfg, SMALL)
    assert a.checksum() == b.checksum()


def test_frozen_encoders_refuse_training(tmp_path):
    pos, beh = _tiny_corpus()
    ts = T.init_thought_space(SMALL, 0)
    ts.freeze()
    with pytest.raises(ProtocolViolation):
        T.train_thought_space(pos, beh, T.ThoughtSpaceConfig(), ts=ts)
    T.save_thought_space(tmp_path, ts)
    loaded = T.load_thought_space(tmp_path)
    assert loaded.frozen and loaded.checksum() == ts.checksum()
    np.testing.assert_array_equal(loaded.encode_behavior("x y"), ts.encode_behavior("x y"))


def test_training_needs_behaviors():
    with pytest.raises(InvalidArgument):
        T.train_thought_space({"a": "x", "b": "y"}, {"a": "x"}, T.ThoughtSpaceConfig(), SMALL)
    with pytest.raises(NoNegativesAvailable):
        T.train_thought_space({"a": "x"}, {"a": "x"}, T.ThoughtSpaceConfig(), SMALL)


def _tree():
    return expand_tot(Rationale("The purchases lean clearly matte.", "base", "u"), 3, 3,
                      MockBackend(["floral", "matte", "vintage"], drift=0.5), seed=0)


def test_select_leaf_first_wins_ties():
    tree = _tree()
    sel = T.select_leaf(tree, lambda leaf: 1.0)
    assert (sel.i, sel.j) == (0, 0)
    scores = {(1, 2): 0.9, (2, 0): 0.9}
    sel = T.select_leaf(tree, lambda leaf: scores.get(tuple(leaf.tree_pos[1:]), 0.0))
    assert (sel.i, sel.j) == (1, 2) and sel.leaf is tree.leaves[1][2]


def test_select_best_rationale_equals_agreement_argmax():
    ts = T.init_thought_space(SMALL, 4)
    ts.freeze()
    tree = _tree()
    beh = "history: Mask 1 | Oil 2 ; next: Serum 3"
    sel = T.select_best_rationale(tree, beh, ts)
    scores = [T.agreement_score(ts, leaf.text, beh) for _, _, leaf in tree.iter_leaves()]
    assert sel.score == max(scores)
    assert (sel.i * 3 + sel.j) == scores.index(max(scores))


def test_separation_untrained_is_small():
    pos, beh = _tiny_corpus(30)
    negs = T.sample_rationale_negatives(sorted(pos), 5, 0)
    p, n = T.separation(T.init_thought_space(T.EncoderConfig(), 0), pos, beh, negs)
    assert abs(p - n) < 0.1


def test_projection(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(9, 5))
    coords = T.project_embeddings_2d(x, ["a"] * 9, [f"i{k}" for k in range(9)], tmp_path / "p.csv")
    xc = x - x.mean(0)
    _, _, vt = np.linalg.svd(xc)
    for k in range(2):
        ref = xc @ vt[k]
        assert np.allclose(coords[:, k], ref) or np.allclose(coords[:, k], -ref)
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["id", "label", "x", "y"] and len(rows) == 10
    np.testing.assert_allclose(T.project_embeddings_2d(-x, ["a"] * 9), T.project_embeddings_2d(-x, ["a"] * 9))
    with pytest.raises(InvalidArgument):
        T.project_embeddings_2d(x[:2], ["a"] * 2)
    with pytest.raises(DegenerateInput):
        T.project_embeddings_2d(np.ones((4, 3)), ["a"] * 4)
