from collections import Counter

import numpy as np
import pytest

from pulse import sft as S
from pulse import thought_space as T
from pulse.core import autodiff as ad
from pulse.data import CandidateSet, ItemInfo
from pulse.errors import InvalidArgument, MissingRationale, UnsupportedByBackend
from pulse.evaluation import hr_at_1, recount_hr_at_1
from pulse.rationale import MockBackend, Rationale, RationaleTree, expand_tot
from pulse.text import tokenize

from oracles import central_difference, rel_error

SMALL = T.EncoderConfig(hash_vocab_size=256, embed_dim=8, n_layers=1, n_heads=2)


def _catalog():
    return {f"i{k}": ItemInfo(f"Item i{k}", f"A {'matte' if k % 2 else 'floral'} thing.") for k in range(12)}


def _cands(gt=3):
    return CandidateSet("u", tuple(f"i{k}" for k in range(10)), gt)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        S.SftConfig(train_batch=2)
    with pytest.raises(InvalidArgument):
        S.SftConfig(history_encoder="e3")
    with pytest.raises(InvalidArgument):
        S.SftConfig(lr=0.0)


def test_build_dataset():
    hist = {"a": ["i1"], "b": ["i2"]}
    cands = {"a": _cands(1), "b": _cands(2)}
    none = S.build_sft_dataset(hist, cands, None, "none")
    assert [e.rationale for e in none] == ["", ""] and [e.label for e in none] == [1, 2]
    with pytest.raises(MissingRationale):
        S.build_sft_dataset(hist, cands, {"a": "x"}, "tot_thought_space")
    got = S.build_sft_dataset(hist, cands, {"a": "x", "b": "y"}, S.SelectionMethod.BASE_REASON, ["b"])
    assert [(e.user_id, e.rationale) for e in got] == [("b", "y")]


def test_features_layout():
    ts = T.init_thought_space(SMALL, 0)
    with pytest.raises(InvalidArgument):
        S.FeatureEncoder(ts, _catalog())
    ts.freeze()
    fe = S.FeatureEncoder(ts, _catalog())
    ex = S.SftExample("u", ("i1", "i2"), "likes matte", _cands())
    f = fe.features(ex)
    d = SMALL.embed_dim
    assert f.shape == (10, 5 * d) and fe.dim == 5 * d
    z_h = ts.e1.encode(T.history_text(["i1", "i2"], _catalog()))
    z_r = ts.encode_rationale("likes matte")
    z_c = ts.e1.encode(T.candidate_text(_catalog()["i4"]))
    np.testing.assert_allclose(f[4], np.concatenate([z_h, z_r, z_c, z_h * z_c, z_r * z_c]), atol=1e-6)
    blank = fe.features(S.SftExample("u", ("i1",), "", _cands()))
    assert not blank[:, d:2 * d].any() and not blank[:, 4 * d:].any()


def test_head_is_permutation_equivariant():
    head = S.init_head(12, 6, seed=0)
    feats = np.random.default_rng(0).normal(size=(10, 12)).astype(np.float32)
    perm = np.random.default_rng(1).permutation(10)
    np.testing.assert_allclose(S.score_candidates(head, feats)[perm], S.score_candidates(head, feats[perm]),
                               atol=1e-6)


def test_head_gradient_matches_finite_differences():
    head = S.init_head(7, 5, seed=2, dtype=np.float64)
    feats = np.random.default_rng(3).normal(size=(2, 10, 7))
    labels = np.array([4, 9])

    def f(arrs):
        for k, v in arrs.items():
            head.set(k, v)
        return ad.cross_entropy(S.head_logits(head, feats), labels).item()

    names = head.names()
    base = {n: head[n].data.copy() for n in names}
    analytic = ad.grad(ad.cross_entropy(S.head_logits(head, feats), labels), head)
    numeric = central_difference(f, base, h=1e-6)
    for n in names:
        assert rel_error(analytic[n], numeric[n]) <= 1e-3, n


def _separable(n, seed):
    """Candidate 0 of every row carries a marker feature; labels point at it after a shuffle."""
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, 10, 6)).astype(np.float32) * 0.1
    labels = rng.integers(10, size=n)
    feats[np.arange(n), labels, 0] += 1.0
    return feats, labels


def test_training_fits_separable_slates():
    tf, tl = _separable(80, 0)
    vf, vl = _separable(40, 1)
    res = S.train_sft(tf, tl, S.SftConfig(lr=3e-3, epochs=8, hidden=16), 0, vf, vl)
    assert res.train_loss[-1] < res.initial_loss
    assert max(res.val_hr) >= 0.9
    preds = [S.predict_top1(row) for row in S.score_candidates(res.head, vf)]
    assert hr_at_1(list(zip(preds, vl))) == res.val_hr[res.best_epoch]


def test_training_is_deterministic():
    tf, tl = _separable(30, 0)
    cfg = S.SftConfig(lr=1e-3, epochs=2, hidden=8, grad_accumulation=4)
    a = S.train_sft(tf, tl, cfg, 5)
    b = S.train_sft(tf, tl, cfg, 5)
    assert a.head.checksum() == b.head.checksum()


def _tree(drift=0.6):
    return expand_tot(Rationale("The purchases lean clearly matte.", "base", "u"), 3, 3,
                      MockBackend(["floral", "matte", "vintage"], drift=drift), seed=1)


def test_ll_select_uses_per_token_score():
    tree = _tree()
    sel = S.ll_select(tree)
    per_tok = [leaf.logprob / len(tokenize(leaf.text)) for _, _, leaf in tree.iter_leaves()]
    assert sel.score == max(per_tok)


def test_ll_select_fallbacks():
    tree = _tree()
    stripped = RationaleTree(tree.root, tree.children, tuple(
        tuple(Rationale(l.text, l.kind, l.source_user, l.tree_pos) for l in g) for g in tree.leaves))
    mock = MockBackend(["floral", "matte", "vintage"])
    a, b = S.ll_select(stripped, mock), S.ll_select(tree)
    assert (a.i, a.j, a.score) == (b.i, b.j, b.score)
    with pytest.raises(UnsupportedByBackend):
        S.ll_select(stripped)


def test_random_select_deterministic_and_spread():
    tree = _tree()
    a, b = S.random_select(tree, 3), S.random_select(tree, 3)
    assert (a.i, a.j) == (b.i, b.j) and np.isnan(a.score)
    picks = Counter()
    for u in range(900):
        t = RationaleTree(Rationale("b", "base", f"u{u}"), tree.children, tree.leaves)
        sel = S.random_select(t, 0)
        picks[(sel.i, sel.j)] += 1
    assert len(picks) == 9 and min(picks.values()) > 60


def test_predictions_roundtrip(tmp_path):
    head = S.init_head(6, 4, seed=0)
    feats, labels = _separable(12, 2)
    exs = [S.SftExample(f"u{k}", ("i1",), "", CandidateSet(f"u{k}", tuple(f"i{j}" for j in range(10)), int(y)))
           for k, y in enumerate(labels)]
    preds = S.predict(head, exs, feats)
    S.write_predictions(tmp_path / "p.jsonl", preds)
    direct = hr_at_1([(p.predicted_index, p.ground_truth_index) for p in preds])
    assert recount_hr_at_1(tmp_path / "p.jsonl") == direct


def test_head_training_leaves_encoders_untouched():
    ts = T.init_thought_space(SMALL, 0)
    ts.freeze()
    before = ts.checksum()
    fe = S.FeatureEncoder(ts, _catalog())
    exs = [S.SftExample(f"u{k}", ("i1", "i2"), "matte please", _cands(k % 10)) for k in range(6)]
    S.train_sft(fe.batch(exs), [e.label for e in exs], S.SftConfig(epochs=2, hidden=8), 0)
    assert ts.checksum() == before
