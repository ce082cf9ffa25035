import numpy as np
import pytest

from qgrec.dataio import (
    DatasetEmptyError,
    InteractionLog,
    build_candidates,
    load_features,
    load_interactions,
    preprocess,
    sample_batch,
    synthesize_interactions,
    write_interactions,
)
from qgrec.numerics import Rng


def make_log(records):
    """records: (user_key, item_key, rating, ts) tuples in file order."""
    uv, iv = {}, {}
    users, items, ratings, stamps = [], [], [], []
    for u, i, r, t in records:
        users.append(uv.setdefault(u, len(uv) + 1))
        items.append(iv.setdefault(i, len(iv) + 1))
        ratings.append(r)
        stamps.append(t)
    return InteractionLog(
        users=np.array(users), items=np.array(items),
        ratings=np.array(ratings), timestamps=np.array(stamps),
        user_vocab=uv, item_vocab=iv)


def reference_split(records, threshold, min_history):
    """Brute-force leave-one-out splitter over raw record tuples."""
    per_user = {}
    for order, (u, i, r, t) in enumerate(records):
        if r > threshold:
            per_user.setdefault(u, []).append((t, order, i))
    out = {}
    for u, rows in per_user.items():
        if len(rows) < min_history:
            continue
        rows.sort()
        seq = [i for _, _, i in rows]
        out[u] = (seq[:-2], seq[-2], seq[-1])
    return out


class TestLoadInteractions:
    def test_three_line_tsv(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("user\titem\trating\ttimestamp\n"
                     "a\tx\t5\t1\nb\ty\t4\t2\na\ty\t3\t3\n")
        log = load_interactions(p, columns={"user": "user", "item": "item",
                                            "rating": "rating",
                                            "timestamp": "timestamp"})
        assert len(log) == 3
        assert log.skipped == 0
        assert log.users.tolist() == [1, 2, 1]

    def test_malformed_row_skipped(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("1\t1\t5\t1\n1\tgarbage-row\n2\t2\t4\t2\n")
        log = load_interactions(p)
        assert len(log) == 2
        assert log.skipped == 1

    def test_positive_count_matches_line_scan(self, tmp_path):
        world = synthesize_interactions(40, 60, 4, per_user=10, seed=5)
        p = tmp_path / "ratings.tsv"
        write_interactions(world.records, p)
        log = load_interactions(p, columns={"user": "user", "item": "item",
                                            "rating": "rating",
                                            "timestamp": "timestamp"})
        expected = sum(1 for line in p.read_text().splitlines()[1:]
                       if int(line.split("\t")[2]) > 3)
        assert int((log.ratings > 3).sum()) == expected

    def test_missing_column(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("user\titem\n1\t2\n")
        with pytest.raises(ValueError, match="rating"):
            load_interactions(p, columns={"user": "user", "item": "item",
                                          "rating": "rating",
                                          "timestamp": "timestamp"})


class TestPreprocess:
    def test_five_positive_leave_one_out(self):
        recs = [("u", k, 5, t) for t, k in enumerate("abcde")]
        ds = preprocess(make_log(recs), positive_threshold=3, min_history=5)
        item = {k: v for k, v in zip("abcde", range(1, 6))}
        assert ds.train[1] == [item["a"], item["b"], item["c"]]
        assert ds.valid_target[1] == item["d"]
        assert ds.test_target[1] == item["e"]
        assert ds.valid_history(1) == ds.train[1]
        assert ds.test_history(1) == ds.train[1] + [item["d"]]

    def test_four_positives_dropped(self):
        recs = [("u", k, 5, t) for t, k in enumerate("abcd")]
        with pytest.raises(DatasetEmptyError):
            preprocess(make_log(recs), min_history=5)

    def test_threshold_filters(self):
        recs = [("u", k, 5, t) for t, k in enumerate("abcde")]
        recs += [("u", "z", 2, 99)]  # non-positive, must not become the test item
        ds = preprocess(make_log(recs))
        assert ds.test_target[1] == 5  # item "e"

    def test_matches_reference_splitter(self):
        world = synthesize_interactions(100, 150, 6, per_user=12,
                                        low_rating_frac=0.3, seed=9)
        log = make_log(world.records)
        ds = preprocess(log, positive_threshold=3, min_history=5)
        ref = reference_split(
            [(log.user_vocab[u], log.item_vocab[i], r, t)
             for u, i, r, t in world.records], 3, 5)
        assert set(ds.train) == set(ref)
        for u, (tr, va, te) in ref.items():
            assert ds.train[u] == tr
            assert ds.valid_target[u] == va
            assert ds.test_target[u] == te

    def test_train_plus_two_invariant(self):
        world = synthesize_interactions(50, 80, 4, per_user=9, seed=3)
        log = make_log(world.records)
        ds = preprocess(log)
        positives = {}
        for u, r in zip(log.users, log.ratings):
            if r > 3:
                positives[int(u)] = positives.get(int(u), 0) + 1
        for u in ds.user_ids:
            assert len(ds.train[u]) + 2 == positives[u]

    def test_timestamp_ties_keep_file_order(self):
        recs = [("u", k, 5, 7) for k in "abcdef"]  # all same timestamp
        ds = preprocess(make_log(recs))
        assert ds.train[1] == [1, 2, 3, 4]
        assert ds.test_target[1] == 6

    def test_fingerprint_deterministic(self):
        world = synthesize_interactions(30, 40, 3, per_user=8, seed=1)
        a = preprocess(make_log(world.records)).fingerprint()
        b = preprocess(make_log(world.records)).fingerprint()
        assert a == b
        other = synthesize_interactions(30, 40, 3, per_user=8, seed=2)
        assert preprocess(make_log(other.records)).fingerprint() != a


class TestSampleBatch:
    @pytest.fixture
    def ds(self):
        world = synthesize_interactions(60, 120, 4, per_user=12, seed=4)
        return preprocess(make_log(world.records))

    def test_negative_never_equals_target(self, ds):
        rng = Rng(0)
        for _ in range(40):
            batch = sample_batch(ds, 64, n_neg=20, rng=rng)
            assert not np.any(batch.negatives == batch.targets[:, None])
            assert batch.negatives.shape == (64, 20)

    def test_history_excludes_target_position(self, ds):
        batch = sample_batch(ds, 128, n_neg=5, rng=Rng(1))
        for b in range(128):
            hist = batch.histories[b, :batch.lengths[b]]
            seq = ds.train[int(batch.users[b])]
            tpos = None
            # history must be a contiguous prefix slice ending just before the target
            joined = seq + [int(batch.targets[b])]
            for p in range(1, len(seq)):
                if seq[p] == batch.targets[b] and seq[max(0, p - ds.max_len):p] == hist.tolist():
                    tpos = p
                    break
            assert tpos is not None, joined

    def test_small_vocabulary_rejected(self):
        recs = [("u", k, 5, t) for t, k in enumerate("ababa")]
        ds = preprocess(make_log(recs))
        with pytest.raises(ValueError):
            sample_batch(ds, 4, n_neg=50, rng=Rng(0))

    def test_fixed_seed_replay(self, ds):
        b1 = sample_batch(ds, 32, n_neg=7, rng=Rng(5))
        b2 = sample_batch(ds, 32, n_neg=7, rng=Rng(5))
        assert np.array_equal(b1.users, b2.users)
        assert np.array_equal(b1.histories, b2.histories)
        assert np.array_equal(b1.negatives, b2.negatives)


class TestCandidates:
    @pytest.fixture
    def ds(self):
        world = synthesize_interactions(25, 50, 3, per_user=10, seed=8)
        return preprocess(make_log(world.records))

    def test_full_mode_covers_vocabulary(self, ds):
        cands = build_candidates(ds, mode="full")
        for u, arr in cands.items():
            assert len(arr) == ds.n_items
            assert arr[0] == ds.test_target[u]
            assert len(set(arr.tolist())) == ds.n_items

    def test_sampled_has_gt_once(self, ds):
        cands = build_candidates(ds, mode="sampled", n_sampled=20, rng=Rng(2))
        for u, arr in cands.items():
            assert len(arr) == 21
            assert (arr == ds.test_target[u]).sum() == 1
            assert len(set(arr.tolist())) == 21
            assert arr.min() >= 1 and arr.max() <= ds.n_items

    def test_sampled_forced_small_vocab(self):
        recs = [("u", k, 5, t) for t, k in enumerate("abcab")]  # 3 items
        ds = preprocess(make_log(recs))
        cands = build_candidates(ds, mode="sampled", n_sampled=2, rng=Rng(0))
        arr = cands[1]
        assert sorted(arr.tolist()) == [1, 2, 3]

    def test_oversampling_rejected(self, ds):
        with pytest.raises(ValueError):
            build_candidates(ds, mode="sampled", n_sampled=ds.n_items, rng=Rng(0))


class TestFeatures:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "f.tsv"
        p.write_text("item\tcluster\tname\n1\t0\tfoo\n2\t1\tbar\n")
        table = load_features(p, kind="item")
        assert table.fields == ["cluster", "name"]
        assert table.get(1) == {"cluster": "0", "name": "foo"}
        assert table.get(99) == {}


class TestSyntheticWorld:
    def test_clusters_cover_and_reproduce(self):
        w1 = synthesize_interactions(40, 80, 5, per_user=8, seed=11)
        w2 = synthesize_interactions(40, 80, 5, per_user=8, seed=11)
        assert w1.records == w2.records
        assert np.array_equal(w1.item_clusters, w2.item_clusters)
        assert set(w1.user_clusters[1:].tolist()) == set(range(5))

    def test_own_cluster_dominates(self):
        w = synthesize_interactions(50, 100, 4, per_user=20,
                                    own_cluster_prob=0.9, seed=13)
        own = 0
        for u, i, r, t in w.records:
            own += int(w.user_clusters[int(u)] == w.item_clusters[int(i)])
        assert own / len(w.records) > 0.8
