import numpy as np
import numpy.testing as npt
import pytest

from glam.eval import (
    QueryGroundTruth,
    RankedList,
    average_precision,
    map_protocol,
    precision_at_10,
    protocol_sets,
    rank,
)
from glam.head import Descriptor
from glam.tensor import ShapeError

from oracles import (
    average_precision_loop,
    map_protocol_loop,
    precision_at_10_loop,
    rank_ids_loop,
)

rng = np.random.default_rng(555)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_descriptors(n, dim, r):
    return [Descriptor(id=f"img{i:03d}", vec=unit(r.standard_normal(dim)))
            for i in range(n)]


class TestRank:
    def test_exact_match_ranks_first(self):
        db = random_descriptors(10, 8, rng)
        query = Descriptor(id="q", vec=db[4].vec.copy())
        assert rank(query, db).ids[0] == db[4].id

    def test_orthogonal_ties_broken_by_id(self):
        eye = np.eye(4)
        db = [Descriptor(id=f"v{i}", vec=eye[i]) for i in (2, 0, 3, 1)]
        query = Descriptor(id="q", vec=eye[1])
        out = rank(query, db)
        assert out.ids[0] == "v1"
        assert out.ids[1:] == ["v0", "v2", "v3"]  # all score 0, id order

    def test_matches_brute_force_sort(self):
        db = random_descriptors(30, 6, rng)
        query = Descriptor(id="q", vec=unit(rng.standard_normal(6)))
        expect = rank_ids_loop(query.vec, [(d.id, d.vec) for d in db])
        assert rank(query, db).ids == expect

    def test_dimension_mismatch(self):
        db = [Descriptor(id="a", vec=unit([1, 2, 3]))]
        with pytest.raises(ShapeError):
            rank(Descriptor(id="q", vec=unit([1, 2])), db)


def ranked(ids):
    return RankedList(query_id="q", ids=list(ids))


class TestAveragePrecision:
    def test_perfect_ranking(self):
        out = average_precision(ranked(["a", "b", "c", "d"]), {"a", "b"}, set())
        assert out == 1.0

    def test_single_positive_rank_two(self):
        # hand trace: one positive at filtered rank 1 (0-based); j=0, r=1
        # gives ((0/1) + (1/2)) / 2 = 0.25
        out = average_precision(ranked(["neg", "pos"]), {"pos"}, set())
        assert out == 0.25

    def test_junk_removed_before_scoring(self):
        base = average_precision(ranked(["n1", "pos", "n2"]), {"pos"}, set())
        spiked = average_precision(
            ranked(["j1", "n1", "j2", "pos", "j3", "n2"]), {"pos"},
            {"j1", "j2", "j3"})
        assert base == spiked

    def test_permutation_below_last_positive_irrelevant(self):
        ids = ["p1", "n1", "p2", "n2", "n3", "n4"]
        base = average_precision(ranked(ids), {"p1", "p2"}, set())
        shuffled = ["p1", "n1", "p2", "n4", "n2", "n3"]
        assert base == average_precision(ranked(shuffled), {"p1", "p2"}, set())

    def test_bounds_and_perfection_condition(self):
        for _ in range(50):
            n = int(rng.integers(3, 12))
            ids = [f"x{i}" for i in range(n)]
            order = list(rng.permutation(ids))
            positives = set(rng.choice(ids, size=int(rng.integers(1, n)),
                                       replace=False))
            ap = average_precision(ranked(order), positives, set())
            assert 0.0 <= ap <= 1.0
            on_top = all(x in positives for x in order[:len(positives)])
            assert (ap == 1.0) == on_top

    def test_matches_brute_force_oracle(self):
        for trial in range(50):
            r = np.random.default_rng(trial)
            n = int(r.integers(4, 20))
            ids = [f"d{i}" for i in range(n)]
            order = list(r.permutation(ids))
            junk = set(r.choice(ids, size=int(r.integers(0, n // 2)),
                                replace=False))
            rest = [i for i in ids if i not in junk]
            positives = set(r.choice(rest, size=int(r.integers(1, len(rest))),
                                     replace=False))
            mine = average_precision(ranked(order), positives, junk)
            oracle = average_precision_loop(order, positives, junk)
            assert mine == oracle

    def test_empty_positives_rejected(self):
        with pytest.raises(ValueError):
            average_precision(ranked(["a"]), set(), set())
        with pytest.raises(ValueError):
            average_precision(ranked(["a", "b"]), {"a"}, {"a"})


class TestPrecisionAt10:
    def test_full_top_ten(self):
        ids = [f"p{i}" for i in range(10)] + ["n1", "n2"]
        assert precision_at_10(ranked(ids), set(ids[:10]), set()) == 1.0

    def test_no_hits(self):
        ids = [f"n{i}" for i in range(12)] + ["pos"]
        assert precision_at_10(ranked(ids), {"pos"}, set()) == 0.0

    def test_three_hits(self):
        ids = ["p1", "n1", "p2", "n2", "p3"] + [f"m{i}" for i in range(8)]
        out = precision_at_10(ranked(ids), {"p1", "p2", "p3"}, set())
        assert out == 0.3

    def test_junk_invariance(self):
        ids = ["p1", "n1", "p2"] + [f"n{i}" for i in range(2, 12)]
        base = precision_at_10(ranked(ids), {"p1", "p2"}, set())
        spiked_ids = ["j0"] + ids[:2] + ["j1"] + ids[2:]
        out = precision_at_10(ranked(spiked_ids), {"p1", "p2"}, {"j0", "j1"})
        assert base == out


class TestGroundTruth:
    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            QueryGroundTruth(id="q", easy=["a"], hard=["a"], junk=[])

    def test_query_in_own_lists_rejected(self):
        with pytest.raises(ValueError):
            QueryGroundTruth(id="q", easy=["q"], hard=[], junk=[])

    def test_protocol_sets(self):
        gt = QueryGroundTruth(id="q", easy=["e"], hard=["h"], junk=["j"])
        assert protocol_sets(gt, "medium") == ({"e", "h"}, {"j"})
        assert protocol_sets(gt, "hard") == ({"h"}, {"j", "e"})
        with pytest.raises(ValueError):
            protocol_sets(gt, "easy")

    def test_medium_positives_superset_of_hard(self):
        for _ in range(30):
            ids = [f"i{k}" for k in range(12)]
            picks = rng.permutation(ids)
            gt = QueryGroundTruth(id="q", easy=list(picks[:4]),
                                  hard=list(picks[4:7]), junk=list(picks[7:9]))
            med_pos, _ = protocol_sets(gt, "medium")
            hard_pos, _ = protocol_sets(gt, "hard")
            assert hard_pos <= med_pos


class TestMapProtocol:
    def _fixture(self):
        # 3 clusters in R^4 plus junk-ish in-betweeners
        base = {
            "qa": [1, 0, 0, 0], "a1": [0.9, 0.1, 0, 0], "a2": [0.8, 0.2, 0, 0],
            "qb": [0, 1, 0, 0], "b1": [0.1, 0.9, 0, 0],
            "qc": [0, 0, 1, 0], "c1": [0, 0.1, 0.9, 0], "c2": [0, 0, 0.8, 0.2],
            "mix": [0.5, 0.5, 0.5, 0.1],
        }
        descs = [Descriptor(id=k, vec=unit(v)) for k, v in base.items()]
        gt = [
            QueryGroundTruth(id="qa", easy=["a1"], hard=["a2"], junk=["mix"]),
            QueryGroundTruth(id="qb", easy=["b1"], hard=[], junk=[]),
            QueryGroundTruth(id="qc", easy=[], hard=["c1", "c2"], junk=["mix"]),
        ]
        return descs, gt

    def test_perfect_single_query(self):
        descs = [Descriptor(id="q", vec=unit([1, 0, 0])),
                 Descriptor(id="p1", vec=unit([0.9, 0.1, 0])),
                 Descriptor(id="p2", vec=unit([0.8, 0.2, 0])),
                 Descriptor(id="n", vec=unit([0, 0, 1]))]
        gt = [QueryGroundTruth(id="q", easy=["p1"], hard=["p2"], junk=[])]
        for protocol in ("medium", "hard"):
            report = map_protocol(descs, gt, protocol)
            assert report.mean_ap == 1.0

    def test_easy_only_query_skipped_under_hard(self):
        descs, gt = self._fixture()
        with pytest.warns(UserWarning, match="no positives"):
            report = map_protocol(descs, gt, "hard")
        assert report.skipped == ["qb"]
        assert "qb" not in report.per_query

    def test_fixture_matches_independent_oracle(self):
        descs, gt = self._fixture()
        pairs = [(d.id, d.vec) for d in descs]
        for protocol in ("medium", "hard"):
            if protocol == "hard":
                with pytest.warns(UserWarning):
                    report = map_protocol(descs, gt, protocol)
            else:
                report = map_protocol(descs, gt, protocol)
            map_o, p10_o = map_protocol_loop(pairs, gt, protocol)
            assert report.mean_ap == map_o
            assert report.mean_p10 == p10_o

    def test_randomized_instances_match_oracle_exactly(self):
        for trial in range(30):
            r = np.random.default_rng(1000 + trial)
            descs, gt = _random_instance(r)
            pairs = [(d.id, d.vec) for d in descs]
            for protocol in ("medium", "hard"):
                import warnings as w
                with w.catch_warnings():
                    w.simplefilter("ignore")
                    report = map_protocol(descs, gt, protocol)
                map_o, p10_o = map_protocol_loop(pairs, gt, protocol)
                assert report.mean_ap == map_o
                assert report.mean_p10 == p10_o

    def test_unknown_id_rejected(self):
        descs, gt = self._fixture()
        gt[0].junk.append("ghost")
        with pytest.raises(ValueError, match="ghost"):
            map_protocol(descs, gt, "medium")


def _random_instance(r, n_db=14, dim=5, n_queries=3):
    ids = [f"d{i}" for i in range(n_db)]
    descs = [Descriptor(id=i, vec=unit(r.standard_normal(dim))) for i in ids]
    gt = []
    for qi in range(n_queries):
        qid = ids[qi]
        others = [i for i in ids if i != qid]
        r.shuffle(others)
        n_easy = int(r.integers(0, 4))
        n_hard = int(r.integers(0, 4))
        n_junk = int(r.integers(0, 3))
        gt.append(QueryGroundTruth(
            id=qid,
            easy=others[:n_easy],
            hard=others[n_easy:n_easy + n_hard],
            junk=others[n_easy + n_hard:n_easy + n_hard + n_junk]))
    return descs, gt
