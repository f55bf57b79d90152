import json

import numpy as np
import pytest

from bam.core import Alignment, CIState, DataError, DiagGmm, Segment
from bam.mphone import MPhoneKey, encode_key, state_chain
from bam.rescore import (
    HitMatrix,
    HypothesisScore,
    NBestEntry,
    NBestList,
    SegmentScore,
    collect_pool,
    combine_scores,
    hit_ratio_report,
    load_nbest,
    order_hypotheses,
    read_nbest_records,
    rerank,
    rescore_segment,
)
from bam.store import DictModel
from bam.synth import synth_corpus, write_synth

ACTION = "sil ae k sh ih n sil".split()


def entry_for(symbols, frames_per_state=2, hyp=("action",), lm=-1.0, fp=-1.0):
    chain = state_chain(symbols)
    segs = tuple(
        Segment(s, k * frames_per_state, (k + 1) * frames_per_state, np.full(frames_per_state, fp))
        for k, s in enumerate(chain)
    )
    return NBestEntry(tuple(hyp), lm, list(symbols), Alignment("u", segs))


def unit_gmm(dim=1, mean=0.0):
    return DiagGmm([1.0], np.full((1, dim), mean), np.ones((1, dim)))


class TestPool:
    def test_interior_chain(self):
        e = entry_for(ACTION)
        pool = collect_pool([e], 3)
        key = MPhoneKey(CIState("ih", 1), ("sh", "k", "ae"), ("n", "sil"))
        for enc in ("ih_1 / sh n k sil ae ~", "ih_1 / sh n k sil ~ ~", "ih_1 / sh n ~ ~ ~ ~"):
            assert enc in pool
        assert encode_key(key, 3) in pool
        ih_keys = {k for k in pool if k.startswith("ih_1 ")}
        assert len(ih_keys) == 3

    def test_duplicates(self):
        a, b = entry_for(ACTION), entry_for(ACTION)
        assert collect_pool([a, b], 2) == collect_pool([a], 2)

    def test_shared_segments(self):
        other = "sil ae k sh ih m sil".split()
        p1, p2 = collect_pool([entry_for(ACTION)], 1), collect_pool([entry_for(other)], 1)
        both = collect_pool([entry_for(ACTION), entry_for(other)], 1)
        assert both == p1 | p2 and len(both) < len(p1) + len(p2)


class TestSegmentScoring:
    key = MPhoneKey(CIState("ih", 1), ("sh", "k", "ae"), ("n", "sil"))
    frames = np.zeros((10, 1))
    seg = Segment(CIState("ih", 1), 0, 10, np.full(10, -2.0))

    def test_full_order_no_penalty(self):
        g = unit_gmm()
        s = rescore_segment(self.seg, self.key, self.frames, {encode_key(self.key, 3): g}, 3)
        assert s.hit == (3, 2) and s.backoff_levels == 0
        assert s.score(5.0) == pytest.approx(float(g.loglik(self.frames).sum()))

    def test_triphone_only(self):
        g = unit_gmm()
        s = rescore_segment(self.seg, self.key, self.frames, {"ih_1 / sh n ~ ~ ~ ~": g}, 3)
        assert s.hit == (1, 1)
        assert s.score(0.2) == pytest.approx(float(g.loglik(self.frames).sum()) - 10 * 0.4)

    def test_fallback(self):
        s = rescore_segment(self.seg, self.key, self.frames, {}, 3)
        assert s.hit is None
        assert s.score(0.5) == pytest.approx(-20.0 - 0.5 * 3 * 10)

    def test_prefers_longest(self):
        retrieved = {"ih_1 / sh n ~ ~ ~ ~": unit_gmm(mean=5.0), "ih_1 / sh n k sil ~ ~": unit_gmm()}
        assert rescore_segment(self.seg, self.key, self.frames, retrieved, 3).hit == (2, 2)


class TestCombine:
    def test_arithmetic(self):
        assert combine_scores(-10, -20, -3, 0.6, 2) == pytest.approx(-10.0)

    def test_lambda_zero(self):
        assert combine_scores(-10, -20, -3, 0.0, 2) == pytest.approx(-13.0)

    def test_lambda_one_ignores_bam(self):
        assert combine_scores(-10, float("nan"), -3, 1.0, 2) == pytest.approx(-8.0)

    @pytest.mark.parametrize("lam, w", [(-0.1, 1), (1.1, 1), (0.5, 0)])
    def test_invalid(self, lam, w):
        with pytest.raises(ValueError):
            combine_scores(0, 0, 0, lam, w)


def random_scores(rng, n=8):
    out = []
    for r in range(n):
        e = NBestEntry((f"h{r}",), float(rng.normal(-5, 2)))
        segs = [
            SegmentScore(float(rng.normal(-30, 5)), int(rng.integers(0, 3)), int(rng.integers(1, 6)), None)
            for _ in range(3)
        ]
        out.append(HypothesisScore(r, e, float(rng.normal(-100, 10)), e.lm_logprob, segs))
    return out


class TestOrdering:
    def test_ties_keep_rank(self):
        scores = [HypothesisScore(r, NBestEntry((str(r),), -1.0), -5.0, -1.0) for r in range(4)]
        assert [h.rank for h in order_hypotheses(scores, 0.5, 1.0, 0.0)] == [0, 1, 2, 3]

    def test_scaling_keeps_argmax(self, rng):
        for _ in range(50):
            scores = random_scores(rng)
            c = float(rng.uniform(0.2, 5))
            scaled = [
                HypothesisScore(
                    h.rank, h.entry, c * h.first_pass, h.lm,
                    [SegmentScore(c * s.loglik, s.backoff_levels, s.num_frames, s.hit) for s in h.segments],
                )
                for h in scores
            ]
            top = order_hypotheses(scores, 0.4, 3.0, 0.0)[0].rank
            assert order_hypotheses(scaled, 0.4, 3.0 * c, 0.0)[0].rank == top

    def test_penalty_gap_widens(self, rng):
        for _ in range(50):
            scores = random_scores(rng)
            full = HypothesisScore(99, NBestEntry(("f",), -1.0), -100.0, -1.0,
                                   [SegmentScore(-90.0, 0, 4, (2, 2))])
            for h in scores:
                gaps = [full.total(0.3, 2.0, f) - h.total(0.3, 2.0, f) for f in (0.0, 0.5, 1.0, 4.0)]
                assert all(b >= a - 1e-9 for a, b in zip(gaps, gaps[1:]))


class TestHitMatrix:
    def test_all_full_order(self):
        h = HitMatrix(2)
        h.add((2, 2), 7)
        cells, fb = h.percentages()
        assert cells[2, 2] == 100.0 and fb == 0.0

    def test_all_fallback(self):
        h = HitMatrix(2)
        h.add(None, 3)
        cells, fb = h.percentages()
        assert fb == 100.0 and cells.sum() == 0.0

    def test_report_layout(self):
        h = HitMatrix(1)
        h.add((1, 1), 3)
        h.add((0, 1), 1)
        lines = hit_ratio_report(h).splitlines()
        assert lines[0].split() == ["left,", "right", "0", "1"]
        assert "75.0%" in lines[3] and "25.0%" in lines[2]
        assert lines[-1].startswith("fallback to first pass: 0.0%")

    def test_empty(self):
        with pytest.raises(ValueError):
            HitMatrix(1).percentages()


@pytest.fixture(scope="module")
def dev_lists(world, baseline, tmp_path_factory):
    d = tmp_path_factory.mktemp("nb")
    corpus = synth_corpus(world, 25, "dev")
    paths = write_synth(d, world, corpus, prefix="dev.")
    lists = load_nbest(paths["nbest"], paths["corpus"], world.lexicon, baseline, True)
    return paths, lists


class TestRerank:
    def test_lambda_one_is_first_pass_order(self, dev_lists, rng):
        _, lists = dev_lists
        empty = DictModel({}, 1)
        for nb in lists:
            keys = sorted(collect_pool(nb.entries, 1))
            rich = DictModel({k: unit_gmm(nb.frames.shape[1], float(rng.normal())) for k in keys}, 1)
            expect = sorted(
                range(len(nb.entries)),
                key=lambda r: (-(nb.entries[r].first_pass_am_loglik / 7.0 + nb.entries[r].lm_logprob), r),
            )
            for model in (empty, rich):
                got, hits = rerank(nb, model, 1, 1.0, 7.0, 3.0)
                assert [h.rank for h in got] == expect

    def test_hit_accounting(self, dev_lists):
        _, lists = dev_lists
        keys = sorted({k for nb in lists for k in collect_pool(nb.entries, 2)})
        model = DictModel({k: unit_gmm(lists[0].frames.shape[1]) for k in keys[::2]}, 2)
        for nb in lists:
            _, hits = rerank(nb, model, 2, 0.5, 1.0, 0.1)
            cells, fb = hits.percentages()
            assert cells.sum() + fb == pytest.approx(100.0, abs=0.01)
            assert hits.total == sum(len(e.alignment.segments) for e in nb.entries)

    def test_nbest_records(self, dev_lists):
        paths, lists = dev_lists
        recs = read_nbest_records(paths["nbest"])
        assert [r["id"] for r in recs] == [nb.utterance_id for nb in lists]
        assert all(len(r["entries"]) == len(nb.entries) for r, nb in zip(recs, lists))

    def test_frames_ref_mismatch(self, dev_lists, world, baseline, tmp_path):
        paths, _ = dev_lists
        recs = read_nbest_records(paths["nbest"])
        recs[0]["frames_ref"] = recs[1]["frames_ref"]
        bad = tmp_path / "bad.jsonl"
        bad.write_text("".join(json.dumps(r) + "\n" for r in recs))
        with pytest.raises(DataError, match="points at"):
            load_nbest(bad, paths["corpus"], world.lexicon, baseline, True)

    def test_malformed_record(self, tmp_path):
        (tmp_path / "x.jsonl").write_text('{"id": "a"}\n')
        with pytest.raises(DataError, match="x.jsonl:1"):
            read_nbest_records(tmp_path / "x.jsonl")

    def test_unalignable_hypothesis_dropped(self, dev_lists, world, baseline):
        paths, lists = dev_lists
        nb = lists[0]
        nb2 = NBestList(nb.utterance_id, nb.frames[:5], [NBestEntry(e.hypothesis, e.lm_logprob) for e in nb.entries])
        scores, hits = rerank(nb2, DictModel({}, 1), 1, 0.5, 1.0, 0.0)
        assert scores == [] and hits.total == 0
