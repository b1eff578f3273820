import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixedqa.data import CoarseLabel, Document, Example, FineLabel
from mixedqa.evaluate import (
    Measurement, UndefinedGainError, analyze_predictive, distribution_stats, evaluate_fine,
    evaluate_passage_given, gain, passage_mrr, promote_hidden, reciprocal_rank, report, summarize,
    token_f1,
)
from mixedqa.model import ModelConfig, ModelParams


class TestTokenF1:
    def test_exact(self):
        assert token_f1(FineLabel(0, 2, 4), FineLabel(0, 2, 4)) == 1.0

    def test_wrong_paragraph(self):
        assert token_f1(FineLabel(1, 2, 4), FineLabel(0, 2, 4)) == 0.0

    def test_disjoint(self):
        assert token_f1(FineLabel(0, 0, 1), FineLabel(0, 2, 4)) == 0.0

    def test_partial(self):
        # one of two predicted tokens overlaps one gold token: P = 1/2, R = 1
        assert token_f1(FineLabel(0, 3, 4), FineLabel(0, 4, 4)) == pytest.approx(2 / 3)

    @given(st.integers(0, 20), st.integers(0, 5), st.integers(0, 20), st.integers(0, 5))
    def test_symmetric_and_bounded(self, s1, w1, s2, w2):
        a, b = FineLabel(0, s1, s1 + w1), FineLabel(0, s2, s2 + w2)
        assert token_f1(a, b) == pytest.approx(token_f1(b, a))
        assert 0.0 <= token_f1(a, b) <= 1.0


def peaked_params(vocab=30):
    """Start/end weights that put almost all mass on the token that repeats question token 0.

    Feature layout is [emb, q_tok, emb * q_tok, overlap]; the overlap indicator
    drives the first hidden unit.
    """
    cfg = ModelConfig(vocab_size=vocab, d_emb=2, d_hid=2)
    params = ModelParams.zeros(cfg)
    params.arrays["w1"][cfg.d_feat - 1, 0] = 5.0
    params.arrays["w2"][0, 0] = 5.0
    params.arrays["start"][0] = 40.0
    params.arrays["end"][0] = 40.0
    return params


def fine_example(paras, question, label, ident="d0-q0"):
    return Example(ident, question, Document(paras), label)


class TestEndToEndMetrics:
    def test_perfect_model(self):
        exs = [fine_example(((1, 2, 3), (4, 9, 5)), (9,), FineLabel(1, 1, 1)),
               fine_example(((7, 1), (2, 3, 4)), (7,), FineLabel(0, 0, 0), "d1-q0")]
        params = peaked_params()
        assert evaluate_fine(params, exs) == 1.0
        assert evaluate_passage_given(params, exs) == 1.0
        assert passage_mrr(params, exs) == 1.0

    def test_passage_given_at_least_fine(self, tiny_params, tiny_bundle):
        split = tiny_bundle.test_fine
        assert evaluate_passage_given(tiny_params, split, 4) >= evaluate_fine(tiny_params, split, 4)


class TestMRR:
    def test_top(self):
        assert reciprocal_rank([0.1, 0.9, 0.3], 1) == 1.0

    def test_second(self):
        assert reciprocal_rank([0.1, 0.9, 0.3], 2) == 0.5

    def test_ties_take_worst_rank(self):
        assert reciprocal_rank([0.5, 0.5, 0.1], 0) == 0.5

    def test_random_scores(self):
        rng = np.random.default_rng(0)
        rr = [reciprocal_rank(rng.normal(size=4), int(rng.integers(4))) for _ in range(20000)]
        # (1 + 1/2 + 1/3 + 1/4) / 4
        assert np.mean(rr) == pytest.approx(25 / 48, abs=0.01)


class TestDistributionStats:
    @pytest.mark.parametrize("n", [1, 2, 7, 50])
    def test_uniform(self, n):
        h, x, e = distribution_stats(np.full(n, 1 / n), 0)
        assert h == pytest.approx(math.log(n), abs=1e-10)
        assert x == pytest.approx(math.log(n), abs=1e-10)
        assert e == pytest.approx((1 - 1 / n) ** 2 + (n - 1) / n ** 2, abs=1e-10)

    def test_point_mass(self):
        p = np.zeros(9)
        p[4] = 1.0
        assert distribution_stats(p, 4) == (0.0, 0.0, 0.0)


def uniform_coarse_split():
    paras = ((1, 2, 3), (4, 5, 6, 7), (8, 9))
    return [Example("d0-q0", (1,), Document(paras), CoarseLabel(1), hidden_fine=FineLabel(1, 0, 2)),
            Example("d1-q0", (2,), Document(paras[:2]), CoarseLabel(0), hidden_fine=FineLabel(0, 1, 1))]


class TestAnalyze:
    def test_uniform_closed_form(self):
        split = uniform_coarse_split()
        res = analyze_predictive(ModelParams.zeros(ModelConfig(vocab_size=20, d_emb=2, d_hid=2)), split, 3)
        logs = [math.log(9), math.log(7)]
        assert res.entropy == pytest.approx(np.mean(logs), abs=1e-10)
        assert res.xent_gold == pytest.approx(np.mean(logs), abs=1e-10)
        assert res.n_examples == 2

    def test_point_mass_closed_form(self):
        paras = ((1, 2, 3), (4, 9, 5))
        split = [Example("d0-q0", (9,), Document(paras), CoarseLabel(1), hidden_fine=FineLabel(1, 1, 1))]
        res = analyze_predictive(peaked_params(), split)
        assert abs(res.entropy) < 1e-10 and abs(res.xent_gold) < 1e-10 and abs(res.err2_gold) < 1e-10
        assert res.passage_mrr == 1.0

    def test_needs_hidden_labels(self):
        ex = Example("d0-q0", (1,), Document(((1, 2),)), CoarseLabel(0))
        with pytest.raises(ValueError):
            analyze_predictive(peaked_params(), [ex])


class TestGain:
    def test_endpoints(self):
        assert gain(62.0, 62.0, 71.2) == 0.0
        assert gain(71.2, 62.0, 71.2) == 1.0

    def test_reference_value(self):
        assert gain(65.8, 62.0, 71.2) == pytest.approx(0.413, abs=5e-4)

    @given(st.floats(-5, 5), st.floats(0.1, 10))
    def test_affine_invariant(self, shift, k):
        assert gain(k * 65.8 + shift, k * 62.0 + shift, k * 71.2 + shift) == pytest.approx(
            gain(65.8, 62.0, 71.2), rel=1e-9)

    def test_undefined(self):
        with pytest.raises(UndefinedGainError):
            gain(0.5, 0.6, 0.6)


def test_promote_hidden(tiny_bundle):
    up = promote_hidden(tiny_bundle)
    assert up.coarse_train == []
    assert len(up.fine_train) == len(tiny_bundle.fine_train) + len(tiny_bundle.coarse_train)
    assert all(ex.is_fine and ex.hidden_fine is None for ex in up.fine_train)
    assert up.test_fine == tiny_bundle.test_fine


class TestReport:
    def measurements(self):
        out = []
        for seed, (a, b) in enumerate([(0.5, 0.7), (0.6, 0.8), (0.7, 0.6)]):
            out.append(Measurement("5%", "supervised", seed, "fine_f1", a))
            out.append(Measurement("5%", "mtl", seed, "fine_f1", b))
        return out

    def test_summary(self):
        mean, std = summarize([0.5, 0.6, 0.7])
        assert mean == pytest.approx(0.6) and std == pytest.approx(0.1)
        assert summarize([0.3]) == (0.3, 0.0)

    def test_table_and_json(self, tmp_path):
        text, summary = report(self.measurements(), ["fine_f1"], tmp_path, title="t1", scale={"fine_f1": 100})
        assert "60.000 (+- 10.000)" in text
        assert summary["rows"][0]["metrics"]["fine_f1"]["n"] == 3
        assert (tmp_path / "t1.txt").read_text() == text

    def test_byte_stable(self, tmp_path):
        report(self.measurements(), ["fine_f1"], tmp_path / "a", title="t")
        report(list(reversed(self.measurements()))[::-1], ["fine_f1"], tmp_path / "b", title="t")
        for name in ("t.txt", "t.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_random_init_baseline_regression():
    # Observed once and frozen. Not near zero: the question-overlap feature already
    # points an untrained encoder at tokens shared with the question.
    from mixedqa.data import GenConfig, generate
    bundle = generate(GenConfig(num_documents=60))
    params = ModelParams.init(ModelConfig(vocab_size=200), np.random.default_rng(0))
    assert evaluate_fine(params, bundle.test_fine) == pytest.approx(0.1652062752062752, abs=1e-12)


def test_single_example_split_is_token_f1(tiny_params, tiny_bundle):
    from mixedqa.evaluate import predict
    ex = tiny_bundle.test_fine[0]
    pred = predict(tiny_params, [ex], 4)[0]
    assert evaluate_fine(tiny_params, [ex], 4) == token_f1(pred, ex.label)
