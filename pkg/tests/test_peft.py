import numpy as np
import pytest

from lords.core.blockwise import blockwise_quantize, dequantize
from lords.core.codebook import build_codebook
from lords.core.errors import ConfigError, QatDivergenceError, RankError, ShapeError
from lords.core.peft import (additive_delta_rank_reference, effective_rank, frozen_code_cache, make_peft_task,
                             merge_factors, merged_dequantize, peft_delta, PeftConfig, toy_peft_train)
from lords.core.refine import refine_to_tensor, RefineConfig
from lords.core.ste import fake_quant_backward, RegressionData, regression_loss
from lords.core.tensors import CodebookId, FactorPair, QuantizedTensor


NF4 = build_codebook(CodebookId.NF4)


def instance(rng, n=16, m=16, r=2):
    codes = rng.integers(0, NF4.size, size=(n, m))
    base = FactorPair(b=rng.standard_normal((n, r)), a=rng.standard_normal((r, m)))
    tuned = FactorPair(b=rng.standard_normal((n, r)), a=rng.standard_normal((r, m)))
    q = QuantizedTensor(rows=n, cols=m, codebook_id=CodebookId.NF4, codes=codes, scale_repr=base)
    return q, base, tuned


class TestDelta:
    def test_identity_adaptation(self, rng):
        q, base, _ = instance(rng)
        assert np.all(peft_delta(q.codes, NF4, base, base) == 0.0)

    def test_zero_codes(self, rng):
        q, base, tuned = instance(rng)
        codes = np.full_like(q.codes, NF4.zero_index)
        assert np.all(peft_delta(codes, NF4, base, tuned) == 0.0)

    def test_loop_oracle(self, rng):
        q, base, tuned = instance(rng, 6, 5, 2)
        delta = peft_delta(q.codes, NF4, base, tuned)
        for i in range(6):
            for j in range(5):
                s_new = sum(tuned.b[i, k] * tuned.a[k, j] for k in range(2))
                s_old = sum(base.b[i, k] * base.a[k, j] for k in range(2))
                assert delta[i, j] == pytest.approx(NF4.levels[q.codes[i, j]] * (s_new - s_old), abs=1e-12)

    def test_antisymmetric(self, rng):
        q, base, tuned = instance(rng)
        np.testing.assert_array_equal(peft_delta(q.codes, NF4, base, tuned),
                                      -peft_delta(q.codes, NF4, tuned, base))

    def test_rank_mismatch(self, rng):
        q, base, _ = instance(rng)
        other = FactorPair(b=np.ones((16, 3)), a=np.ones((3, 16)))
        with pytest.raises(RankError):
            peft_delta(q.codes, NF4, base, other)

    def test_code_shape_mismatch(self, rng):
        _, base, tuned = instance(rng)
        with pytest.raises(ShapeError):
            peft_delta(np.zeros((4, 4), dtype=np.int64), NF4, base, tuned)


class TestMerge:
    def test_unchanged_factors(self, rng):
        q, base, _ = instance(rng)
        np.testing.assert_array_equal(merged_dequantize(q.codes, NF4, base), dequantize(q))

    def test_scalar_hand_case(self):
        codes = np.array([[NF4.size - 1]])
        base = FactorPair(b=np.array([[2.0]]), a=np.array([[1.0]]))
        tuned = FactorPair(b=np.array([[3.0]]), a=np.array([[1.0]]))
        q = QuantizedTensor(rows=1, cols=1, codebook_id=CodebookId.NF4, codes=codes, scale_repr=base)
        assert merged_dequantize(codes, NF4, tuned)[0, 0] == 3.0
        assert dequantize(q)[0, 0] + peft_delta(codes, NF4, base, tuned)[0, 0] == 3.0

    def test_merge_identity(self, rng):
        for _ in range(100):
            q, _, tuned = instance(rng, int(rng.integers(2, 20)), int(rng.integers(2, 20)), 1)
            split = dequantize(q) + peft_delta(q.codes, NF4, q.scale_repr, tuned)
            assert np.max(np.abs(merged_dequantize(q.codes, NF4, tuned) - split)) < 1e-12

    def test_merge_keeps_codes(self, rng):
        q, _, tuned = instance(rng)
        merged = merge_factors(q, tuned)
        np.testing.assert_array_equal(merged.codes, q.codes)
        assert merged.scale_repr is tuned

    def test_merge_needs_factors(self, rng):
        q = blockwise_quantize(rng.standard_normal((4, 8)), 4, NF4)
        with pytest.raises(ShapeError):
            merge_factors(q, FactorPair(b=np.ones((4, 1)), a=np.ones((1, 8))))


class TestEffectiveRank:
    def test_zero(self):
        assert effective_rank(np.zeros((5, 5))) == 0

    def test_rank_one(self, rng):
        assert effective_rank(np.outer(rng.standard_normal(8), rng.standard_normal(6)), 1e-8) == 1

    def test_tolerance_range(self):
        with pytest.raises(ConfigError):
            effective_rank(np.eye(3), 1.0)

    def test_multiplicative_exceeds_factor_rank(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            q, base, tuned = instance(rng, 64, 64, 4)
            multiplicative = effective_rank(peft_delta(q.codes, NF4, base, tuned), 1e-6)
            additive = additive_delta_rank_reference(rng.standard_normal((64, 4)), rng.standard_normal((4, 64)), 1e-6)
            assert multiplicative > 4
            assert additive <= 4

    def test_additive_reference(self, rng):
        assert additive_delta_rank_reference(np.zeros((64, 4)), np.zeros((4, 64))) == 0
        b, a = rng.standard_normal((128, 32)), rng.standard_normal((32, 128))
        assert additive_delta_rank_reference(b, a, 1e-10) == 32

    def test_additive_shape_check(self):
        with pytest.raises(ShapeError):
            additive_delta_rank_reference(np.ones((4, 2)), np.ones((3, 4)))


def refined_base(seed=0, n=16, m=32, r=2):
    w = np.random.default_rng(seed).standard_normal((n, m))
    q, _ = refine_to_tensor(w, RefineConfig(rank=r, steps=20))
    return q


class TestToyPeft:
    def test_frozen_code_gradient_is_exact(self, rng):
        base = refined_base()
        f = base.scale_repr
        cache = frozen_code_cache(base.codes, NF4, f)
        upstream = rng.standard_normal((16, 32))
        grad_w, grad_b, grad_a = fake_quant_backward(upstream, cache, f)
        np.testing.assert_allclose(grad_b, (upstream * NF4.values(base.codes)) @ f.a.T, atol=1e-12)
        np.testing.assert_allclose(grad_a, f.b.T @ (upstream * NF4.values(base.codes)), atol=1e-12)

    def test_training_lowers_loss_and_keeps_codes(self):
        base = refined_base()
        data = make_peft_task(base, seed=3)
        result = toy_peft_train(data, base, base.scale_repr, PeftConfig(steps=200))
        assert len(result.losses) == 201
        assert result.final_loss < result.losses[0]

        merged = merge_factors(base, result.factors)
        np.testing.assert_array_equal(merged.codes, base.codes)
        loss, _ = regression_loss(dequantize(merged), data)
        assert loss == pytest.approx(result.final_loss, rel=1e-9)

    def test_trained_update_exceeds_factor_rank(self):
        base = refined_base(seed=1)
        result = toy_peft_train(make_peft_task(base, seed=1), base, base.scale_repr, PeftConfig(steps=50))
        delta = peft_delta(base.codes, NF4, base.scale_repr, result.factors)
        assert effective_rank(delta, 1e-6) > 2

    def test_zero_steps_returns_start(self):
        base = refined_base()
        result = toy_peft_train(make_peft_task(base, seed=0), base, base.scale_repr, PeftConfig(steps=0))
        assert len(result.losses) == 1
        np.testing.assert_array_equal(result.factors.b, base.scale_repr.b)
        assert effective_rank(peft_delta(base.codes, NF4, base.scale_repr, result.factors)) == 0

    def test_task_is_seeded(self):
        base = refined_base()
        a, b = make_peft_task(base, seed=4), make_peft_task(base, seed=4)
        np.testing.assert_array_equal(a.y, b.y)

    def test_divergence_detected(self):
        base = refined_base()
        data = make_peft_task(base, seed=0)
        overflowing = RegressionData(x=data.x * 1e160, y=data.y * 1e160)
        with pytest.raises(QatDivergenceError):
            toy_peft_train(overflowing, base, base.scale_repr, PeftConfig(steps=3))

    def test_needs_factored_base(self, rng):
        q = blockwise_quantize(rng.standard_normal((4, 8)), 4, NF4)
        data = RegressionData(x=np.ones((8, 3)), y=np.ones((4, 3)))
        with pytest.raises(ShapeError):
            toy_peft_train(data, q, FactorPair(b=np.ones((4, 1)), a=np.ones((1, 8))), PeftConfig())

    def test_rank_mismatch(self):
        base = refined_base()
        start = FactorPair(b=np.ones((16, 3)), a=np.ones((3, 32)))
        with pytest.raises(RankError):
            toy_peft_train(make_peft_task(base, seed=0), base, start, PeftConfig(steps=1))

    def test_negative_lr_rejected(self):
        with pytest.raises(ConfigError):
            PeftConfig(lr=-1.0)
