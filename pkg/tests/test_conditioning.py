import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from matfuse.conditioning import AttentionInputs, attention, decoupled_attention, lambda_schedule
from matfuse.core import BinaryMask, ValidationError


def make_inputs(seed=0, n=6, lam=0.7, mask_values=None):
    rng = np.random.default_rng(seed)
    t = lambda *shape: torch.from_numpy(rng.standard_normal(shape))
    mask = None
    if mask_values is not None:
        mask = BinaryMask(np.asarray(mask_values, dtype=np.uint8), space="attention")
    return AttentionInputs(
        queries=t(n, 4),
        text_keys=t(3, 4),
        text_values=t(3, 5),
        image_keys=t(2, 4),
        image_values=t(2, 5),
        lam=lam,
        level_mask=mask,
    )


class TestAttention:
    def test_matches_explicit_loop(self):
        rng = np.random.default_rng(5)
        q = torch.from_numpy(rng.standard_normal((3, 4)))
        k = torch.from_numpy(rng.standard_normal((5, 4)))
        v = torch.from_numpy(rng.standard_normal((5, 2)))
        out = attention(q, k, v)
        for i in range(3):
            scores = np.array([float(q[i] @ k[j]) / math.sqrt(4) for j in range(5)])
            weights = np.exp(scores) / np.exp(scores).sum()
            expected = sum(weights[j] * v[j].numpy() for j in range(5))
            assert np.allclose(out[i].numpy(), expected, atol=1e-12)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValidationError, match="keys"):
            attention(torch.zeros(2, 4), torch.zeros(3, 5), torch.zeros(3, 2))


class TestDecoupledAttention:
    def test_lam_zero_is_text_only_bitwise(self):
        inputs = make_inputs(lam=0.0, mask_values=[[1, 1, 1], [1, 1, 1]])
        text_only = attention(inputs.queries, inputs.text_keys, inputs.text_values)
        assert torch.equal(decoupled_attention(inputs), text_only)

    def test_all_zero_mask_is_text_only_bitwise(self):
        inputs = make_inputs(lam=0.9, mask_values=[[0, 0, 0], [0, 0, 0]])
        text_only = attention(inputs.queries, inputs.text_keys, inputs.text_values)
        assert torch.equal(decoupled_attention(inputs), text_only)

    def test_masked_rows_equal_text_rows_exactly(self):
        inputs = make_inputs(lam=1.3, mask_values=[[1, 0, 1], [0, 1, 0]])
        out = decoupled_attention(inputs)
        text_only = attention(inputs.queries, inputs.text_keys, inputs.text_values)
        gate = np.asarray([1, 0, 1, 0, 1, 0])
        for q in range(6):
            if gate[q] == 0:
                assert torch.equal(out[q], text_only[q])
            else:
                assert not torch.equal(out[q], text_only[q])

    @given(st.floats(0.0, 1.5), st.floats(0.0, 1.5))
    def test_affine_in_lam(self, lam_a, lam_b):
        base = make_inputs(lam=0.0, mask_values=[[1, 0, 1], [1, 1, 0]])

        def at(lam):
            inputs = make_inputs(lam=lam, mask_values=[[1, 0, 1], [1, 1, 0]])
            return decoupled_attention(inputs)

        mid = at((lam_a + lam_b) / 2)
        avg = (at(lam_a) + at(lam_b)) / 2
        assert torch.allclose(mid, avg, atol=1e-9)

    def test_mask_cell_count_must_match_queries(self):
        with pytest.raises(ValidationError, match="level_mask"):
            make_inputs(n=5, mask_values=[[1, 1], [1, 1]])

    def test_value_dim_mismatch_rejected(self):
        rng = np.random.default_rng(0)
        t = lambda *shape: torch.from_numpy(rng.standard_normal(shape))
        with pytest.raises(ValidationError, match="image_values"):
            AttentionInputs(
                queries=t(2, 4),
                text_keys=t(3, 4),
                text_values=t(3, 5),
                image_keys=t(2, 4),
                image_values=t(2, 4),
                lam=0.5,
            )

    def test_negative_lam_rejected(self):
        with pytest.raises(ValidationError, match="lam"):
            make_inputs(lam=-0.1)


class TestLambdaSchedule:
    def test_constant_by_default(self):
        assert lambda_schedule(0.8, 0) == 0.8
        assert lambda_schedule(0.8, 49) == 0.8

    @given(st.integers(0, 60))
    def test_ramp_monotone_and_capped(self, step):
        lam = lambda_schedule(1.2, step, ramp_steps=20)
        lam_next = lambda_schedule(1.2, step + 1, ramp_steps=20)
        assert 0.0 <= lam <= lam_next <= 1.2
        if step >= 19:
            assert lam == 1.2
