import math

import pytest
import torch

from spritediff.attention import (
    AugmentedTemporalAttention,
    GatedSelfAttention,
    MultiHeadAttention,
)

torch.set_num_threads(1)


def dense_attention_oracle(seq: torch.Tensor, mha: MultiHeadAttention) -> torch.Tensor:
    """Brute-force multi-head attention over one [N, d] sequence, computed
    row by row with explicit softmax sums."""
    n, d = seq.shape
    h = mha.num_heads
    hd = mha.head_dim
    q = seq @ mha.to_q.weight.t()
    k = seq @ mha.to_k.weight.t()
    v = seq @ mha.to_v.weight.t()
    out = torch.zeros(n, d, dtype=seq.dtype)
    for head in range(h):
        sl = slice(head * hd, (head + 1) * hd)
        for i in range(n):
            scores = torch.stack(
                [(q[i, sl] @ k[j, sl]) / math.sqrt(hd) for j in range(n)]
            )
            w = torch.softmax(scores, dim=0)
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(n))
    return out @ mha.to_out.weight.t() + mha.to_out.bias


class TestGatedSelfAttention:
    def test_zero_gate_is_exact_identity(self):
        torch.manual_seed(0)
        gsa = GatedSelfAttention(dim=16, num_heads=4, gate_init=0.0)
        z = torch.randn(5, 16)
        f = torch.randn(3, 16)
        assert torch.equal(gsa(z, f), z)
        assert torch.equal(gsa(z, torch.randn(7, 16)), z)
        assert torch.equal(gsa(z, None), z)

    def test_output_token_count_ignores_m(self):
        torch.manual_seed(1)
        gsa = GatedSelfAttention(dim=8, num_heads=2, gate_init=0.5)
        z = torch.randn(4, 8)
        for m in (0, 1, 5):
            f = torch.randn(m, 8)
            assert gsa(z, f if m else None).shape == (4, 8)

    def test_matches_dense_concat_oracle(self):
        # N=2 visual tokens, M=1 subject token, d=4, fixed weights
        torch.manual_seed(7)
        gsa = GatedSelfAttention(dim=4, num_heads=1, gate_init=0.8).double()
        z = torch.randn(2, 4, dtype=torch.float64)
        f = torch.randn(1, 4, dtype=torch.float64)
        got = gsa(z, f)
        seq = torch.cat([z, f], dim=0)
        attn = dense_attention_oracle(seq, gsa.attn)
        want = z + math.tanh(0.8) * attn[:2]
        assert torch.allclose(got, want, atol=1e-6)

    def test_matches_dense_oracle_multihead_batched(self):
        torch.manual_seed(9)
        gsa = GatedSelfAttention(dim=8, num_heads=2, gate_init=-0.3).double()
        z = torch.randn(2, 3, 8, dtype=torch.float64)
        f = torch.randn(2, 2, 8, dtype=torch.float64)
        got = gsa(z, f)
        for b in range(2):
            seq = torch.cat([z[b], f[b]], dim=0)
            want = z[b] + math.tanh(-0.3) * dense_attention_oracle(seq, gsa.attn)[:3]
            assert torch.allclose(got[b], want, atol=1e-6)

    def test_m_zero_degenerates_to_plain_self_attention(self):
        torch.manual_seed(3)
        gsa = GatedSelfAttention(dim=8, num_heads=2, gate_init=0.4).double()
        z = torch.randn(3, 8, dtype=torch.float64)
        want = z + math.tanh(0.4) * dense_attention_oracle(z, gsa.attn)
        assert torch.allclose(gsa(z, torch.zeros(0, 8, dtype=torch.float64)), want, atol=1e-6)
        assert torch.allclose(gsa(z, None), want, atol=1e-6)

    def test_feature_dim_mismatch(self):
        gsa = GatedSelfAttention(dim=8, num_heads=2)
        with pytest.raises(ValueError):
            gsa(torch.randn(3, 8), torch.randn(2, 6))


def plane_attention_loop_oracle(z_t: torch.Tensor, mha: MultiHeadAttention, axis: str) -> torch.Tensor:
    """Independent oracle: run attention over each TX row (or TY column)
    sequence separately and scatter results back to [T, H, W, C]."""
    T, H, W, C = z_t.shape
    out = torch.zeros_like(z_t)
    if axis == "tx":
        for h in range(H):
            seq = z_t[:, h].reshape(T * W, C)  # frame-major ordering
            res = mha(seq[None])[0]
            out[:, h] = res.reshape(T, W, C)
    else:
        for w in range(W):
            seq = z_t[:, :, w].reshape(T * H, C)
            res = mha(seq[None])[0]
            out[:, :, w] = res.reshape(T, H, C)
    return out


class TestAugmentedTemporalAttention:
    @pytest.mark.parametrize("shape", [(1, 2, 3, 8), (4, 3, 5, 8), (8, 2, 2, 8)])
    def test_shape_contract(self, shape):
        torch.manual_seed(0)
        ata = AugmentedTemporalAttention(dim=8, num_heads=2)
        z = torch.randn(*shape)
        assert ata(z).shape == shape

    def test_planes_match_per_slice_loop_oracle(self):
        torch.manual_seed(5)
        gen = torch.Generator().manual_seed(12)
        for trial in range(20):
            t = int(torch.randint(1, 9, (1,), generator=gen))
            if t not in (1, 2, 4, 8):
                t = [1, 2, 4, 8][trial % 4]
            h = int(torch.randint(1, 5, (1,), generator=gen))
            w = int(torch.randint(1, 5, (1,), generator=gen))
            ata = AugmentedTemporalAttention(dim=8, num_heads=2)
            z = torch.randn(t, h, w, 8, generator=gen)
            tokens = z.permute(1, 2, 0, 3).reshape(h * w, t, 8)
            z_t = z + ata.temporal(tokens).reshape(h, w, t, 8).permute(2, 0, 1, 3)
            want = (
                plane_attention_loop_oracle(z_t, ata.plane_tx, "tx")
                + plane_attention_loop_oracle(z_t, ata.plane_ty, "ty")
                + z_t
                + z
            )
            got = ata(z)
            assert (got - want).abs().max().item() < 1e-5, f"trial {trial} t={t} h={h} w={w}"

    def test_zeroed_projections_double_the_input(self):
        torch.manual_seed(2)
        ata = AugmentedTemporalAttention(dim=8, num_heads=2)
        ata.zero_init_outputs()
        z = torch.randn(4, 3, 3, 8)
        assert torch.allclose(ata(z), 2 * z, atol=1e-7)

    def test_rejects_wrong_rank(self):
        ata = AugmentedTemporalAttention(dim=8)
        with pytest.raises(ValueError):
            ata(torch.randn(3, 8))

    def test_single_frame_still_well_defined(self):
        torch.manual_seed(4)
        ata = AugmentedTemporalAttention(dim=8, num_heads=2)
        z = torch.randn(1, 4, 4, 8)
        out = ata(z)
        assert out.shape == z.shape and torch.isfinite(out).all()
