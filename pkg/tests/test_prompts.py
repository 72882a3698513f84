import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from attrprompt.errors import ConfigurationError, InputError
from attrprompt.prompts import (AdditiveConditioner, ClassVocabulary, ContextVector, MultiHeadConditioner,
                                assemble, assemble_additive_ablation, condition, encode_prompts)


def test_context_vector_shape():
    ctx = ContextVector(4, 512, dtype=torch.float32)
    assert ctx.tokens.shape == (4, 512) and ctx.tokens.requires_grad


def test_context_length_must_be_positive():
    with pytest.raises(ConfigurationError):
        ContextVector(0, 8)


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 6), heads=st.sampled_from([1, 2, 4, 8]), batch=st.integers(0, 3))
def test_conditioned_context_shape_equals_context_shape(m, heads, batch):
    cond = MultiHeadConditioner(8, heads, img_dim=8, zero_init_out=False)
    ctx = torch.randn(m, 8, dtype=torch.float64)
    emb = torch.randn(*((batch,) if batch else ()), 8, dtype=torch.float64)
    h = condition(ctx, emb, cond)
    assert h.shape == ((batch, m, 8) if batch else (m, 8))


def test_zero_output_projection_returns_context_exactly():
    cond = MultiHeadConditioner(8, 4, img_dim=6)
    ctx = torch.randn(4, 8, dtype=torch.float64)
    assert torch.equal(cond(ctx, torch.randn(6, dtype=torch.float64)), ctx)


def test_attention_matches_hand_computation_with_single_key():
    # one key/value: softmax over one element is 1, so the output is out(v(emb)) for every query
    cond = MultiHeadConditioner(8, 4, img_dim=8, residual=False, zero_init_out=False,
                                generator=torch.Generator().manual_seed(0))
    ctx = torch.randn(3, 8, dtype=torch.float64)
    emb = torch.randn(8, dtype=torch.float64)
    W_v, b_v = cond.v_proj.weight.detach().numpy(), cond.v_proj.bias.detach().numpy()
    W_o, b_o = cond.out_proj.weight.detach().numpy(), cond.out_proj.bias.detach().numpy()
    e = emb.numpy()
    v = [sum(W_v[j, k] * e[k] for k in range(8)) + b_v[j] for j in range(8)]
    want = [sum(W_o[j, k] * v[k] for k in range(8)) + b_o[j] for j in range(8)]
    got = cond(ctx, emb).detach().numpy()
    for row in got:
        np.testing.assert_allclose(row, want, rtol=1e-12)


def test_attention_over_a_sequence_matches_manual_multihead():
    cond = MultiHeadConditioner(8, 2, img_dim=8, residual=True, zero_init_out=False,
                                generator=torch.Generator().manual_seed(1))
    ctx = torch.randn(2, 8, dtype=torch.float64)
    mem = torch.randn(1, 3, 8, dtype=torch.float64)
    got = cond(ctx, mem)[0].detach().numpy()
    P = {n: getattr(cond, n) for n in ("q_proj", "k_proj", "v_proj", "out_proj")}
    lin = lambda name, x: x @ P[name].weight.detach().numpy().T + P[name].bias.detach().numpy()  # noqa: E731
    q, k, v = lin("q_proj", ctx.numpy()), lin("k_proj", mem[0].numpy()), lin("v_proj", mem[0].numpy())
    heads = []
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        s = q[:, sl] @ k[:, sl].T / 2.0
        w = np.exp(s - s.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        heads.append(w @ v[:, sl])
    want = ctx.numpy() + lin("out_proj", np.concatenate(heads, axis=1))
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_heads_must_divide_width():
    with pytest.raises(ConfigurationError):
        MultiHeadConditioner(8, 3)


def test_conditioner_width_mismatch():
    cond = MultiHeadConditioner(8, 2, img_dim=8)
    with pytest.raises(ConfigurationError):
        cond(torch.zeros(4, 7, dtype=torch.float64), torch.zeros(8, dtype=torch.float64))
    with pytest.raises(ConfigurationError):
        cond(torch.zeros(4, 8, dtype=torch.float64), torch.zeros(5, dtype=torch.float64))


def test_additive_conditioning_is_context_plus_projection():
    cond = AdditiveConditioner(8, img_dim=4, generator=torch.Generator().manual_seed(0))
    ctx, emb = torch.randn(3, 8, dtype=torch.float64), torch.randn(4, dtype=torch.float64)
    want = ctx + (cond.proj.weight @ emb + cond.proj.bias)
    assert torch.allclose(cond(ctx, emb), want, atol=1e-14)


def test_assemble_layout(backbone):
    vocab = ClassVocabulary(["kiwi", "zz"], backbone)
    h = torch.randn(4, 8, dtype=torch.float64)
    attr = torch.randn(8, dtype=torch.float64)
    prompts = assemble(h, attr, vocab)
    assert [p.shape[0] for p in prompts] == [4 + 1 + 4, 4 + 1 + 2]
    for p, name in zip(prompts, vocab.names):
        assert torch.equal(p[:4], h)
        assert torch.equal(p[4], attr)
        assert torch.equal(p[5:], backbone.embed_tokens(name))


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 5), batch=st.integers(1, 3),
       names=st.lists(st.text("abcdefghij", min_size=1, max_size=6), min_size=2, max_size=5, unique=True))
def test_assembled_prompts_share_first_m_plus_one_rows(backbone, m, batch, names):
    vocab = ClassVocabulary(names, backbone)
    h = torch.randn(batch, m, 8, dtype=torch.float64)
    attr = torch.randn(batch, 8, dtype=torch.float64)
    prompts = assemble(h, attr, vocab)
    for p in prompts[1:]:
        assert torch.equal(p[:, : m + 1], prompts[0][:, : m + 1])


def test_overlength_prompt_names_the_class(backbone):
    vocab = ClassVocabulary(["ok", "x" * 58], backbone)
    with pytest.raises(InputError, match="x{58}"):
        assemble(torch.zeros(4, 8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64), vocab)


def test_vocabulary_validation(backbone):
    with pytest.raises(InputError):
        ClassVocabulary(["one"], backbone)
    with pytest.raises(InputError):
        ClassVocabulary(["a", "a"], backbone)


def test_additive_ablation_prompts(backbone):
    vocab = ClassVocabulary(["kiwi", "zz"], backbone)
    cond = AdditiveConditioner(8, img_dim=8, zero_init=True)
    ctx = ContextVector(4, 8)
    emb = torch.randn(8, dtype=torch.float64)
    attr = torch.zeros(8, dtype=torch.float64)
    prompts = assemble_additive_ablation(ctx, emb, attr, vocab, cond)
    assert torch.equal(prompts[0][:4], ctx.tokens)


def test_encode_prompts_groups_match_individual(backbone):
    vocab = ClassVocabulary(["kiwi", "zz", "ox"], backbone)
    prompts = assemble(torch.randn(2, 4, 8, dtype=torch.float64), torch.randn(2, 8, dtype=torch.float64), vocab)
    enc = encode_prompts(backbone, prompts)
    assert enc.shape == (2, 3, backbone.embed_dim)
    for c, p in enumerate(prompts):
        assert torch.allclose(enc[1, c], backbone.encode_text(p[1]), atol=1e-12)


def test_prompt_gradients_match_finite_differences(backbone):
    gen = torch.Generator().manual_seed(2)
    vocab = ClassVocabulary(["kiwi", "zz"], backbone)
    ctx = ContextVector(2, 8, init_std=0.5, generator=gen)
    cond = MultiHeadConditioner(8, 2, img_dim=8, zero_init_out=False, generator=gen)
    emb = torch.randn(8, dtype=torch.float64, generator=gen)
    attr = torch.randn(8, dtype=torch.float64, generator=gen)

    def scalar():
        return encode_prompts(backbone, assemble(condition(ctx, emb, cond), attr, vocab)).pow(2).sum()

    params = [ctx.tokens] + list(cond.parameters())
    for p in params:
        p.grad = None
    scalar().backward()
    for p in params:
        flat = p.data.view(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // 6)):
            old = flat[i].item()
            flat[i] = old + 1e-5
            up = scalar().item()
            flat[i] = old - 1e-5
            down = scalar().item()
            flat[i] = old
            num = (up - down) / 2e-5
            assert p.grad.view(-1)[i].item() == pytest.approx(num, rel=1e-4, abs=1e-7)
