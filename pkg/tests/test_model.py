import numpy as np
import pytest

from ctcspeech import model as md
from ctcspeech import numerics as nm
from ctcspeech.ctc import CtcInfeasibleError, ctc_loss
from ctcspeech.datagen import Vocabulary
from ctcspeech.model import (
    ForwardTrace,
    ModelConfig,
    attention_activations,
    compute_losses,
    compute_losses_batch,
    downsample_frontend,
    encode_batch,
    encode_speech,
    init_parameters,
    prepend_tokens,
    prompt_encode,
    speech_enc_layer,
)
from ctcspeech.numerics import Tensor, finite_difference_check


def tiny_config(**kw):
    base = dict(
        num_languages=2,
        symbols_per_language=3,
        num_layers=3,
        hidden=16,
        heads=2,
        inter_ctc_layers=(1,),
        num_asr_only=1,
        prompt_inject_layers=(2,),
        prompt_layers=1,
        prompt_hidden=8,
        prompt_heads=2,
        downsample_factor=2,
        feat_dim=5,
    )
    base.update(kw)
    return ModelConfig(**base)


def rand_utterance(rng, cfg, t_raw=12):
    vocab = cfg.vocabulary()
    feats = rng.normal(size=(t_raw, cfg.feat_dim))
    return feats, vocab


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(inter_ctc_layers=(3,))  # must be < N
    with pytest.raises(ValueError):
        tiny_config(num_asr_only=2)
    with pytest.raises(ValueError):
        tiny_config(heads=3)
    with pytest.raises(ValueError):
        tiny_config(downsample_factor=3)
    with pytest.raises(ValueError):
        tiny_config(prompt_inject_layers=(4,))


def test_layer_roles():
    cfg = tiny_config(num_layers=6, inter_ctc_layers=(2, 4), num_asr_only=1,
                      prompt_inject_layers=(3, 6))
    assert cfg.layer_role(2) == "asr-only"
    assert cfg.layer_role(4) == "task-dependent"
    assert cfg.layer_role(6) == "task-dependent"
    assert cfg.ctc_layers() == (2, 4, 6)


def test_frontend_lengths():
    cfg = tiny_config(downsample_factor=4)
    params = init_parameters(cfg, seed=0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 16, cfg.feat_dim))
    out, valid = downsample_frontend(params, cfg, x, np.array([16]))
    assert out.shape == (1, 4, cfg.hidden)
    assert valid.tolist() == [4]


def test_frontend_factor_one_is_linear_map():
    cfg = tiny_config(downsample_factor=1)
    params = init_parameters(cfg, seed=0)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 6, cfg.feat_dim))
    out, valid = downsample_frontend(params, cfg, x, np.array([6]))
    expect = x @ params["frontend.proj.w"].data + params["frontend.proj.b"].data
    np.testing.assert_allclose(out.data, expect, atol=1e-15)
    assert valid.tolist() == [6]


def test_frontend_too_short_errors():
    cfg = tiny_config(downsample_factor=4)
    params = init_parameters(cfg, seed=0)
    with pytest.raises(ValueError):
        downsample_frontend(params, cfg, np.zeros((1, 3, cfg.feat_dim)), np.array([3]))


def test_prepend_shapes_and_rowwise_effect():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=0)
    vocab = cfg.vocabulary()
    x = Tensor(np.random.default_rng(2).normal(size=(1, 4, cfg.hidden)))
    out = prepend_tokens(params, cfg, x, [vocab.lang_token(0)], [vocab.asr])
    assert out.shape == (1, 6, cfg.hidden)

    out2 = prepend_tokens(params, cfg, x, [vocab.lang_token(1)], [vocab.asr])
    diff = np.abs(out.data - out2.data)
    assert diff[0, 0].max() > 0
    assert diff[0, 1:].max() == 0

    # nolang has its own embedding row, not zeros
    out3 = prepend_tokens(params, cfg, x, [vocab.nolang], [vocab.asr])
    assert np.abs(out3.data[0, 0]).max() > 0
    nolang_row = params["token_embed"].data[vocab.nolang]
    np.testing.assert_array_equal(out3.data[0, 0], nolang_row)


def test_prepend_rejects_non_special_tokens():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=0)
    vocab = cfg.vocabulary()
    x = Tensor(np.zeros((1, 4, cfg.hidden)))
    with pytest.raises(ValueError):
        prepend_tokens(params, cfg, x, [1], [vocab.asr])  # text symbol as lang
    with pytest.raises(ValueError):
        prepend_tokens(params, cfg, x, [vocab.lang_token(0)], [vocab.na])


def test_layer_identity_with_zero_merge():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=3)
    params["enc1.merge.w"].data[:] = 0.0
    params["enc1.merge.b"].data[:] = 0.0
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 7, cfg.hidden)))
    row_mask = np.ones((2, 7, 1))
    key_invalid = np.zeros((2, 7), dtype=bool)
    y = speech_enc_layer(params, cfg, 1, x, row_mask, key_invalid)
    np.testing.assert_array_equal(y.data, x.data)


def test_layer_preserves_shape():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=4)
    for t in (3, 9):
        x = Tensor(np.random.default_rng(4).normal(size=(1, t, cfg.hidden)))
        y = speech_enc_layer(
            params, cfg, 2, x, np.ones((1, t, 1)), np.zeros((1, t), dtype=bool)
        )
        assert y.shape == x.shape


def test_layer_gradient():
    cfg = tiny_config(hidden=8, heads=2)
    params = init_parameters(cfg, seed=5)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 5, cfg.hidden))
    names = [f"enc1.{n}" for n in
             ("ln.g", "attn.wq", "attn.wo", "cgate.wb", "cgate.convw", "merge.w")]
    tensors = [params[n] for n in names]
    coeff = rng.normal(size=(1, 5, cfg.hidden))

    def f(_):
        y = speech_enc_layer(params, cfg, 1, Tensor(x), np.ones((1, 5, 1)),
                             np.zeros((1, 5), dtype=bool))
        return nm.sum_all(nm.mul(y, coeff))

    assert finite_difference_check(f, tensors, eps=1e-5, samples_per_param=4) <= 1e-4


def test_prompt_encode_na_and_determinism():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=6)
    vocab = cfg.vocabulary()
    out, invalid = prompt_encode(params, cfg, [[vocab.na]])
    assert out.shape == (1, 1, cfg.prompt_hidden)
    assert not invalid.any()
    out2, _ = prompt_encode(params, cfg, [[vocab.na]])
    assert (out.data == out2.data).all()


def test_prompt_encode_errors():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=6)
    with pytest.raises(ValueError):
        prompt_encode(params, cfg, [[]])
    with pytest.raises(ValueError):
        prompt_encode(params, cfg, [[cfg.vocab_size]])


def test_prompt_encoder_gradient():
    cfg = tiny_config(prompt_hidden=8)
    params = init_parameters(cfg, seed=7)
    rng = np.random.default_rng(7)
    coeff = rng.normal(size=(1, 3, cfg.prompt_hidden))
    names = ["prompt.embed", "prompt0.attn.wq", "prompt0.ffn.w1", "prompt0.ln1.g"]

    def f(_):
        out, _ = prompt_encode(params, cfg, [[1, 2, 3]])
        return nm.sum_all(nm.mul(out, coeff))

    assert finite_difference_check(f, [params[n] for n in names],
                                   eps=1e-5, samples_per_param=4) <= 1e-4


def run_tiny(params, cfg, feats, lang, task, prompt, valid=None):
    return encode_speech(params, cfg, feats, lang, task, prompt, valid_len=valid)


def test_self_conditioning_identity_with_zero_w2():
    cfg = tiny_config(inter_ctc_layers=(1, 2), num_asr_only=1)
    vanilla = tiny_config(inter_ctc_layers=(), num_asr_only=0)
    params = init_parameters(cfg, seed=8)
    params["ctc.w2"].data[:] = 0.0
    rng = np.random.default_rng(8)
    feats, vocab = rand_utterance(rng, cfg)
    args = (feats, vocab.lang_token(0), vocab.asr, [vocab.na])
    t1 = run_tiny(params, cfg, *args)
    t2 = run_tiny(params, vanilla, *args)
    for l in range(cfg.num_layers + 1):
        np.testing.assert_array_equal(t1.layer_outputs[l].data, t2.layer_outputs[l].data)
    np.testing.assert_array_equal(
        t1.log_probs[cfg.num_layers].data, t2.log_probs[cfg.num_layers].data
    )


def test_prompt_invariance_at_zero_init():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=9)
    rng = np.random.default_rng(9)
    feats, vocab = rand_utterance(rng, cfg)
    a = run_tiny(params, cfg, feats, vocab.nolang, vocab.asr, [vocab.na])
    b = run_tiny(params, cfg, feats, vocab.nolang, vocab.asr, [1, 2, 3, 2, 1])
    for l in a.log_probs:
        np.testing.assert_array_equal(a.log_probs[l].data, b.log_probs[l].data)
    # sensitivity check: a nonzero output projection breaks the invariance
    params["cross2.wo"].data[:] = rng.normal(size=params["cross2.wo"].data.shape)
    c = run_tiny(params, cfg, feats, vocab.nolang, vocab.asr, [1, 2, 3, 2, 1])
    assert np.abs(c.log_probs[cfg.num_layers].data - a.log_probs[cfg.num_layers].data).max() > 0


def test_posteriors_rows_sum_to_one():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=10)
    feats, vocab = rand_utterance(np.random.default_rng(10), cfg)
    trace = run_tiny(params, cfg, feats, vocab.lang_token(1), vocab.asr, [vocab.na])
    for s, b in trace.posteriors.items():
        np.testing.assert_allclose(b.data.sum(axis=-1), 1.0, atol=1e-12)


def test_grid_count_matches_paper_scale_pattern():
    # |S|=4 at layers {6,12,15,21} of N=27 produces exactly five grids
    cfg = tiny_config(
        num_layers=27,
        inter_ctc_layers=(6, 12, 15, 21),
        num_asr_only=3,
        prompt_inject_layers=tuple(range(3, 28, 3)),
        hidden=8,
        heads=2,
        prompt_hidden=8,
    )
    params = init_parameters(cfg, seed=11)
    feats, vocab = rand_utterance(np.random.default_rng(11), cfg, t_raw=6)
    trace = run_tiny(params, cfg, feats, vocab.lang_token(0), vocab.asr, [vocab.na])
    assert len(trace.log_probs) == 5
    assert set(trace.log_probs) == {6, 12, 15, 21, 27}
    for role, l in zip(("asr-only",) * 3 + ("task-dependent",) * 2, (6, 12, 15, 21, 27)):
        assert cfg.layer_role(l) == role


def test_shapes_contract():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=12)
    feats, vocab = rand_utterance(np.random.default_rng(12), cfg, t_raw=10)
    trace = run_tiny(params, cfg, feats, vocab.lang_token(0), vocab.asr, [vocab.na])
    t_down = -(-10 // cfg.downsample_factor)
    for l, x in trace.layer_outputs.items():
        assert x.shape == (1, t_down + 2, cfg.hidden)
    for l, g in trace.log_probs.items():
        assert g.shape == (1, t_down + 2, cfg.vocab_size)


def test_padding_invariance_of_losses():
    cfg = tiny_config()
    params = init_parameters(cfg, seed=13)
    rng = np.random.default_rng(13)
    feats, vocab = rand_utterance(rng, cfg, t_raw=12)
    refs = {1: [vocab.lang_token(0), vocab.asr, 1, 2],
            3: [vocab.lang_token(0), vocab.asr, 1, 2]}

    t1 = encode_speech(params, cfg, feats, vocab.lang_token(0), vocab.asr, [vocab.na])
    l1 = compute_losses(t1, refs)

    junk = rng.normal(size=(6, cfg.feat_dim)) * 50
    padded = np.concatenate([feats, junk], axis=0)
    t2 = encode_speech(params, cfg, padded, vocab.lang_token(0), vocab.asr,
                       [vocab.na], valid_len=12)
    l2 = compute_losses(t2, refs)
    assert abs(l1.total.item() - l2.total.item()) <= 1e-10
    for l in refs:
        key = l if l in l1.per_layer else None
        if key is not None:
            assert abs(l1.per_layer[l].item() - l2.per_layer[l].item()) <= 1e-10


def test_loss_averaging_weights():
    rng = np.random.default_rng(14)
    R, V = 6, 5
    grids = {l: nm.log_softmax_lastdim(Tensor(rng.normal(size=(1, R, V)))) for l in (1, 2, 3)}
    trace = ForwardTrace({}, {}, {}, {}, Tensor(np.zeros((1, 1, 2))), grids, np.array([R]))
    refs = {1: [[1]], 2: [[2, 1]], 3: [[1, 2]]}
    breakdown = compute_losses_batch(trace, refs)
    direct = [ctc_loss(Tensor(grids[l].data[0]), refs[l][0], R).item() for l in (1, 2, 3)]
    assert breakdown.total.item() == pytest.approx(sum(direct) / 3.0, abs=1e-12)
    assert breakdown.final_loss.item() == pytest.approx(direct[-1], abs=1e-12)
    # |S|=0: total equals the final loss
    solo = ForwardTrace({}, {}, {}, {}, Tensor(np.zeros((1, 1, 2))),
                        {3: grids[3]}, np.array([R]))
    b2 = compute_losses_batch(solo, {3: refs[3]})
    assert b2.total.item() == pytest.approx(direct[-1], abs=1e-12)


def test_infeasible_reference_names_layer():
    rng = np.random.default_rng(15)
    grids = {2: nm.log_softmax_lastdim(Tensor(rng.normal(size=(1, 3, 4))))}
    trace = ForwardTrace({}, {}, {}, {}, Tensor(np.zeros((1, 1, 2))), grids, np.array([3]))
    with pytest.raises(CtcInfeasibleError, match="layer 2"):
        compute_losses_batch(trace, {2: [[1, 1, 2, 2]]})


def test_end_to_end_gradient_small():
    cfg = tiny_config(hidden=8, heads=2, prompt_hidden=8, feat_dim=4)
    params = init_parameters(cfg, seed=16)
    rng = np.random.default_rng(16)
    feats = rng.normal(size=(6, cfg.feat_dim))
    vocab = cfg.vocabulary()
    refs = {1: [[vocab.lang_token(0), vocab.asr, 1, 2]],
            3: [[vocab.lang_token(0), vocab.asr, 1, 2]]}

    def f(_):
        trace = encode_speech(params, cfg, feats, vocab.lang_token(0), vocab.asr, [vocab.na])
        return compute_losses_batch(trace, refs).total

    err = finite_difference_check(f, params.values(), eps=1e-5, samples_per_param=1,
                                  rng=np.random.default_rng(0))
    assert err <= 1e-4


def test_attention_activations_monotone_in_factor():
    cfg4 = tiny_config(downsample_factor=4)
    cfg8 = tiny_config(downsample_factor=8)
    lens = np.array([64, 80, 96])
    a4 = attention_activations(cfg4, lens)
    a8 = attention_activations(cfg8, lens)
    assert a8 < a4
    assert 1 - a8 / a4 >= 0.4
