"""Encoder-only multi-task CTC network.

The stack: strided-convolution downsampling front-end, language/task token
prepending, sinusoidal positions, N two-branch encoder layers (self-attention
in parallel with a convolutional gating branch, concat-merged, pre-norm,
residual), self-conditioned CTC re-injection at the intermediate head layers,
and prompt injection through zero-initialized cross-attention. All CTC heads
share one output projection; the re-injection uses a second projection back
to the hidden size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nm
from .ctc import CtcInfeasibleError, ctc_loss_batch
from .datagen import Vocabulary
from .numerics import Tensor, sinusoidal_positions


@dataclass(frozen=True)
class ModelConfig:
    num_languages: int = 3
    symbols_per_language: int = 12
    num_layers: int = 6
    hidden: int = 64
    heads: int = 4
    inter_ctc_layers: tuple[int, ...] = (2, 4)
    num_asr_only: int = 1
    prompt_inject_layers: tuple[int, ...] = (3, 6)
    prompt_layers: int = 2
    prompt_hidden: int = 32
    prompt_heads: int = 4
    downsample_factor: int = 2
    feat_dim: int = 16
    conv_kernel: int = 3

    def __post_init__(self):
        s = self.inter_ctc_layers
        if list(s) != sorted(set(s)) or any(not 1 <= l <= self.num_layers - 1 for l in s):
            raise ValueError("intermediate CTC layers must be ordered and within 1..N-1")
        if not 0 <= self.num_asr_only <= len(s):
            raise ValueError("num_asr_only must not exceed the intermediate layer count")
        if any(not 1 <= t <= self.num_layers for t in self.prompt_inject_layers):
            raise ValueError("prompt injection layers must be within 1..N")
        if self.hidden % self.heads:
            raise ValueError("hidden size must divide evenly across heads")
        if self.prompt_hidden % self.prompt_heads:
            raise ValueError("prompt hidden size must divide evenly across prompt heads")
        f = self.downsample_factor
        if f < 1 or (f & (f - 1)):
            raise ValueError("downsampling factor must be a power of two")

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.num_languages, self.symbols_per_language)

    @property
    def vocab_size(self) -> int:
        return self.vocabulary().size

    @property
    def num_conv_stages(self) -> int:
        return self.downsample_factor.bit_length() - 1

    def ctc_layers(self) -> tuple[int, ...]:
        return tuple(self.inter_ctc_layers) + (self.num_layers,)

    def layer_role(self, layer: int) -> str:
        """asr-only for the first num_asr_only intermediate heads, else
        task-dependent (the final head is always task-dependent)."""
        if layer == self.num_layers:
            return "task-dependent"
        idx = self.inter_ctc_layers.index(layer)
        return "asr-only" if idx < self.num_asr_only else "task-dependent"


class Parameters:
    """Named float64 parameter tensors in a stable insertion order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self) -> list[Tensor]:
        return list(self._tensors.values())

    def copy(self) -> "Parameters":
        return Parameters(
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.items()}
        )


def init_parameters(config: ModelConfig, seed: int = 0) -> Parameters:
    rng = np.random.default_rng(seed)
    d = config.hidden
    dp = config.prompt_hidden
    v = config.vocab_size
    k = config.conv_kernel
    tensors: dict[str, Tensor] = {}

    def param(name, shape, std=None, zero=False):
        if zero:
            data = np.zeros(shape)
        elif std is None:
            data = np.ones(shape)
        else:
            data = rng.normal(scale=std, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)

    for i in range(config.num_conv_stages):
        param(f"frontend.conv{i}.w", (k, config.feat_dim, config.feat_dim),
              std=1.0 / math.sqrt(k * config.feat_dim))
        param(f"frontend.conv{i}.b", (config.feat_dim,), zero=True)
    param("frontend.proj.w", (config.feat_dim, d), std=1.0 / math.sqrt(config.feat_dim))
    param("frontend.proj.b", (d,), zero=True)

    param("token_embed", (v, d), std=1.0)

    inv_d = 1.0 / math.sqrt(d)
    for l in range(1, config.num_layers + 1):
        p = f"enc{l}."
        param(p + "ln.g", (d,))
        param(p + "ln.b", (d,), zero=True)
        for w in ("wq", "wk", "wv", "wo"):
            param(p + f"attn.{w}", (d, d), std=inv_d)
        for b in ("bq", "bv", "bo"):  # no key bias: it cancels in softmax
            param(p + f"attn.{b}", (d,), zero=True)
        param(p + "cgate.wa", (d, d), std=inv_d)
        param(p + "cgate.ba", (d,), zero=True)
        param(p + "cgate.wb", (d, d), std=inv_d)
        param(p + "cgate.bb", (d,), zero=True)
        param(p + "cgate.convw", (k, d), std=1.0 / math.sqrt(k))
        param(p + "cgate.convb", (d,), zero=True)
        param(p + "cgate.wout", (d, d), std=inv_d)
        param(p + "cgate.bout", (d,), zero=True)
        param(p + "merge.w", (2 * d, d), std=1.0 / math.sqrt(2 * d))
        param(p + "merge.b", (d,), zero=True)

    param("ctc.w1", (d, v), std=inv_d)
    param("ctc.w2", (v, d), std=1.0 / math.sqrt(v))

    for t in config.prompt_inject_layers:
        p = f"cross{t}."
        param(p + "wq", (d, d), std=inv_d)
        param(p + "wk", (dp, d), std=1.0 / math.sqrt(dp))
        param(p + "wv", (dp, d), std=1.0 / math.sqrt(dp))
        param(p + "wo", (d, d), zero=True)  # prompt injection starts as a no-op
        for b in ("bq", "bv", "bo"):
            param(p + b, (d,), zero=True)

    param("prompt.embed", (v, dp), std=1.0)
    inv_dp = 1.0 / math.sqrt(dp)
    for j in range(config.prompt_layers):
        p = f"prompt{j}."
        param(p + "ln1.g", (dp,))
        param(p + "ln1.b", (dp,), zero=True)
        for w in ("wq", "wk", "wv", "wo"):
            param(p + f"attn.{w}", (dp, dp), std=inv_dp)
        for b in ("bq", "bv", "bo"):
            param(p + f"attn.{b}", (dp,), zero=True)
        param(p + "ln2.g", (dp,))
        param(p + "ln2.b", (dp,), zero=True)
        param(p + "ffn.w1", (dp, 4 * dp), std=inv_dp)
        param(p + "ffn.b1", (4 * dp,), zero=True)
        param(p + "ffn.w2", (4 * dp, dp), std=1.0 / math.sqrt(4 * dp))
        param(p + "ffn.b2", (dp,), zero=True)

    return Parameters(tensors)


@dataclass
class ForwardTrace:
    """Every intermediate the architecture names, batch-first."""

    layer_outputs: dict[int, Tensor]       # X^(0)..X^(N), (B, R, d)
    pre_condition: dict[int, Tensor]       # A^(s) at intermediate CTC layers
    posteriors: dict[int, Tensor]          # B^(s), rows sum to one
    cross_inputs: dict[int, Tensor]        # D^(t) before prompt injection
    prompt_out: Tensor                     # (B, P, d')
    log_probs: dict[int, Tensor]           # per CTC layer incl. final, (B, R, V)
    valid_rows: np.ndarray                 # (B,) frames valid per grid (T_b + 2)


@dataclass
class LossBreakdown:
    final_loss: Tensor
    per_layer: dict[int, Tensor]
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        out = {f"layer{l}": t.item() for l, t in self.per_layer.items()}
        out["final"] = self.final_loss.item()
        out["total"] = self.total.item()
        return out


def _ceil_div(a, b):
    return -(-a // b)


def downsampled_length(config: ModelConfig, t_raw):
    """Frame count after the front-end: ceil(T_raw / factor), staged."""
    t = np.asarray(t_raw)
    for _ in range(config.num_conv_stages):
        t = _ceil_div(t, 2)
    return t


def downsample_frontend(
    params: Parameters, config: ModelConfig, features, valid_raw
) -> tuple[Tensor, np.ndarray]:
    """(B, T_raw, d_feat) -> (B, T, d) with T = ceil(T_raw / factor)."""
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if feats.data.ndim != 3:
        raise ValueError("expected (B, T_raw, d_feat) features")
    B, t_raw, d_feat = feats.data.shape
    if d_feat != config.feat_dim:
        raise ValueError(f"feature dim {d_feat} != configured {config.feat_dim}")
    valid = np.asarray(valid_raw, dtype=np.int64)
    if (valid < config.downsample_factor).any() or (valid > t_raw).any():
        raise ValueError("inputs shorter than the downsampling factor")

    x = feats
    cur_valid = valid
    cur_len = t_raw
    for i in range(config.num_conv_stages):
        mask = (np.arange(cur_len)[None, :] < cur_valid[:, None]).astype(float)
        x = nm.mul(x, mask[:, :, None])
        x = nm.conv1d_strided(
            x, params[f"frontend.conv{i}.w"], params[f"frontend.conv{i}.b"], stride=2
        )
        x = nm.gelu(x)
        cur_valid = _ceil_div(cur_valid, 2)
        cur_len = _ceil_div(cur_len, 2)
    x = nm.add(nm.matmul(x, params["frontend.proj.w"]), params["frontend.proj.b"])
    return x, cur_valid


def prepend_tokens(
    params: Parameters, config: ModelConfig, x_speech: Tensor, lang_ids, task_ids
) -> Tensor:
    """[e_lang; e_task; X_speech] along time; both ids must be special tokens."""
    vocab = config.vocabulary()
    lang_ids = np.asarray(lang_ids, dtype=np.int64)
    task_ids = np.asarray(task_ids, dtype=np.int64)
    for lid in lang_ids:
        if not (vocab.is_lang_token(int(lid)) or int(lid) == vocab.nolang):
            raise ValueError(f"{lid} is not a language token or the nolang token")
    for tid in task_ids:
        if not vocab.is_task_token(int(tid)):
            raise ValueError(f"{tid} is not a task token")
    B, _, d = x_speech.data.shape
    e_lang = nm.reshape(nm.embed(params["token_embed"], lang_ids), (B, 1, d))
    e_task = nm.reshape(nm.embed(params["token_embed"], task_ids), (B, 1, d))
    return nm.concat([e_lang, e_task, x_speech], axis=1)


def _multi_head_attention(q, k, v, heads: int, key_invalid=None):
    """Generic scaled dot-product attention over (B, L, D) projections."""
    B, lq, dmodel = q.data.shape
    lk = k.data.shape[1]
    hd = dmodel // heads
    scale = 1.0 / math.sqrt(hd)

    def split(x, length):
        return nm.transpose(nm.reshape(x, (B, length, heads, hd)), (0, 2, 1, 3))

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    scores = nm.scale(nm.matmul(qh, nm.transpose(kh, (0, 1, 3, 2))), scale)
    if key_invalid is not None:
        scores = nm.masked_fill(scores, key_invalid[:, None, None, :])
    attn = nm.softmax_lastdim(scores)
    ctx = nm.matmul(attn, vh)
    return nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (B, lq, dmodel))


def speech_enc_layer(
    params: Parameters,
    config: ModelConfig,
    layer: int,
    x: Tensor,
    row_mask: np.ndarray,
    key_invalid: np.ndarray,
) -> Tensor:
    """One two-branch encoder layer; shape (B, R, d) preserved."""
    p = f"enc{layer}."
    xn = nm.layer_norm(x, params[p + "ln.g"], params[p + "ln.b"])

    q = nm.add(nm.matmul(xn, params[p + "attn.wq"]), params[p + "attn.bq"])
    k = nm.matmul(xn, params[p + "attn.wk"])
    v = nm.add(nm.matmul(xn, params[p + "attn.wv"]), params[p + "attn.bv"])
    ctx = _multi_head_attention(q, k, v, config.heads, key_invalid)
    attn_out = nm.add(nm.matmul(ctx, params[p + "attn.wo"]), params[p + "attn.bo"])

    h_a = nm.gelu(nm.add(nm.matmul(xn, params[p + "cgate.wa"]), params[p + "cgate.ba"]))
    h_b = nm.gelu(nm.add(nm.matmul(xn, params[p + "cgate.wb"]), params[p + "cgate.bb"]))
    # conv mixes adjacent frames: zero padded rows so they never leak in
    h_b = nm.mul(h_b, row_mask)
    conv_b = nm.depthwise_conv1d(h_b, params[p + "cgate.convw"], params[p + "cgate.convb"])
    gated = nm.mul(h_a, conv_b)
    conv_out = nm.add(nm.matmul(gated, params[p + "cgate.wout"]), params[p + "cgate.bout"])

    merged = nm.concat([attn_out, conv_out], axis=2)
    update = nm.add(nm.matmul(merged, params[p + "merge.w"]), params[p + "merge.b"])
    return nm.add(x, update)


def cross_attention(
    params: Parameters,
    config: ModelConfig,
    layer: int,
    d_out: Tensor,
    x_prompt: Tensor,
    prompt_invalid: np.ndarray,
) -> Tensor:
    """CrossAtt(D, X_prompt, X_prompt); output projection starts at zero."""
    p = f"cross{layer}."
    q = nm.add(nm.matmul(d_out, params[p + "wq"]), params[p + "bq"])
    k = nm.matmul(x_prompt, params[p + "wk"])
    v = nm.add(nm.matmul(x_prompt, params[p + "wv"]), params[p + "bv"])
    ctx = _multi_head_attention(q, k, v, config.heads, prompt_invalid)
    return nm.add(nm.matmul(ctx, params[p + "wo"]), params[p + "bo"])


def prompt_encode(
    params: Parameters, config: ModelConfig, prompts: Sequence[Sequence[int]]
) -> tuple[Tensor, np.ndarray]:
    """Encode padded prompt token batches; returns (X_prompt, invalid mask)."""
    v = config.vocab_size
    if any(len(pr) == 0 for pr in prompts):
        raise ValueError("prompts must be nonempty (use the <na> token)")
    for pr in prompts:
        for tok in pr:
            if not 0 <= tok < v:
                raise ValueError(f"unknown prompt token id {tok}")
    B = len(prompts)
    P = max(len(pr) for pr in prompts)
    ids = np.zeros((B, P), dtype=np.int64)
    invalid = np.ones((B, P), dtype=bool)
    for b, pr in enumerate(prompts):
        ids[b, : len(pr)] = pr
        invalid[b, : len(pr)] = False

    x = nm.add(nm.embed(params["prompt.embed"], ids),
               sinusoidal_positions(P, config.prompt_hidden))
    for j in range(config.prompt_layers):
        p = f"prompt{j}."
        xn = nm.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = nm.add(nm.matmul(xn, params[p + "attn.wq"]), params[p + "attn.bq"])
        k = nm.matmul(xn, params[p + "attn.wk"])
        vv = nm.add(nm.matmul(xn, params[p + "attn.wv"]), params[p + "attn.bv"])
        ctx = _multi_head_attention(q, k, vv, config.prompt_heads, invalid)
        x = nm.add(x, nm.add(nm.matmul(ctx, params[p + "attn.wo"]), params[p + "attn.bo"]))
        xn2 = nm.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = nm.gelu(nm.add(nm.matmul(xn2, params[p + "ffn.w1"]), params[p + "ffn.b1"]))
        x = nm.add(x, nm.add(nm.matmul(h, params[p + "ffn.w2"]), params[p + "ffn.b2"]))
    return x, invalid


def encode_batch(
    params: Parameters,
    config: ModelConfig,
    features,
    valid_raw,
    lang_ids,
    task_ids,
    prompts: Sequence[Sequence[int]],
) -> ForwardTrace:
    """Run the full stack over a padded batch; records every named tensor."""
    x_speech, valid_t = downsample_frontend(params, config, features, valid_raw)
    x = prepend_tokens(params, config, x_speech, lang_ids, task_ids)
    B, R, d = x.data.shape
    valid_rows = valid_t + 2

    x = nm.add(x, sinusoidal_positions(R, d))
    row_idx = np.arange(R)[None, :]
    row_mask = (row_idx < valid_rows[:, None]).astype(float)[:, :, None]
    key_invalid = row_idx >= valid_rows[:, None]

    x_prompt, prompt_invalid = prompt_encode(params, config, prompts)

    w1 = params["ctc.w1"]
    w2 = params["ctc.w2"]
    layer_outputs = {0: x}
    pre_condition: dict[int, Tensor] = {}
    posteriors: dict[int, Tensor] = {}
    cross_inputs: dict[int, Tensor] = {}
    log_probs: dict[int, Tensor] = {}

    for l in range(1, config.num_layers + 1):
        y = speech_enc_layer(params, config, l, x, row_mask, key_invalid)
        if l in config.prompt_inject_layers:
            cross_inputs[l] = y
            y = nm.add(y, cross_attention(params, config, l, y, x_prompt, prompt_invalid))
        if l in config.inter_ctc_layers:
            a = y
            logits = nm.matmul(a, w1)
            b_post = nm.softmax_lastdim(logits)
            pre_condition[l] = a
            posteriors[l] = b_post
            log_probs[l] = nm.log_softmax_lastdim(logits)
            y = nm.add(a, nm.matmul(b_post, w2))
        layer_outputs[l] = y
        x = y

    final_logits = nm.matmul(x, w1)
    log_probs[config.num_layers] = nm.log_softmax_lastdim(final_logits)

    return ForwardTrace(
        layer_outputs=layer_outputs,
        pre_condition=pre_condition,
        posteriors=posteriors,
        cross_inputs=cross_inputs,
        prompt_out=x_prompt,
        log_probs=log_probs,
        valid_rows=valid_rows,
    )


def encode_speech(
    params: Parameters,
    config: ModelConfig,
    features,
    lang_id: int,
    task_id: int,
    prompt: Sequence[int],
    valid_len: int | None = None,
) -> ForwardTrace:
    """Single-utterance wrapper over ``encode_batch``."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError("expected (T_raw, d_feat) features")
    if valid_len is None:
        valid_len = feats.shape[0]
    return encode_batch(
        params, config, feats[None], np.array([valid_len]), [lang_id], [task_id], [list(prompt)]
    )


def compute_losses_batch(
    trace: ForwardTrace, references: dict[int, Sequence[Sequence[int]]]
) -> LossBreakdown:
    """Per-layer CTC losses (batch-mean) and their average, per the loss rule.

    ``references`` maps each CTC layer (intermediate and final) to one target
    per utterance.
    """
    layers = sorted(trace.log_probs)
    if sorted(references) != layers:
        raise ValueError(f"need one reference set per CTC layer {layers}")
    per_layer: dict[int, Tensor] = {}
    for l in layers:
        try:
            losses = ctc_loss_batch(trace.log_probs[l], references[l], trace.valid_rows)
        except CtcInfeasibleError as e:
            raise CtcInfeasibleError(f"layer {l}: {e}") from e
        per_layer[l] = nm.mean_all(losses)
    final_layer = layers[-1]
    total = per_layer[final_layer]
    for l in layers[:-1]:
        total = nm.add(total, per_layer[l])
    total = nm.scale(total, 1.0 / len(layers))
    return LossBreakdown(
        final_loss=per_layer[final_layer],
        per_layer={l: per_layer[l] for l in layers[:-1]},
        total=total,
    )


def compute_losses(
    trace: ForwardTrace, references: dict[int, Sequence[int]], valid_len: int | None = None
) -> LossBreakdown:
    """Single-utterance loss breakdown; ``references`` maps layer -> target."""
    refs = {l: [list(r)] for l, r in references.items()}
    if valid_len is not None:
        trace = ForwardTrace(
            layer_outputs=trace.layer_outputs,
            pre_condition=trace.pre_condition,
            posteriors=trace.posteriors,
            cross_inputs=trace.cross_inputs,
            prompt_out=trace.prompt_out,
            log_probs=trace.log_probs,
            valid_rows=np.array([valid_len + 2]),
        )
    return compute_losses_batch(trace, refs)


def attention_activations(config: ModelConfig, valid_raw) -> int:
    """Self-attention score entries for a batch: sum of N * heads * R_b^2.

    The quantity the downsampling trade-off moves: halving the frame rate
    roughly quarters this count.
    """
    rows = downsampled_length(config, np.asarray(valid_raw)) + 2
    return int(config.num_layers * config.heads * (rows.astype(np.int64) ** 2).sum())
