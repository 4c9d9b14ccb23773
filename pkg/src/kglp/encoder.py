"""Compact trainable sequence encoder with an explicit backward pass.

Token + learned position embeddings feed a stack of post-norm self-attention
blocks; the pooled sequence vector is the [CLS] position state. A token
prediction head (dense -> GeLU -> batch-norm -> dense to vocabulary) produces
logits for the masked-token objectives. Everything is trained from scratch;
parameters live in a flat name -> array dict so the optimizer, checkpoints,
and gradient checks can treat them uniformly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L

CHECKPOINT_FORMAT = "kglp.ckpt.v1"

#: Mask value for attention scores at PAD keys; exp() underflows to exactly 0.
_NEG_INF = -np.inf


class CheckpointError(Exception):
    """A checkpoint file is unreadable, corrupted, or of an unknown format."""


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_size: int = 128
    num_layers: int = 2
    num_heads: int = 4
    ff_size: int = 256
    max_len: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        for name in ("vocab_size", "hidden_size", "num_layers", "num_heads",
                     "ff_size", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def num_parameters(self) -> int:
        d, f, v, m = self.hidden_size, self.ff_size, self.vocab_size, self.max_len
        per_block = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d)
        head = (d * d + d) + 2 * d + (d * v + v)
        return v * d + m * d + 2 * d + self.num_layers * per_block + head


@dataclass
class EncoderOutput:
    """Per-token hidden states plus the pooled ([CLS] position) vector."""

    token_states: np.ndarray
    pooled: np.ndarray


def param_group(name: str) -> str:
    """Two-group learning-rate split: prediction head vs. everything else."""
    return "linear" if name.startswith("head.") else "attention"


def init_params(config: EncoderConfig, seed: int, dtype=np.float32) -> tuple[dict, dict]:
    """Scaled-Gaussian (std 0.02) weights, zero biases, unit norms; deterministic."""
    rng = np.random.default_rng(seed)
    std = 0.02

    def gauss(*shape):
        return (rng.standard_normal(shape) * std).astype(dtype)

    d, f, v = config.hidden_size, config.ff_size, config.vocab_size
    p: dict[str, np.ndarray] = {}
    p["tok_emb"] = gauss(v, d)
    p["pos_emb"] = gauss(config.max_len, d)
    p["emb_ln.g"] = np.ones(d, dtype=dtype)
    p["emb_ln.b"] = np.zeros(d, dtype=dtype)
    for i in range(config.num_layers):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"blk{i}.attn.{w}"] = gauss(d, d)
        for b in ("bq", "bk", "bv", "bo"):
            p[f"blk{i}.attn.{b}"] = np.zeros(d, dtype=dtype)
        p[f"blk{i}.ln1.g"] = np.ones(d, dtype=dtype)
        p[f"blk{i}.ln1.b"] = np.zeros(d, dtype=dtype)
        p[f"blk{i}.ff.w1"] = gauss(d, f)
        p[f"blk{i}.ff.b1"] = np.zeros(f, dtype=dtype)
        p[f"blk{i}.ff.w2"] = gauss(f, d)
        p[f"blk{i}.ff.b2"] = np.zeros(d, dtype=dtype)
        p[f"blk{i}.ln2.g"] = np.ones(d, dtype=dtype)
        p[f"blk{i}.ln2.b"] = np.zeros(d, dtype=dtype)
    p["head.w1"] = gauss(d, d)
    p["head.b1"] = np.zeros(d, dtype=dtype)
    p["head.bn.g"] = np.ones(d, dtype=dtype)
    p["head.bn.b"] = np.zeros(d, dtype=dtype)
    p["head.w2"] = gauss(d, v)
    p["head.b2"] = np.zeros(v, dtype=dtype)

    buffers = {
        "head.bn.mean": np.zeros(d, dtype=dtype),
        "head.bn.var": np.ones(d, dtype=dtype),
    }
    return p, buffers


class Encoder:
    """The encoder plus prediction head, with hand-written backprop.

    The parameter dict has a single logical writer (the training loop);
    inference-mode calls never mutate state and are safe concurrently.
    """

    def __init__(self, config: EncoderConfig, params: dict | None = None,
                 buffers: dict | None = None, seed: int = 0, dtype=np.float32):
        self.config = config
        if params is None:
            params, buffers = init_params(config, seed, dtype)
        self.dtype = next(iter(params.values())).dtype
        self.params = params
        self.buffers = buffers if buffers is not None else {
            "head.bn.mean": np.zeros(config.hidden_size, dtype=dtype),
            "head.bn.var": np.ones(config.hidden_size, dtype=dtype),
        }

    # ------------------------------------------------------------------ forward

    def forward(self, tokens, mask, train: bool = False,
                rng: np.random.Generator | None = None):
        """Run the encoder; returns (EncoderOutput, cache).

        ``tokens`` (B, S) int, ``mask`` (B, S) with 1 on real positions. PAD
        keys receive no attention from any query. ``rng`` drives dropout and is
        required when training with a nonzero dropout rate.
        """
        cfg, p = self.config, self.params
        tokens = np.asarray(tokens)
        mask = np.asarray(mask)
        if tokens.ndim == 1:
            tokens = tokens[None]
            mask = mask[None]
        B, S = tokens.shape
        if S > cfg.max_len:
            raise ValueError(f"sequence length {S} exceeds max_len {cfg.max_len}")
        if tokens.max(initial=0) >= cfg.vocab_size:
            raise ValueError(
                f"token id {int(tokens.max())} out of range for vocab {cfg.vocab_size}")
        if mask.shape != tokens.shape:
            raise ValueError("mask shape must match tokens shape")
        rate = cfg.dropout if train else 0.0
        if rate > 0.0 and rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")

        key_mask = mask.astype(bool)  # (B, S)
        x = p["tok_emb"][tokens] + p["pos_emb"][:S][None, :, :]
        x, emb_ln_cache = L.layernorm_forward(x, p["emb_ln.g"], p["emb_ln.b"])
        x, emb_drop = L.dropout_forward(x, rate, rng, train)

        caches = []
        for i in range(cfg.num_layers):
            x, blk_cache = self._block_forward(i, x, key_mask, rate, rng, train)
            caches.append(blk_cache)

        cache = {
            "tokens": tokens, "emb_ln": emb_ln_cache, "emb_drop": emb_drop,
            "blocks": caches, "seq_len": S,
        }
        return EncoderOutput(token_states=x, pooled=x[:, 0]), cache

    def _block_forward(self, i, x, key_mask, rate, rng, train):
        p = self.params
        d = self.config.hidden_size
        H = self.config.num_heads
        dh = d // H
        B, S, _ = x.shape

        q, q_cache = L.linear_forward(x, p[f"blk{i}.attn.wq"], p[f"blk{i}.attn.bq"])
        k, k_cache = L.linear_forward(x, p[f"blk{i}.attn.wk"], p[f"blk{i}.attn.bk"])
        v, v_cache = L.linear_forward(x, p[f"blk{i}.attn.wv"], p[f"blk{i}.attn.bv"])
        qh = q.reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, S, H, dh).transpose(0, 2, 1, 3)

        scores = (qh @ kh.transpose(0, 1, 3, 2)) / np.sqrt(dh).astype(x.dtype)
        scores = np.where(key_mask[:, None, None, :], scores, _NEG_INF)
        attn = L.softmax_last(scores)
        attn_d, attn_drop = L.dropout_forward(attn, rate, rng, train)

        ctx = (attn_d @ vh).transpose(0, 2, 1, 3).reshape(B, S, d)
        out, out_cache = L.linear_forward(ctx, p[f"blk{i}.attn.wo"], p[f"blk{i}.attn.bo"])
        out, out_drop = L.dropout_forward(out, rate, rng, train)
        h1, ln1_cache = L.layernorm_forward(x + out, p[f"blk{i}.ln1.g"], p[f"blk{i}.ln1.b"])

        u, ff1_cache = L.linear_forward(h1, p[f"blk{i}.ff.w1"], p[f"blk{i}.ff.b1"])
        g, gelu_cache = L.gelu_forward(u)
        f, ff2_cache = L.linear_forward(g, p[f"blk{i}.ff.w2"], p[f"blk{i}.ff.b2"])
        f, ff_drop = L.dropout_forward(f, rate, rng, train)
        h2, ln2_cache = L.layernorm_forward(h1 + f, p[f"blk{i}.ln2.g"], p[f"blk{i}.ln2.b"])

        return h2, {
            "q": q_cache, "k": k_cache, "v": v_cache, "qh": qh, "kh": kh, "vh": vh,
            "attn": attn, "attn_d": attn_d, "attn_drop": attn_drop, "ctx": ctx,
            "out_cache": out_cache, "out_drop": out_drop, "ln1": ln1_cache,
            "ff1": ff1_cache, "gelu": gelu_cache, "ff2": ff2_cache,
            "ff_drop": ff_drop, "ln2": ln2_cache, "shape": (B, S, H, dh),
        }

    def encode(self, tokens, mask) -> EncoderOutput:
        """Inference-mode encoding: deterministic, no state mutation."""
        output, _ = self.forward(tokens, mask, train=False)
        return output

    # ----------------------------------------------------------------- backward

    def backward(self, cache, d_states=None, d_pooled=None) -> dict:
        """Backprop through the encoder body; returns name -> gradient dict."""
        cfg, p = self.config, self.params
        blocks = cache["blocks"]
        B = cache["tokens"].shape[0]
        S = cache["seq_len"]
        d = cfg.hidden_size
        dx = np.zeros((B, S, d), dtype=self.dtype)
        if d_states is not None:
            dx += d_states
        if d_pooled is not None:
            dx[:, 0] += d_pooled

        grads = {name: np.zeros_like(arr) for name, arr in p.items()}
        for i in reversed(range(cfg.num_layers)):
            dx = self._block_backward(i, dx, blocks[i], grads)

        dx = L.dropout_backward(dx, cache["emb_drop"])
        dx, dg, db = L.layernorm_backward(dx, cache["emb_ln"])
        grads["emb_ln.g"] += dg
        grads["emb_ln.b"] += db
        np.add.at(grads["tok_emb"], cache["tokens"], dx)
        grads["pos_emb"][:S] += dx.sum(axis=0)
        return grads

    def _block_backward(self, i, dh2, c, grads):
        p = self.params
        B, S, H, dh = c["shape"]
        d = H * dh

        dresid2, dg, db = L.layernorm_backward(dh2, c["ln2"])
        grads[f"blk{i}.ln2.g"] += dg
        grads[f"blk{i}.ln2.b"] += db
        df = L.dropout_backward(dresid2, c["ff_drop"])
        dgelu, dw, db = L.linear_backward(df, c["ff2"])
        grads[f"blk{i}.ff.w2"] += dw
        grads[f"blk{i}.ff.b2"] += db
        du = L.gelu_backward(dgelu, c["gelu"])
        dh1, dw, db = L.linear_backward(du, c["ff1"])
        grads[f"blk{i}.ff.w1"] += dw
        grads[f"blk{i}.ff.b1"] += db
        dh1 += dresid2

        dresid1, dg, db = L.layernorm_backward(dh1, c["ln1"])
        grads[f"blk{i}.ln1.g"] += dg
        grads[f"blk{i}.ln1.b"] += db
        dout = L.dropout_backward(dresid1, c["out_drop"])
        dctx, dw, db = L.linear_backward(dout, c["out_cache"])
        grads[f"blk{i}.attn.wo"] += dw
        grads[f"blk{i}.attn.bo"] += db

        dctx_h = dctx.reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        dattn_d = dctx_h @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["attn_d"].transpose(0, 1, 3, 2) @ dctx_h
        dattn = L.dropout_backward(dattn_d, c["attn_drop"])
        dscores = L.softmax_backward(dattn, c["attn"])
        dscores /= np.sqrt(dh).astype(dscores.dtype)
        dqh = dscores @ c["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]

        dq = dqh.transpose(0, 2, 1, 3).reshape(B, S, d)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, S, d)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, S, d)
        dx = dresid1
        for dvec, cache_key, w_name, b_name in (
                (dq, "q", "wq", "bq"), (dk, "k", "wk", "bk"), (dv, "v", "wv", "bv")):
            dxi, dw, db = L.linear_backward(dvec, c[cache_key])
            grads[f"blk{i}.attn.{w_name}"] += dw
            grads[f"blk{i}.attn.{b_name}"] += db
            dx = dx + dxi
        return dx

    # --------------------------------------------------------------------- head

    def predict_tokens(self, token_states, train: bool = False):
        """Token logits over the vocabulary for a set of hidden states.

        ``token_states`` may be (N, d) or (B, S, d); logits keep the leading
        shape with a final vocab axis. Training mode uses batch statistics in
        the normalization layer (and updates the running estimates); inference
        uses the running statistics. Returns (logits, cache).
        """
        p, buf = self.params, self.buffers
        states = np.asarray(token_states)
        lead_shape = states.shape[:-1]
        flat = states.reshape(-1, states.shape[-1])
        u, lin1 = L.linear_forward(flat, p["head.w1"], p["head.b1"])
        g, gelu_cache = L.gelu_forward(u)
        bn, bn_cache = L.batchnorm_forward(
            g, p["head.bn.g"], p["head.bn.b"],
            buf["head.bn.mean"], buf["head.bn.var"], train)
        logits, lin2 = L.linear_forward(bn, p["head.w2"], p["head.b2"])
        cache = {"lin1": lin1, "gelu": gelu_cache, "bn": bn_cache, "lin2": lin2,
                 "lead_shape": lead_shape}
        return logits.reshape(*lead_shape, -1), cache

    def head_backward(self, cache, dlogits):
        """Backprop the prediction head; returns (grads, d_token_states)."""
        grads = {}
        flat = dlogits.reshape(-1, dlogits.shape[-1])
        dbn, dw, db = L.linear_backward(flat, cache["lin2"])
        grads["head.w2"] = dw
        grads["head.b2"] = db
        dg_in, dgam, dbeta = L.batchnorm_backward(dbn, cache["bn"])
        grads["head.bn.g"] = dgam
        grads["head.bn.b"] = dbeta
        du = L.gelu_backward(dg_in, cache["gelu"])
        dstates, dw, db = L.linear_backward(du, cache["lin1"])
        grads["head.w1"] = dw
        grads["head.b1"] = db
        return grads, dstates.reshape(*cache["lead_shape"], -1)

    # -------------------------------------------------------------- persistence

    def copy_params(self) -> tuple[dict, dict]:
        return ({k: v.copy() for k, v in self.params.items()},
                {k: v.copy() for k, v in self.buffers.items()})

    def load_params(self, params: dict, buffers: dict) -> None:
        self.params = {k: v.copy() for k, v in params.items()}
        self.buffers = {k: v.copy() for k, v in buffers.items()}


def save_checkpoint(encoder: Encoder, path) -> None:
    """Self-describing container: format tag, config JSON, named tensors."""
    meta = {"format": CHECKPOINT_FORMAT, "config": asdict(encoder.config)}
    arrays = {"__meta__": np.array(json.dumps(meta))}
    for name, arr in encoder.params.items():
        arrays[f"param::{name}"] = arr
    for name, arr in encoder.buffers.items():
        arrays[f"buffer::{name}"] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Encoder:
    try:
        with np.load(path, allow_pickle=False) as data:
            if "__meta__" not in data:
                raise CheckpointError(f"{path}: not a kglp checkpoint (no meta entry)")
            meta = json.loads(str(data["__meta__"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(
                    f"{path}: format {meta.get('format')!r} is not {CHECKPOINT_FORMAT!r}")
            config = EncoderConfig(**meta["config"])
            params = {k[len("param::"):]: data[k] for k in data.files
                      if k.startswith("param::")}
            buffers = {k[len("buffer::"):]: data[k] for k in data.files
                       if k.startswith("buffer::")}
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from exc
    return Encoder(config, params=params, buffers=buffers)
