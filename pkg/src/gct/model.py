"""The network: input embedding, encoder, shared-weight bidirectional
decoder with causal masking, and the gated contextual MLP output head.

Both decoder branches read the same block weights; branch identity enters
only through the input sequence (start token and token order). The reverse
branch therefore reuses the standard causal mask: in original event order
that blocks past instead of future information.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .data import BOS_ID, BOS_REV_ID, N_CONTROL
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    input_mode: str = "patches"  # "patches" | "clip"
    n_encoder_blocks: int = 7
    n_decoder_blocks: int = 7
    d_model: int = 512
    n_heads: int = 8
    d_ff: int = 2048
    dropout: float = 0.1
    max_len: int = 12
    patch_time: int = 16
    patch_freq: int = 16
    n_mels: int = 128
    max_enc_len: int = 512  # positional table length in patches mode
    use_pos_emb: bool = True  # encoder positional table (patches mode)
    use_gcmlp: bool = True  # gated head; False = plain linear + softmax
    dtype: str = "float64"

    def __post_init__(self):
        if self.input_mode not in ("patches", "clip"):
            raise ValueError(f"input_mode must be 'patches' or 'clip', got {self.input_mode!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_encoder_blocks < 0 or self.n_decoder_blocks < 1:
            raise ValueError("need n_encoder_blocks >= 0 and n_decoder_blocks >= 1")
        if self.vocab_size <= N_CONTROL:
            raise ValueError(f"vocab_size {self.vocab_size} leaves no event tokens")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def input_dim(self) -> int:
        return self.patch_time * self.patch_freq if self.input_mode == "patches" else self.n_mels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _attention_shapes(prefix: str, d: int) -> dict:
    return {
        f"{prefix}.wq": (d, d), f"{prefix}.bq": (d,),
        f"{prefix}.wk": (d, d), f"{prefix}.bk": (d,),
        f"{prefix}.wv": (d, d), f"{prefix}.bv": (d,),
        f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Every learnable tensor's shape; a pure function of the config."""
    d, v = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple] = {
        "input.w": (cfg.input_dim, d),
        "input.b": (d,),
        "tok_emb": (v, d),
        "dec.pos": (cfg.max_len, d),
    }
    if cfg.input_mode == "patches" and cfg.use_pos_emb:
        shapes["enc.pos"] = (cfg.max_enc_len, d)
    for i in range(cfg.n_encoder_blocks):
        shapes.update(_attention_shapes(f"enc.{i}.attn", d))
        shapes.update({
            f"enc.{i}.ln1.g": (d,), f"enc.{i}.ln1.b": (d,),
            f"enc.{i}.ff.w1": (d, cfg.d_ff), f"enc.{i}.ff.b1": (cfg.d_ff,),
            f"enc.{i}.ff.w2": (cfg.d_ff, d), f"enc.{i}.ff.b2": (d,),
            f"enc.{i}.ln2.g": (d,), f"enc.{i}.ln2.b": (d,),
        })
    for i in range(cfg.n_decoder_blocks):
        shapes.update(_attention_shapes(f"dec.{i}.self", d))
        shapes.update(_attention_shapes(f"dec.{i}.cross", d))
        shapes.update({
            f"dec.{i}.ln1.g": (d,), f"dec.{i}.ln1.b": (d,),
            f"dec.{i}.ln2.g": (d,), f"dec.{i}.ln2.b": (d,),
            f"dec.{i}.ff.w1": (d, cfg.d_ff), f"dec.{i}.ff.b1": (cfg.d_ff,),
            f"dec.{i}.ff.w2": (cfg.d_ff, d), f"dec.{i}.ff.b2": (d,),
            f"dec.{i}.ln3.g": (d,), f"dec.{i}.ln3.b": (d,),
        })
    shapes["head.proj.w"] = (d, v)
    shapes["head.proj.b"] = (v,)
    if cfg.use_gcmlp:
        shapes["head.w1"] = (v, v)
        shapes["head.w2"] = (v, v)
        shapes["head.w3"] = (v, v)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Xavier-uniform linear weights, zero biases and layer-norm shifts,
    unit layer-norm gains, N(0, 0.02) embeddings and positional tables."""
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("tok_emb", "dec.pos", "enc.pos"):
            data = rng.normal(0.0, 0.02, size=shape)
        elif leaf.startswith("w"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        elif leaf == "g":
            data = np.ones(shape)
        else:  # biases and layer-norm shifts
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(cfg.np_dtype), requires_grad=True)
    return params


@dataclass
class AttentionRecord:
    """Per-block attention weights captured during a decoder pass.

    Each entry is (n_heads, L, L) for self-attention and (n_heads, L, T_enc)
    for cross-attention; rows are softmax rows and sum to 1.
    """

    self_attn: list[np.ndarray] = field(default_factory=list)
    cross_attn: list[np.ndarray] = field(default_factory=list)


@functools.lru_cache(maxsize=64)
def causal_mask(size: int) -> np.ndarray:
    return np.tril(np.ones((size, size), dtype=bool))


def _linear(x: Tensor, params, name: str) -> Tensor:
    return T.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def _mha(x_q: Tensor, x_kv: Tensor, params, prefix: str, cfg: ModelConfig,
         mask: np.ndarray | None, training: bool, rng, sink: list | None) -> Tensor:
    q = T.matmul(x_q, params[f"{prefix}.wq"]) + params[f"{prefix}.bq"]
    k = T.matmul(x_kv, params[f"{prefix}.wk"]) + params[f"{prefix}.bk"]
    v = T.matmul(x_kv, params[f"{prefix}.wv"]) + params[f"{prefix}.bv"]
    ctx = T.multi_head_attention(q, k, v, cfg.n_heads, allowed=mask, sink=sink)
    return T.matmul(ctx, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def _sublayer(x: Tensor, out: Tensor, params, ln: str, cfg: ModelConfig,
              training: bool, rng) -> Tensor:
    # Post-norm residual: LN(x + dropout(sublayer(x))).
    out = T.dropout(out, cfg.dropout, rng, training)
    return T.layer_norm(x + out, params[f"{ln}.g"], params[f"{ln}.b"])


def embed_input(features: np.ndarray, cfg: ModelConfig, params) -> Tensor:
    """Project features to d_model rows; patches mode adds its positional table.

    `features` is (T, input_dim): flattened patches in patches mode, raw
    128-bin frames in clip mode (which has no pre-encoder positional table).
    """
    if features.shape[1] != cfg.input_dim:
        raise ValueError(
            f"expected {cfg.input_dim}-dim encoder inputs for {cfg.input_mode} mode, "
            f"got {features.shape[1]}"
        )
    x = Tensor(np.asarray(features, dtype=cfg.np_dtype))
    emb = _linear(x, params, "input")
    if cfg.input_mode == "patches" and cfg.use_pos_emb:
        n = features.shape[0]
        table = params["enc.pos"]
        if n > table.shape[0]:
            raise ValueError(
                f"input sequence of {n} patches exceeds positional table of {table.shape[0]}"
            )
        emb = emb + T.narrow(table, 0, 0, n)
    return emb


def encoder_forward(emb: Tensor, params, cfg: ModelConfig,
                    training: bool = False, rng=None) -> Tensor:
    """N blocks of {self-attention, feed-forward}, full (unmasked) attention."""
    x = emb
    for i in range(cfg.n_encoder_blocks):
        attn = _mha(x, x, params, f"enc.{i}.attn", cfg, None, training, rng, None)
        x = _sublayer(x, attn, params, f"enc.{i}.ln1", cfg, training, rng)
        hidden = T.relu(T.matmul(x, params[f"enc.{i}.ff.w1"]) + params[f"enc.{i}.ff.b1"])
        ff = T.matmul(hidden, params[f"enc.{i}.ff.w2"]) + params[f"enc.{i}.ff.b2"]
        x = _sublayer(x, ff, params, f"enc.{i}.ln2", cfg, training, rng)
    return x


def decoder_forward(enc_out: Tensor, token_ids, params, cfg: ModelConfig,
                    branch: str = "normal", training: bool = False, rng=None,
                    collect_attention: bool = False):
    """One branch pass over the shared decoder blocks.

    Returns (L, d_model) states and a list of AttentionRecord per block.
    The causal mask keeps step t a function of tokens <= t only.
    """
    ids = np.asarray(token_ids, dtype=np.intp)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token_ids must be a non-empty 1-D sequence")
    if ((ids < 0) | (ids >= cfg.vocab_size)).any():
        bad = ids[(ids < 0) | (ids >= cfg.vocab_size)][0]
        raise ValueError(f"unknown token id {bad} for vocab of {cfg.vocab_size}")
    expected = {"normal": BOS_ID, "reverse": BOS_REV_ID}
    if branch not in expected:
        raise ValueError(f"branch must be 'normal' or 'reverse', got {branch!r}")
    if ids[0] != expected[branch]:
        raise ValueError(f"{branch} branch input must start with token {expected[branch]}")
    n = ids.size
    if n > cfg.max_len:
        raise ValueError(f"decoder input of {n} tokens exceeds max_len {cfg.max_len}")

    x = T.gather_rows(params["tok_emb"], ids) + T.narrow(params["dec.pos"], 0, 0, n)
    mask = causal_mask(n)
    records: list[AttentionRecord] = []
    for i in range(cfg.n_decoder_blocks):
        rec = AttentionRecord()
        self_sink = rec.self_attn if collect_attention else None
        cross_sink = rec.cross_attn if collect_attention else None
        attn = _mha(x, x, params, f"dec.{i}.self", cfg, mask, training, rng, self_sink)
        x = _sublayer(x, attn, params, f"dec.{i}.ln1", cfg, training, rng)
        cross = _mha(x, enc_out, params, f"dec.{i}.cross", cfg, None, training, rng, cross_sink)
        x = _sublayer(x, cross, params, f"dec.{i}.ln2", cfg, training, rng)
        hidden = T.relu(T.matmul(x, params[f"dec.{i}.ff.w1"]) + params[f"dec.{i}.ff.b1"])
        ff = T.matmul(hidden, params[f"dec.{i}.ff.w2"]) + params[f"dec.{i}.ff.b2"]
        x = _sublayer(x, ff, params, f"dec.{i}.ln3", cfg, training, rng)
        if collect_attention:
            records.append(rec)
    return x, records


def gcmlp_forward(x: Tensor, params) -> Tensor:
    """Gated MLP head on already-projected (L, V) rows.

    F1 = x W1; F2 = ReLU(F1 W2); gate = sigmoid(F1 W3);
    out = softmax((1-gate)*F2 + gate*F1) row-wise.
    """
    f1 = T.matmul(x, params["head.w1"])
    f2 = T.relu(T.matmul(f1, params["head.w2"]))
    gate = T.sigmoid(T.matmul(f1, params["head.w3"]))
    fused = (1.0 - gate) * f2 + gate * f1
    return T.softmax(fused, axis=-1)


def head_forward(dec_out: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Decoder states -> per-step probability rows."""
    projected = _linear(dec_out, params, "head.proj")
    if cfg.use_gcmlp:
        return gcmlp_forward(projected, params)
    return T.softmax(projected, axis=-1)


def gct_forward(features: np.ndarray, normal_in, reverse_in, cfg: ModelConfig, params,
                training: bool = False, rng=None, collect_attention: bool = False):
    """Full teacher-forced pass: one encoder run, both decoder branches.

    Returns (p, p_reverse, records) where records maps branch name to its
    per-block attention list.
    """
    emb = embed_input(features, cfg, params)
    enc_out = encoder_forward(emb, params, cfg, training, rng)
    d_fwd, rec_fwd = decoder_forward(enc_out, normal_in, params, cfg, "normal",
                                     training, rng, collect_attention)
    d_rev, rec_rev = decoder_forward(enc_out, reverse_in, params, cfg, "reverse",
                                     training, rng, collect_attention)
    p = head_forward(d_fwd, params, cfg)
    p_rev = head_forward(d_rev, params, cfg)
    return p, p_rev, {"normal": rec_fwd, "reverse": rec_rev}


def features_for_encoder(spec: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Spectrogram -> encoder input rows per the configured input mode."""
    from . import frontend

    if cfg.input_mode == "patches":
        return frontend.to_patches(spec, cfg.patch_time, cfg.patch_freq).patches
    return np.asarray(spec)
