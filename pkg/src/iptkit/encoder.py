"""Small pre-norm transformer encoder with optional bottleneck adapters."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor
from .tokenizer import Alignment


@dataclass
class EncoderConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ffn_size: int = 512
    max_len: int = 128
    dropout: float = 0.1
    vocab_size: int = 8000
    segments: int = 2

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if min(self.layers, self.hidden, self.ffn_size, self.max_len, self.vocab_size) < 1:
            raise ValueError("encoder sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdapterConfig:
    size: int = 64
    activation: str = "gelu"

    def to_dict(self) -> dict:
        return asdict(self)


# One matrix per layer: T x H token states for layers 0 (embeddings) .. L.
LayerStates = list


class Encoder:
    """Parameters live in ``params`` under ``base/...`` and ``adapter/...`` names."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.adapter_config: AdapterConfig | None = None
        rng = np.random.default_rng(seed)
        H, F = config.hidden, config.ffn_size
        p: dict[str, Tensor] = {}
        p["base/emb/tok"] = tc.init_param((config.vocab_size, H), "normal", rng)
        p["base/emb/pos"] = tc.init_param((config.max_len, H), "normal", rng)
        p["base/emb/seg"] = tc.init_param((config.segments, H), "normal", rng)
        for l in range(config.layers):
            pre = f"base/layer{l}"
            p[f"{pre}/ln1/g"] = tc.init_param((H,), "ones", rng)
            p[f"{pre}/ln1/b"] = tc.init_param((H,), "zeros", rng)
            p[f"{pre}/attn/qkv_w"] = tc.init_param((H, 3 * H), "xavier_uniform", rng)
            p[f"{pre}/attn/qkv_b"] = tc.init_param((3 * H,), "zeros", rng)
            p[f"{pre}/attn/out_w"] = tc.init_param((H, H), "xavier_uniform", rng)
            p[f"{pre}/attn/out_b"] = tc.init_param((H,), "zeros", rng)
            p[f"{pre}/ln2/g"] = tc.init_param((H,), "ones", rng)
            p[f"{pre}/ln2/b"] = tc.init_param((H,), "zeros", rng)
            p[f"{pre}/ffn/w1"] = tc.init_param((H, F), "xavier_uniform", rng)
            p[f"{pre}/ffn/b1"] = tc.init_param((F,), "zeros", rng)
            p[f"{pre}/ffn/w2"] = tc.init_param((F, H), "xavier_uniform", rng)
            p[f"{pre}/ffn/b2"] = tc.init_param((H,), "zeros", rng)
        p["base/final_ln/g"] = tc.init_param((H,), "ones", rng)
        p["base/final_ln/b"] = tc.init_param((H,), "zeros", rng)
        self.params = p

    # -- registry ---------------------------------------------------------

    @property
    def base_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("base/")]

    @property
    def adapter_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("adapter/")]

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise KeyError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for n, arr in arrays.items():
            if arr.shape != self.params[n].shape:
                raise ValueError(f"{n}: shape {arr.shape} != {self.params[n].shape}")
            self.params[n].data = np.array(arr, dtype=np.float64)

    # -- adapters ---------------------------------------------------------

    def inject_adapters(self, config: AdapterConfig | None = None, seed: int = 0) -> "Encoder":
        """Add two residual bottleneck adapters per layer.

        Up-projections start at zero, so the adapted encoder computes exactly
        the same function as before injection.
        """
        if self.adapter_config is not None:
            raise RuntimeError("adapters already injected")
        config = config or AdapterConfig()
        H = self.config.hidden
        if not 0 < config.size < H:
            raise ValueError(f"adapter size must lie in (0, {H}), got {config.size}")
        if config.activation != "gelu":
            raise ValueError("only gelu adapters are supported")
        rng = np.random.default_rng(seed)
        for l in range(self.config.layers):
            for site in ("attn", "ffn"):
                pre = f"adapter/layer{l}/{site}"
                self.params[f"{pre}/down_w"] = tc.init_param((H, config.size), "xavier_uniform", rng)
                self.params[f"{pre}/down_b"] = tc.init_param((config.size,), "zeros", rng)
                self.params[f"{pre}/up_w"] = tc.init_param((config.size, H), "zeros", rng)
                self.params[f"{pre}/up_b"] = tc.init_param((H,), "zeros", rng)
        self.adapter_config = config
        return self

    def _adapter(self, x: Tensor, layer: int, site: str) -> Tensor:
        if self.adapter_config is None:
            return x
        p = self.params
        pre = f"adapter/layer{layer}/{site}"
        hidden = tc.gelu(x @ p[f"{pre}/down_w"] + p[f"{pre}/down_b"])
        return x + (hidden @ p[f"{pre}/up_w"] + p[f"{pre}/up_b"])

    # -- forward ----------------------------------------------------------

    def encode(self, ids: Sequence[int], segments: Sequence[int] | None = None,
               train: bool = False, rng: np.random.Generator | None = None) -> LayerStates:
        cfg = self.config
        T = len(ids)
        if T > cfg.max_len:
            raise ValueError(f"sequence of length {T} exceeds max_len {cfg.max_len}")
        if T == 0:
            raise ValueError("cannot encode an empty sequence")
        p = self.params
        seg = np.zeros(T, dtype=np.int64) if segments is None else np.asarray(segments)
        h = (tc.embedding_lookup(p["base/emb/tok"], ids)
             + tc.take(p["base/emb/pos"], slice(0, T))
             + tc.embedding_lookup(p["base/emb/seg"], seg))
        h = tc.dropout(h, cfg.dropout, rng, train)
        states = [h]
        H, nh = cfg.hidden, cfg.heads
        dh = H // nh
        scale = 1.0 / np.sqrt(dh)
        for l in range(cfg.layers):
            pre = f"base/layer{l}"
            a = tc.layer_norm(h, p[f"{pre}/ln1/g"], p[f"{pre}/ln1/b"])
            qkv = a @ p[f"{pre}/attn/qkv_w"] + p[f"{pre}/attn/qkv_b"]
            qkv = tc.transpose(tc.reshape(qkv, (T, 3, nh, dh)), (1, 2, 0, 3))
            q, k, v = qkv[0], qkv[1], qkv[2]
            att = tc.softmax(tc.mul_scalar(q @ tc.transpose(k), scale), axis=-1)
            att = tc.dropout(att, cfg.dropout, rng, train)
            ctx = tc.reshape(tc.transpose(att @ v, (1, 0, 2)), (T, H))
            o = ctx @ p[f"{pre}/attn/out_w"] + p[f"{pre}/attn/out_b"]
            o = tc.dropout(self._adapter(o, l, "attn"), cfg.dropout, rng, train)
            h = h + o
            f = tc.layer_norm(h, p[f"{pre}/ln2/g"], p[f"{pre}/ln2/b"])
            f = tc.gelu(f @ p[f"{pre}/ffn/w1"] + p[f"{pre}/ffn/b1"]) @ p[f"{pre}/ffn/w2"] + p[f"{pre}/ffn/b2"]
            f = tc.dropout(self._adapter(f, l, "ffn"), cfg.dropout, rng, train)
            h = h + f
            states.append(h)
        states[-1] = tc.layer_norm(h, p["base/final_ln/g"], p["base/final_ln/b"])
        return states


def pool_words(state: Tensor, alignment: Alignment) -> Tensor:
    """Average subword rows per word: row ``w`` is the mean over ``spans[w]``."""
    T = state.shape[0]
    N = len(alignment)
    pool = np.zeros((N, T))
    for w, (start, end) in enumerate(alignment.spans):
        if not 0 <= start < end <= T:
            raise IndexError(f"span {w} = [{start}, {end}) outside sequence of length {T}")
        pool[w, start:end] = 1.0 / (end - start)
    return Tensor(pool) @ state


def parser_inputs(state: Tensor, words: Tensor) -> Tensor:
    """Head candidates ``[x_CLS; X]``: the sequence-start row stands for the root."""
    return tc.concat_rows([state[0:1], words])


def head_dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    return tc.dropout(x, p, rng, train)
