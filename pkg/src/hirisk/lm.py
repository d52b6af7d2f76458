"""Tiny autoregressive decoder producing the risk caption.

Input layout per sample: [visual tokens | prompt tokens | answer tokens].
The visual+prompt prefix is fully attendable from every position; answer
positions attend the prefix plus earlier answer positions (strictly causal
over text). Loss covers answer positions only.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Tensor, broadcast_to, concat
from .modules import Embedding, LayerNorm, Linear, Module, ModuleList, Parameter
from .encoder import TransformerBlock
from .rng import named_rng

NEG_INF = -1e9


def prefix_causal_mask(prefix_len: int, total_len: int, dtype=np.float32) -> np.ndarray:
    """Additive [T, T] mask: bidirectional prefix, causal suffix."""
    mask = np.full((total_len, total_len), NEG_INF, dtype=dtype)
    mask[:, :prefix_len] = 0.0
    idx = np.arange(total_len)
    mask[idx[:, None] >= idx[None, :]] = 0.0
    return mask


class CaptionDecoder(Module):
    def __init__(self, vocab_size: int, max_seq: int, n_visual: int, prompt_ids: np.ndarray,
                 cfg, seed: int):
        super().__init__()
        dtype = np.dtype(cfg.dtype)
        self.d_l = cfg.d_l
        self.n_visual = n_visual
        self.prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
        self.prefix_len = n_visual + len(self.prompt_ids)
        self.max_seq = max_seq
        self.vocab_size = vocab_size
        r = named_rng(seed, "init/lm/embed")
        self.tok = Embedding(vocab_size, cfg.d_l, r, dtype=dtype)
        self.pos = Parameter(r.normal(0.0, 0.02, size=(max_seq, cfg.d_l)), dtype=dtype)
        self.blocks = ModuleList(
            TransformerBlock(cfg.d_l, cfg.lm_heads, named_rng(seed, f"init/lm/block{i}"), dtype)
            for i in range(cfg.lm_layers)
        )
        self.final_ln = LayerNorm(cfg.d_l, dtype=dtype)
        self.head = Linear(cfg.d_l, vocab_size, named_rng(seed, "init/lm/head"), dtype=dtype)
        self._mask_cache: dict[int, np.ndarray] = {}

    def _mask(self, total: int) -> np.ndarray:
        if total not in self._mask_cache:
            self._mask_cache[total] = prefix_causal_mask(
                self.prefix_len, total, dtype=self.pos.dtype
            )
        return self._mask_cache[total]

    def forward_hidden(self, z_v: Tensor, answer_ids: np.ndarray):
        """Returns (hidden [B, T, d_l], logits [B, T, V]) over the full layout."""
        b = z_v.shape[0]
        ta = answer_ids.shape[1]
        total = self.prefix_len + ta
        if total > self.max_seq:
            raise ValueError(f"sequence length {total} exceeds max_seq {self.max_seq}")
        prompt = self.tok(np.tile(self.prompt_ids, (b, 1)))
        parts = [z_v, prompt]
        if ta:
            parts.append(self.tok(answer_ids))
        x = concat(parts, axis=1)
        x = x + self.pos[:total, :]
        mask = self._mask(total)
        for blk in self.blocks:
            x = blk(x, mask=mask)
        hidden = self.final_ln(x)
        return hidden, self.head(hidden)

    def caption_loss(self, z_v: Tensor, answer_ids: np.ndarray, answer_mask: np.ndarray):
        """Mean cross-entropy on answer positions; returns (loss, hidden)."""
        hidden, logits = self.forward_hidden(z_v, answer_ids)
        p = self.prefix_len
        ta = answer_ids.shape[1]
        pred = logits[:, p - 1 : p + ta - 1, :]
        loss = ops.cross_entropy_logits(pred, answer_ids, answer_mask)
        return loss, hidden

    def answer_hidden(self, hidden: Tensor, start: int, end: int) -> Tensor:
        """Hidden states of answer token positions [start, end)."""
        ta = hidden.shape[1] - self.prefix_len
        if not (0 <= start < end <= ta):
            raise ValueError(f"span [{start},{end}) outside answer length {ta}")
        p = self.prefix_len
        return hidden[:, p + start : p + end, :]

    def greedy_decode(self, z_v: Tensor, max_new: int, eos_id: int, pad_id: int) -> np.ndarray:
        """Lockstep batched argmax decoding; ties resolve to the lowest id.

        Finished rows emit pad. Returns [B, T_gen] token ids.
        """
        b = z_v.shape[0]
        out = np.zeros((b, 0), dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_new):
            _, logits = self.forward_hidden(z_v, out)
            step = np.argmax(logits.data[:, -1, :], axis=-1)
            step = np.where(done, pad_id, step)
            out = np.concatenate([out, step[:, None]], axis=1)
            done |= step == eos_id
            if done.all():
                break
        return out
