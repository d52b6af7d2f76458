"""Joint risk captioning and localization model.

Two routes over one driving clip. The low-resolution route runs every frame
through the patch transformer and pools a handful of query tokens that a
small autoregressive decoder turns into the risk caption. The
high-resolution route looks at the last frame only: a residual CNN builds a
feature grid, a prompt-driven highlight suppresses background cells, and the
result feeds both the gated incorporation sites inside the video encoder and
the box detection head.

Every optional piece can be switched off through the ablation flags; with
all of them off the model degrades to the video-only captioner plus a plain
box MLP.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Tensor
from .config import RunConfig
from .encoder import VideoEncoder, incorporation_sites
from .grammar import ANSWER_SPAN, INSTRUCTION_PROMPT, LOCALIZATION_PROMPT, Vocabulary, parse_caption
from .hrbranch import (
    BoxMlp,
    IncorporationSite,
    LearnedQueryDetector,
    ObjectHighlighter,
    SpanQueryDetector,
    SpatialExtractor,
    apply_highlight,
)
from .lm import CaptionDecoder
from .modules import Module, ModuleList, Parameter
from .rng import named_rng

# Extra decode steps past the longest training answer, so a slightly
# rambling generation still reaches its end-of-sequence token.
DECODE_MARGIN = 4


class DualBranchModel(Module):
    """Video captioner with a high-resolution perception branch."""

    def __init__(self, cfg: RunConfig, vocab: Vocabulary, max_answer_len: int, seed: int):
        super().__init__()
        m = cfg.model
        self.flags = m.ablation
        self.variant = m.head_variant
        self.span_mode = m.span_mode
        self.vocab = vocab
        dtype = np.dtype(m.dtype)

        self.encoder = VideoEncoder(cfg.scene.lr_size, cfg.scene.clip_len, m, seed)
        prompt_ids = np.asarray(vocab.encode(INSTRUCTION_PROMPT), dtype=np.int64)
        self.loc_prompt_ids = np.asarray(vocab.encode(LOCALIZATION_PROMPT), dtype=np.int64)
        self.max_new = max_answer_len + DECODE_MARGIN
        max_seq = m.n_queries + len(prompt_ids) + self.max_new
        self.lm = CaptionDecoder(len(vocab), max_seq, m.n_queries, prompt_ids, m, seed)

        # High-resolution route. d_i is the feature width the incorporation
        # sites and detection heads attend over; without the dedicated
        # extractor it falls back to the encoder's own patch embeddings.
        d_i = 0
        if not self.flags.baseline_only:
            if self.flags.no_hrse:
                d_i = m.d_v
            else:
                self.cnn = SpatialExtractor(m.cnn_width, named_rng(seed, "init/hr/cnn"), dtype)
                d_i = self.cnn.out_channels
                # where-am-I signal for the flattened grid; without it the
                # cross-attention pools are position blind and boxes cannot
                # be regressed past the dataset mean
                cells = (cfg.scene.hr_size // 16) ** 2
                self.hr_pos = Parameter(
                    named_rng(seed, "init/hr/pos").normal(0.0, 0.02, size=(cells, d_i)),
                    dtype=dtype,
                )
            if not self.flags.no_em:
                self.highlighter = ObjectHighlighter(
                    d_i, m.d_l, named_rng(seed, "init/hr/highlight"), dtype
                )
            if not self.flags.no_im:
                self.sites = incorporation_sites(m.n_layers)
                n_sites = len(set(self.sites.values()))
                self.incorporation = ModuleList(
                    IncorporationSite(m.d_v, d_i, m.d_v, named_rng(seed, f"init/hr/incorporate{j}"), dtype)
                    for j in range(n_sites)
                )
        self.d_i = d_i

        r_head = named_rng(seed, "init/hr/head")
        if self.variant == "text_coords":
            pass  # the caption itself carries the coordinates
        elif self.flags.no_qdh:
            self.detector = BoxMlp(m.d_l, m.qdh_dim, r_head, dtype)
        elif self.variant == "learned_query":
            self.detector = LearnedQueryDetector(
                m.n_learned_queries, m.d_l, d_i, m.qdh_dim, r_head, dtype, heads=m.qdh_heads
            )
        else:
            self.detector = SpanQueryDetector(m.d_l, d_i, m.qdh_dim, r_head, dtype, heads=m.qdh_heads)

    # -- feature plumbing ------------------------------------------------------

    def localization_prompt_vec(self) -> np.ndarray:
        """Mean token embedding of the localization question, detached."""
        return self.lm.tok.weight.data[self.loc_prompt_ids].mean(axis=0)

    def last_frame_grid(self, tokens: Tensor, batch: int) -> Tensor:
        """Patch tokens of each clip's final frame as a [B, G, G, d_v] grid."""
        g = self.encoder.grid
        l = self.encoder.clip_len
        rows = np.arange(batch, dtype=np.int64) * l + (l - 1)
        last = tokens[(rows,)]
        return last[:, 1:, :].reshape(batch, g, g, self.encoder.d_v)

    def presence_features(self, batch: dict) -> Tensor:
        """Feature grid the highlighter scores during its warmup phase."""
        if self.flags.no_hrse:
            b = batch["clip"].shape[0]
            tokens = self.encoder.embed(batch["clip"])
            return self.last_frame_grid(tokens, b)
        return self.cnn(Tensor(batch["hr"]))

    def hr_features(self, batch: dict, tokens: Tensor):
        """High-resolution feature sequence plus its highlight map.

        Returns (feats [B, N, d_i] or None, highlight [B, h, w] or None).
        The map is built on a throwaway tape from detached activations, then
        multiplied onto the live feature grid, so gradients reach the
        extractor through the highlighted product but never through the map.
        """
        if self.flags.baseline_only:
            return None, None
        b = batch["clip"].shape[0]
        if self.flags.no_hrse:
            grid = self.last_frame_grid(tokens, b)
            if self.flags.no_em:
                return grid.reshape(b, -1, self.d_i), None
            heat = self.highlighter.heatmap(grid.data, self.localization_prompt_vec())
            feats = apply_highlight(heat, grid)
            return feats.reshape(b, -1, self.d_i), heat
        feats = self.cnn(Tensor(batch["hr"]))
        heat = None
        if not self.flags.no_em:
            heat = self.highlighter.heatmap(feats.data, self.localization_prompt_vec())
            feats = apply_highlight(heat, feats)
        return feats.reshape(b, -1, self.d_i) + self.hr_pos, heat

    def encode_scene(self, batch: dict):
        """Shared trunk: clip plus HR frame -> (z_v, feats, highlight)."""
        b = batch["clip"].shape[0]
        tokens = self.encoder.embed(batch["clip"])
        feats, heat = self.hr_features(batch, tokens)
        inject = feats is not None and not self.flags.no_im
        z, _ = self.encoder.encode(
            tokens,
            b,
            incorporation=self.incorporation if inject else None,
            hr_feats=feats if inject else None,
            sites=self.sites if inject else None,
        )
        return z, feats, heat

    # -- training --------------------------------------------------------------

    def answer_rows(self, hidden: Tensor, answer_mask: np.ndarray):
        """Hidden states the detector reads, plus an optional pooling mask."""
        if self.span_mode == "full_answer":
            ta = hidden.shape[1] - self.lm.prefix_len
            return self.lm.answer_hidden(hidden, 0, ta), answer_mask
        s, e = ANSWER_SPAN
        return self.lm.answer_hidden(hidden, s, e), None

    def box_loss(self, hidden: Tensor, feats, batch: dict):
        if self.variant == "text_coords":
            return None
        gt = batch["box"]
        if not self.flags.no_qdh and self.variant == "learned_query":
            boxes, obj = self.detector(feats)
            return self.detector.loss(boxes, obj, gt)
        h_a, mask = self.answer_rows(hidden, batch["answer_mask"])
        if self.flags.no_qdh:
            pred = self.detector(h_a, span_mask=mask)
        else:
            pred = self.detector(h_a, feats, span_mask=mask)
        return ops.l1_loss(pred, gt)

    def forward_train(self, batch: dict, box_weight: float):
        """Joint loss on one batch. Returns (loss Tensor, float part dict)."""
        z, feats, _ = self.encode_scene(batch)
        cap_loss, hidden = self.lm.caption_loss(z, batch["answer_ids"], batch["answer_mask"])
        box = self.box_loss(hidden, feats, batch)
        if box is None:
            total = cap_loss
            parts = {"caption": float(cap_loss.data), "box": 0.0}
        else:
            total = cap_loss + box_weight * box
            parts = {"caption": float(cap_loss.data), "box": float(box.data)}
        parts["total"] = float(total.data)
        return total, parts

    def caption_logits(self, batch: dict) -> np.ndarray:
        """Teacher-forced answer-position logits; used by equivalence gates."""
        z, _, _ = self.encode_scene(batch)
        _, logits = self.lm.forward_hidden(z, batch["answer_ids"])
        p = self.lm.prefix_len
        ta = batch["answer_ids"].shape[1]
        return logits.data[:, p - 1 : p + ta - 1, :]

    # -- inference -------------------------------------------------------------

    def decode(self, batch: dict) -> list[dict]:
        """Greedy captions and box predictions.

        Each record carries the token list, the predicted box as a tuple (or
        None when coordinate text failed to parse), and the box source.
        """
        z, feats, _ = self.encode_scene(batch)
        pad, eos = self.vocab.pad_id, self.vocab.eos_id
        gen = self.lm.greedy_decode(z, self.max_new, eos, pad)
        texts = [self.vocab.decode(row) for row in gen]

        if self.variant == "text_coords":
            out = []
            for toks in texts:
                parsed = parse_caption(toks)
                source = "text" if parsed.box is not None else "sentinel"
                out.append({"tokens": toks, "box": parsed.box, "box_source": source})
            return out

        if not self.flags.no_qdh and self.variant == "learned_query":
            boxes, obj = self.detector(feats)
            pred = self.detector.predict(boxes, obj)
            return [
                {"tokens": toks, "box": tuple(float(v) for v in pred[i]), "box_source": "head"}
                for i, toks in enumerate(texts)
            ]

        # Span-pooling heads re-read the generated tokens teacher-forced.
        # The grammar pins the risk noun phrase to a fixed window, so a
        # failed parse falls back to that same window rather than skipping
        # the sample.
        need = ANSWER_SPAN[1] if self.span_mode == "noun_phrase" else 1
        ids = gen
        if ids.shape[1] < need:
            fill = np.full((ids.shape[0], need - ids.shape[1]), pad, dtype=ids.dtype)
            ids = np.concatenate([ids, fill], axis=1)
        hidden, _ = self.lm.forward_hidden(z, ids)
        if self.span_mode == "full_answer":
            mask = (ids != pad).astype(np.float64)
            dead = mask.sum(axis=1) == 0
            mask[dead, 0] = 1.0
        else:
            mask = None
        h_a, pool_mask = (
            (self.lm.answer_hidden(hidden, 0, ids.shape[1]), mask)
            if self.span_mode == "full_answer"
            else (self.lm.answer_hidden(hidden, *ANSWER_SPAN), None)
        )
        if self.flags.no_qdh:
            pred = self.detector(h_a, span_mask=pool_mask).data
        else:
            pred = self.detector(h_a, feats, span_mask=pool_mask).data
        return [
            {"tokens": toks, "box": tuple(float(v) for v in pred[i]), "box_source": "head"}
            for i, toks in enumerate(texts)
        ]

    # -- optimizer wiring ------------------------------------------------------

    def param_groups(self, hr_lr_mult: float, freeze_backbone: bool = False) -> list[dict]:
        """Parameter groups for the optimizer.

        The perception-route modules (extractor, incorporation, detector)
        train at `hr_lr_mult` times the base rate. The highlighter's
        similarity head never appears in any group: it is fitted during its
        own warmup phase and pinned afterwards. A frozen backbone drops the
        patch transformer, pooler, and embeddings but keeps adapters and the
        output projection trainable.
        """
        skip: set[int] = set()
        if freeze_backbone:
            for mod in self.encoder.backbone_modules():
                skip.update(id(p) for p in mod.parameters())
            skip.add(id(self.encoder.cls))
            skip.add(id(self.encoder.pos))
        if hasattr(self, "highlighter"):
            skip.update(id(p) for p in self.highlighter.parameters())

        hr_ids: set[int] = set()
        for name in ("cnn", "incorporation", "detector"):
            mod = getattr(self, name, None)
            if mod is not None:
                hr_ids.update(id(p) for p in mod.parameters())
        if hasattr(self, "hr_pos"):
            hr_ids.add(id(self.hr_pos))

        base, hr = [], []
        for _, p in self.named_parameters():
            if id(p) in skip:
                continue
            (hr if id(p) in hr_ids else base).append(p)
        groups = [{"params": base, "lr_scale": 1.0}]
        if hr:
            groups.append({"params": hr, "lr_scale": hr_lr_mult})
        return groups
