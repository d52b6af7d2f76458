"""Training loop, evaluation, checkpointing, and the ablation grid runner.

A run is a pure function of (config, dataset): sample order, initialization,
and the highlight warmup all draw from named streams of the run seed, so
identical inputs give byte-identical metrics. Before the main loop starts,
a gate verifies the zero-disturbance property (a fresh full model must match
a fresh caption-only baseline); training refuses to start if the gate fails.
"""

from __future__ import annotations

import io
import json
import os

import numpy as np

from . import ops
from .autograd import NonFiniteError, Tensor, concat
from .config import Ablation, RunConfig, canonical_json, config_hash, from_dict, to_dict
from .grammar import build_vocab, format_location, tokenize, Vocabulary
from .metrics import evaluate_predictions, report_to_json
from .model import DualBranchModel
from .optim import AdamW, cosine_lr
from .rng import named_rng
from .scenes import SceneDataset, load_dataset, render_frame, save_dataset


class TrainAbort(RuntimeError):
    """Raised when the loss goes non-finite; carries a diagnostic dict."""

    def __init__(self, diagnostics: dict):
        super().__init__(f"training aborted: {diagnostics}")
        self.diagnostics = diagnostics


class GateError(RuntimeError):
    """The zero-disturbance gate failed before training started."""


class Logger:
    """Writes lines to stdout and, when given a directory, to log.txt."""

    def __init__(self, run_dir=None, echo: bool = True):
        self.echo = echo
        self.fh = None
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)
            self.fh = open(os.path.join(run_dir, "log.txt"), "a", encoding="utf-8")

    def __call__(self, msg: str):
        if self.echo:
            print(msg)
        if self.fh:
            self.fh.write(msg + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()
            self.fh = None


# -- data plumbing -------------------------------------------------------------


def caption_text(meta: dict, variant: str) -> str:
    if variant == "text_coords":
        return meta["caption"] + " " + format_location(meta["box"])
    return meta["caption"]


def build_text_arrays(meta: list[dict], vocab: Vocabulary, variant: str):
    """Tokenized answers, padded, with an end token and a validity mask."""
    seqs = []
    for m in meta:
        seqs.append(vocab.encode(caption_text(m, variant)) + [vocab.eos_id])
    ta = max(len(s) for s in seqs)
    ids = np.full((len(seqs), ta), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), ta), dtype=np.float32)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask, ta


def prepare_data(ds: SceneDataset, vocab: Vocabulary, variant: str) -> dict:
    ids, mask, ta = build_text_arrays(ds.meta, vocab, variant)
    return {
        "clips": ds.clips,
        "hrs": ds.hrs,
        "answer_ids": ids,
        "answer_mask": mask,
        "boxes": np.asarray([m["box"] for m in ds.meta], dtype=np.float32),
        "meta": ds.meta,
        "max_answer_len": ta,
    }


def make_batch(data: dict, idx: np.ndarray) -> dict:
    return {
        "clip": data["clips"][idx].astype(np.float32) / 255.0,
        "hr": data["hrs"][idx].astype(np.float32) / 255.0,
        "answer_ids": data["answer_ids"][idx],
        "answer_mask": data["answer_mask"][idx],
        "box": data["boxes"][idx],
    }


def load_or_generate(cfg: RunConfig, data_dir=None, log=None):
    """Fetch both splits, generating and caching them when needed."""
    say = log or (lambda s: None)
    if data_dir and os.path.exists(os.path.join(data_dir, "train_manifest.json")):
        say(f"loading dataset from {data_dir}")
        train_ds = load_dataset(data_dir, "train")
        test_ds = load_dataset(data_dir, "test")
        if len(train_ds) != cfg.scene.n_train or len(test_ds) != cfg.scene.n_test:
            raise ValueError("cached dataset does not match the configured sizes")
        return train_ds, test_ds
    say(f"generating dataset ({cfg.scene.n_train} train / {cfg.scene.n_test} test)")
    train_ds = SceneDataset.generate(cfg.scene, "train")
    test_ds = SceneDataset.generate(cfg.scene, "test")
    if data_dir:
        save_dataset(train_ds, cfg.scene, data_dir, "train")
        save_dataset(test_ds, cfg.scene, data_dir, "test")
        say(f"cached dataset at {data_dir}")
    return train_ds, test_ds


# -- pre-training gate ---------------------------------------------------------


def gating_gap(cfg: RunConfig, vocab: Vocabulary, max_answer_len: int,
               n_samples: int = 8, seed: int | None = None) -> float:
    """Max caption-logit deviation between a fresh full model and baseline."""
    seed = cfg.train.seed if seed is None else seed
    full = DualBranchModel(cfg, vocab, max_answer_len, seed)
    base_cfg = from_dict(to_dict(cfg))
    base_cfg.model.ablation = Ablation(baseline_only=True)
    base = DualBranchModel(base_cfg, vocab, max_answer_len, seed)

    r = named_rng(seed, "gate/probe")
    s = cfg.scene
    ta = min(max_answer_len, 6)
    batch = {
        "clip": r.random((n_samples, s.clip_len, s.lr_size, s.lr_size, 3)).astype(np.float32),
        "hr": r.random((n_samples, s.hr_size, s.hr_size, 3)).astype(np.float32),
        "answer_ids": r.integers(3, len(vocab), size=(n_samples, ta)).astype(np.int64),
        "answer_mask": np.ones((n_samples, ta), dtype=np.float32),
        "box": np.tile(np.asarray([0.3, 0.3, 0.6, 0.6], dtype=np.float32), (n_samples, 1)),
    }
    return float(np.abs(full.caption_logits(batch) - base.caption_logits(batch)).max())


# -- highlight warmup ----------------------------------------------------------


def background_frames(size: int, n: int, rng, noise: float = 0.03) -> np.ndarray:
    base = render_frame([], 0, size).astype(np.float32) / 255.0
    out = base[None] + rng.normal(0.0, noise, size=(n, size, size, 3))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def pretrain_highlighter(model: DualBranchModel, data: dict, cfg: RunConfig, log) -> None:
    """Warm up the similarity head on object presence, then pin it.

    Positives are training frames (every scene contains objects); negatives
    are road renders with no objects plus pixel noise. With the dedicated
    extractor active it trains jointly with the head; in the shared-feature
    mode only the head trains.
    """
    flags = model.flags
    if flags.baseline_only or flags.no_em:
        return
    t = cfg.train
    steps = t.highlight_pretrain_steps
    if steps <= 0:
        return
    r = named_rng(t.seed, "pretrain/highlight")
    prompt = model.localization_prompt_vec()
    half = max(t.batch_size // 2, 2)

    if flags.no_hrse:
        params = list(model.highlighter.parameters())
    else:
        params = list(model.cnn.parameters()) + list(model.highlighter.parameters())
    opt = AdamW([{"params": params}], lr=t.highlight_pretrain_lr, weight_decay=0.0)

    n = data["clips"].shape[0]
    s = cfg.scene
    for step in range(steps):
        idx = r.integers(0, n, size=half)
        if flags.no_hrse:
            neg_clip = np.repeat(
                background_frames(s.lr_size, half, r)[:, None], s.clip_len, axis=1
            )
            pos = model.presence_features(make_batch(data, idx))
            neg = model.presence_features({"clip": neg_clip, "hr": None})
        else:
            pos_img = data["hrs"][idx].astype(np.float32) / 255.0
            neg_img = background_frames(s.hr_size, half, r)
            pos = model.cnn(Tensor(pos_img))
            neg = model.cnn(Tensor(neg_img))
        pos_logit = model.highlighter.presence_logits(pos, prompt)
        neg_logit = model.highlighter.presence_logits(neg, prompt)
        logits = concat([pos_logit, neg_logit], axis=0)
        labels = np.concatenate(
            [np.ones(pos_logit.shape[0]), np.zeros(neg_logit.shape[0])]
        ).astype(np.float64)
        loss = ops.binary_cross_entropy_logits(logits, labels)
        model.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == steps - 1:
            log(f"highlight warmup step {step} loss {float(loss.data):.4f}")
    model.zero_grad()


# -- checkpointing -------------------------------------------------------------


def _json_safe(obj):
    """Recursively turn numpy scalars and arrays into plain Python values."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_checkpoint(path: str, model: DualBranchModel, opt: AdamW, cfg: RunConfig,
                    step: int, max_answer_len: int, rng_state: dict) -> None:
    arrays: dict[str, np.ndarray] = {}
    shapes: dict[str, list[int]] = {}
    for name, p in model.named_parameters():
        arrays["param/" + name] = p.data
        shapes[name] = list(p.data.shape)
    for gi, g in enumerate(model.param_groups(cfg.train.hr_lr_mult, cfg.train.freeze_backbone)):
        for pi, p in enumerate(g["params"]):
            key = id(p)
            if key in opt._m:
                arrays[f"opt/m/{gi}/{pi}"] = opt._m[key]
                arrays[f"opt/v/{gi}/{pi}"] = opt._v[key]
                arrays[f"opt/t/{gi}/{pi}"] = np.asarray(opt._t[key], dtype=np.int64)
    meta = {
        "config": to_dict(cfg),
        "config_hash": config_hash(cfg),
        "step": step,
        "max_answer_len": max_answer_len,
        "shapes": shapes,
        "rng_state": _json_safe(rng_state),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str):
    """Rebuild (model, vocab, cfg, meta) from a checkpoint file."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(bytes(arrays.pop("meta")).decode())
    cfg = from_dict(meta["config"])
    if config_hash(cfg) != meta["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    vocab = build_vocab()
    model = DualBranchModel(cfg, vocab, meta["max_answer_len"], cfg.train.seed)
    state = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    opt_state = {k: v for k, v in arrays.items() if k.startswith("opt/")}
    return model, vocab, cfg, {**meta, "opt_arrays": opt_state}


def restore_optimizer(opt: AdamW, opt_arrays: dict) -> None:
    for gi, g in enumerate(opt.groups):
        for pi, p in enumerate(g["params"]):
            mk = f"opt/m/{gi}/{pi}"
            if mk in opt_arrays:
                key = id(p)
                opt._m[key] = opt_arrays[mk].copy()
                opt._v[key] = opt_arrays[f"opt/v/{gi}/{pi}"].copy()
                opt._t[key] = int(opt_arrays[f"opt/t/{gi}/{pi}"])


# -- training ------------------------------------------------------------------


def train_model(cfg: RunConfig, train_ds: SceneDataset, run_dir=None, log=None) -> dict:
    """Full training run. Returns model, vocab, and the per-step history."""
    own_logger = log is None
    say = log or Logger(run_dir)
    t = cfg.train
    vocab = build_vocab()
    data = prepare_data(train_ds, vocab, cfg.model.head_variant)
    ta = data["max_answer_len"]

    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.snapshot"), "w", encoding="utf-8") as fh:
            fh.write(canonical_json(cfg) + "\n")

    if not cfg.model.ablation.baseline_only:
        gap = gating_gap(cfg, vocab, ta)
        say(f"zero-disturbance gate: max logit gap {gap:.3e}")
        if gap > 1e-6:
            raise GateError(f"gate failed: logit gap {gap:.3e} exceeds 1e-6")

    model = DualBranchModel(cfg, vocab, ta, t.seed)
    pretrain_highlighter(model, data, cfg, say)

    groups = model.param_groups(t.hr_lr_mult, t.freeze_backbone)
    opt = AdamW(groups, lr=t.lr, weight_decay=t.weight_decay)
    order = named_rng(t.seed, "train/order")
    n = len(train_ds)
    history = []

    say(f"training: {t.steps} steps, batch {t.batch_size}, lr {t.lr:g} "
        f"(hr x{t.hr_lr_mult:g}), box weight {t.box_weight:g}, config {config_hash(cfg)[:12]}")
    for step in range(t.steps):
        lr = float(cosine_lr(step, t.steps, t.lr, t.lr_floor))
        if t.warmup_steps > 0:
            lr *= min(1.0, (step + 1) / t.warmup_steps)
        opt.lr = lr
        idx = order.integers(0, n, size=t.batch_size)
        batch = make_batch(data, idx)
        try:
            loss, parts = model.forward_train(batch, t.box_weight)
            if not np.isfinite(parts["total"]):
                raise NonFiniteError(f"loss value {parts['total']}")
            model.zero_grad()
            loss.backward()
            opt.step()
        except NonFiniteError as err:
            diag = {
                "step": step,
                "lr": lr,
                "grad_norm": opt.grad_norm(),
                "error": str(err),
            }
            say(f"abort: non-finite loss at step {step} (lr {lr:.3e}, "
                f"grad norm {diag['grad_norm']:.3e})")
            if own_logger:
                say_close(say)
            raise TrainAbort(diag) from err
        history.append({"step": step, "lr": lr, **parts})
        if step % t.log_every == 0 or step == t.steps - 1:
            say(f"step {step} lr {lr:.3e} loss {parts['total']:.4f} "
                f"caption {parts['caption']:.4f} box {parts['box']:.4f}")

    rng_state = order.bit_generator.state
    if run_dir:
        save_checkpoint(os.path.join(run_dir, "checkpoint"), model, opt, cfg, t.steps, ta, rng_state)
        say(f"checkpoint written to {os.path.join(run_dir, 'checkpoint')}")
    if own_logger:
        say_close(say)
    return {
        "model": model,
        "vocab": vocab,
        "history": history,
        "max_answer_len": ta,
        "optimizer": opt,
        "rng_state": rng_state,
    }


def say_close(log) -> None:
    if isinstance(log, Logger):
        log.close()


# -- evaluation ----------------------------------------------------------------


def evaluation_samples(ds: SceneDataset, variant: str) -> list[dict]:
    out = []
    for i, m in enumerate(ds.meta):
        out.append(
            {
                "id": i,
                "caption_tokens": tokenize(caption_text(m, variant)),
                "box": m["box"],
                "risk_class": m["risk_class"],
                "bucket": m["bucket"],
                "distractor": m["distractor"],
            }
        )
    return out


def evaluate_model(model: DualBranchModel, vocab: Vocabulary, test_ds: SceneDataset,
                   batch_size: int = 50) -> dict:
    data = prepare_data(test_ds, vocab, model.variant)
    samples = evaluation_samples(test_ds, model.variant)
    preds = []
    for start in range(0, len(test_ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(test_ds)))
        preds.extend(model.decode(make_batch(data, idx)))
    return evaluate_predictions(samples, preds)


# -- ablation grid -------------------------------------------------------------

GRID_ROWS = (
    ("full", Ablation()),
    ("no_hrse", Ablation(no_hrse=True)),
    ("no_qdh", Ablation(no_qdh=True)),
    ("no_im", Ablation(no_im=True)),
    ("no_em", Ablation(no_em=True)),
    ("baseline_only", Ablation(baseline_only=True)),
)

GRID_METRICS = ("miou", "bleu4", "avg", "risk_class_acc", "risk_class_acc_distractor")


def _row_config(cfg: RunConfig, flags: Ablation, seed: int) -> RunConfig:
    row = from_dict(to_dict(cfg))
    row.model.ablation = Ablation(**vars(flags))
    row.train.seed = seed
    return row


def run_ablation_grid(cfg: RunConfig, seeds, train_ds: SceneDataset,
                      test_ds: SceneDataset, rows=None, run_dir=None, log=None) -> list[dict]:
    """One training run per (flag setting, seed); aggregates mean and spread."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    say = log or Logger(run_dir)
    table = []
    for name, flags in rows or GRID_ROWS:
        reports = []
        for seed in seeds:
            row_cfg = _row_config(cfg, flags, seed)
            say(f"[{name} seed {seed}] training")
            result = train_model(row_cfg, train_ds, run_dir=None, log=say)
            rep = evaluate_model(result["model"], result["vocab"], test_ds,
                                 batch_size=row_cfg.train.eval_batch)
            say(f"[{name} seed {seed}] miou {rep['miou']:.4f} bleu4 {rep['bleu4']:.4f}")
            reports.append(rep)
        row = {"name": name, "seeds": seeds,
               "config_hash": config_hash(_row_config(cfg, flags, seeds[0]))}
        for key in GRID_METRICS:
            vals = [r[key] for r in reports if key in r]
            if vals:
                row[f"{key}_mean"] = float(np.mean(vals))
                row[f"{key}_min"] = float(min(vals))
                row[f"{key}_max"] = float(max(vals))
        row["reports"] = reports
        table.append(row)
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "ablation.json"), "w", encoding="utf-8") as fh:
            json.dump(table, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_grid_csv(table, os.path.join(run_dir, "ablation.csv"))
    return table


def write_grid_csv(table: list[dict], path: str) -> None:
    import csv

    cols = ["name", "config_hash"]
    for key in GRID_METRICS:
        cols += [f"{key}_mean", f"{key}_min", f"{key}_max"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in table:
            writer.writerow(row)


def format_grid(table: list[dict]) -> str:
    """Fixed-width comparison table, scores scaled to percent."""
    header = f"{'setting':<14} {'mIoU':>16} {'BLEU-4':>16} {'class acc':>16}  config"
    lines = [header, "-" * len(header)]
    for row in table:
        def cell(key):
            if f"{key}_mean" not in row:
                return f"{'-':>16}"
            m = row[f"{key}_mean"] * 100
            lo = row[f"{key}_min"] * 100
            hi = row[f"{key}_max"] * 100
            return f"{m:6.1f} [{lo:5.1f},{hi:5.1f}]"
        lines.append(
            f"{row['name']:<14} {cell('miou')} {cell('bleu4')} {cell('risk_class_acc')}  "
            f"{row['config_hash'][:12]}"
        )
    return "\n".join(lines)
