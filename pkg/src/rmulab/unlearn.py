"""Memorization fine-tuning, RMU / Adaptive RMU steering losses and baselines.

Per-token losses use the squared L2 distance averaged over tokens, without
dividing by the hidden width::

    forget (rmu)      mean_t || h_u(t) - c * u ||^2
    forget (adaptive) mean_t || h_u(t) - beta * ||h_f(t)|| * u ||^2
    retain            mean_t || h_u(t) - h_f(t) ||^2
    total             forget + alpha * retain

``h_u`` / ``h_f`` are the layer-``l`` residual streams of the model being
unlearned and of its frozen copy; the window ``(l-2, l-1, l)`` is trained.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Corpus, Document, Tokenizer, encode_record
from .model import (Model, forward, hidden_states, lm_loss, pad_batch, set_all_trainable,
                    set_trainable, validate_window, window_param_names)

log = logging.getLogger(__name__)

METHODS = ("rmu", "adaptive-rmu", "gradient-ascent", "gradient-difference")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ControlVector:
    u: np.ndarray
    seed: int


def make_control_vector(d: int, seed: int, normalize: bool = True) -> ControlVector:
    """Coordinates drawn uniformly from [0, 1), then scaled to unit L2 norm."""
    if d < 1:
        raise ValueError(f"control vector dimension must be >= 1, got {d}")
    u = np.random.default_rng(seed).random(d)
    if normalize:
        u = u / np.linalg.norm(u)
    return ControlVector(u, seed)


@dataclass
class UnlearnConfig:
    method: str = "adaptive-rmu"
    layer: int = 5
    c: float = 20.0
    # beta, alpha and lr were tuned on the desk model; 5 / 100 / 1e-3 left it unchanged in 500 steps
    beta: float = 2.0
    alpha: float = 8.0
    lr: float = 3e-2
    optimizer: str = "adam"
    steps: int = 500
    seed: int = 0
    scope: str = "mlp-down-only"
    completion_only: bool = False
    normalize_u: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.c <= 0 or self.beta <= 0:
            raise ValueError("c and beta must be positive")
        if self.alpha < 0 or self.steps < 0 or self.lr <= 0:
            raise ValueError("alpha and steps must be non-negative and lr positive")
        if self.layer < 2:
            raise ValueError(f"layer must be >= 2 so the window (l-2, l-1, l) exists, got {self.layer}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def window(self) -> tuple[int, int, int]:
        return (self.layer - 2, self.layer - 1, self.layer)


@dataclass
class StepReport:
    step: int
    forget_loss: float
    retain_loss: float
    total_loss: float
    forget_id: str
    retain_id: str


# -- losses ----------------------------------------------------------------


def _at(trace, layer):
    if isinstance(trace, dict):
        if layer not in trace:
            raise KeyError(f"layer {layer} missing from activation trace (have {sorted(trace)})")
        return trace[layer]
    return trace


def _as_rows(h):
    h = h if isinstance(h, Tensor) else Tensor(h)
    if h.data.ndim != 2 or h.shape[0] < 1:
        raise ValueError(f"activations must be T x d with T >= 1, got {h.shape}")
    return h


def rmu_forget_loss(trace_u, u, c: float, layer: int | None = None) -> Tensor:
    h = _as_rows(_at(trace_u, layer))
    uu = u.u if isinstance(u, ControlVector) else np.asarray(u, dtype=np.float64)
    target = np.broadcast_to(c * uu, h.shape).copy()
    return ad.scale(ad.mse(h, target), h.shape[1])


def retain_loss(trace_u, trace_f, layer: int | None = None) -> Tensor:
    h = _as_rows(_at(trace_u, layer))
    hf = _as_rows(_at(trace_f, layer))
    if h.shape != hf.shape:
        raise ValueError(f"token-count mismatch between traces: {h.shape} vs {hf.shape}")
    return ad.scale(ad.mse(h, hf.data), h.shape[1])


def adaptive_forget_loss(trace_u, trace_f, u, beta: float, layer: int | None = None) -> Tensor:
    h = _as_rows(_at(trace_u, layer))
    hf = _as_rows(_at(trace_f, layer))
    if h.shape != hf.shape:
        raise ValueError(f"token-count mismatch between traces: {h.shape} vs {hf.shape}")
    uu = u.u if isinstance(u, ControlVector) else np.asarray(u, dtype=np.float64)
    target = beta * np.linalg.norm(hf.data, axis=1, keepdims=True) * uu[None, :]
    return ad.scale(ad.mse(h, target), h.shape[1])


# -- sampling --------------------------------------------------------------


def _pick_weighted(docs: Sequence[Document], rng) -> Document:
    groups: dict[int, list[Document]] = {}
    for d in docs:
        groups.setdefault(d.subtask, []).append(d)
    keys = sorted(groups)
    sizes = np.array([len(groups[k]) for k in keys], dtype=np.float64)
    k = keys[int(rng.choice(len(keys), p=sizes / sizes.sum()))]
    group = groups[k]
    return group[int(rng.integers(len(group)))]


def sample_pair(corpus: Corpus, rng) -> tuple[Document, Document]:
    """One forget and one retain record; subtask drawn proportionally to split size."""
    forget = corpus.select(split="forget")
    retain = corpus.select(split="retain")
    if not forget or not retain:
        raise ValueError("sample_pair needs non-empty forget and retain splits")
    return _pick_weighted(forget, rng), _pick_weighted(retain, rng)


# -- unlearning ------------------------------------------------------------


class Unlearner:
    """Owns the trainable model, its frozen reference, optimizer state and caches."""

    def __init__(self, model: Model, frozen: Model | None, cfg: UnlearnConfig, tok: Tokenizer,
                 u: ControlVector | None = None, optimizer=None, apply_mask: bool = True):
        validate_window(model, cfg.window)
        steering = cfg.method in ("rmu", "adaptive-rmu")
        if steering and (frozen is None or not frozen.frozen):
            raise ValueError("reference model must be a frozen clone")
        self.model, self.frozen, self.cfg, self.tok = model, frozen, cfg, tok
        self.u = u or make_control_vector(model.config.d_model, cfg.seed, cfg.normalize_u)
        if self.u.u.shape != (model.config.d_model,):
            raise ValueError("control vector dimension must equal d_model")
        if apply_mask:
            set_trainable(model, cfg.window, cfg.scope)
        self.optimizer = optimizer or ad.make_optimizer(cfg.optimizer, model.params, cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self._ids: dict[str, tuple[list[int], int]] = {}
        self._frozen_h: dict[str, np.ndarray] = {}
        self.step_index = 0

    def encoded(self, doc: Document) -> tuple[list[int], int]:
        if doc.id not in self._ids:
            ids, plen = encode_record(self.tok, doc.prompt, doc.completion, strict=False)
            self._ids[doc.id] = (ids[:-1], plen)
        return self._ids[doc.id]

    def _rows(self, doc: Document) -> slice:
        _, plen = self.encoded(doc)
        return slice(plen, None) if self.cfg.completion_only else slice(0, None)

    def frozen_hidden(self, doc: Document) -> np.ndarray:
        if doc.id not in self._frozen_h:
            ids, _ = self.encoded(doc)
            self._frozen_h[doc.id] = hidden_states(self.frozen, ids, [self.cfg.layer])[self.cfg.layer].data
        return self._frozen_h[doc.id][self._rows(doc)]

    def live_hidden(self, doc: Document) -> Tensor:
        ids, _ = self.encoded(doc)
        h = hidden_states(self.model, ids, [self.cfg.layer])[self.cfg.layer]
        rows = self._rows(doc)
        return h if rows == slice(0, None) else h[rows]

    def _check_mask(self) -> None:
        want = set(window_param_names(self.model, self.cfg.window, self.cfg.scope))
        if set(self.model.trainable_names()) != want:
            raise ValueError("model trainability mask does not match the configured window")

    def losses(self, forget: Document, retain: Document) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        if cfg.method in ("rmu", "adaptive-rmu"):
            hu = self.live_hidden(forget)
            if cfg.method == "rmu":
                lf = rmu_forget_loss(hu, self.u, cfg.c)
            else:
                lf = adaptive_forget_loss(hu, self.frozen_hidden(forget), self.u, cfg.beta)
            lr = retain_loss(self.live_hidden(retain), self.frozen_hidden(retain))
            return lf, lr
        return self._lm(forget), self._lm(retain)

    def _lm(self, doc: Document) -> Tensor:
        ids, plen = encode_record(self.tok, doc.prompt, doc.completion, strict=False)
        x = np.asarray(ids[:-1])
        y = np.asarray(ids[1:])
        mask = (np.arange(1, len(ids)) >= plen).astype(np.float64)
        logits, _ = forward(self.model, x)
        return lm_loss(logits, y, mask)

    def step(self, forget: Document, retain: Document | None) -> StepReport:
        self._check_mask()
        cfg = self.cfg
        self.optimizer.zero_grad()
        # overflow is reported below as a DivergenceError, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"), ad.Tape() as tape:
            if cfg.method in ("rmu", "adaptive-rmu"):
                lf, lr = self.losses(forget, retain)
                total = lf + ad.scale(lr, cfg.alpha)
                f_val, r_val = lf.item(), lr.item()
                t_val = f_val + cfg.alpha * r_val
            else:
                lf = self._lm(forget)
                total = -lf
                f_val, r_val = lf.item(), 0.0
                if cfg.method == "gradient-difference" and retain is not None:
                    lr = self._lm(retain)
                    total = total + lr
                    r_val = lr.item()
                t_val = -f_val + r_val
        if not math.isfinite(t_val):
            raise DivergenceError(f"non-finite loss at step {self.step_index}: forget={f_val}, retain={r_val}")
        tape.backward(total)
        self.optimizer.step()
        rep = StepReport(self.step_index, f_val, r_val, t_val, forget.id, retain.id if retain else "")
        self.step_index += 1
        return rep

    def run(self, corpus: Corpus, steps: int | None = None,
            callback: Callable[[StepReport], None] | None = None) -> list[StepReport]:
        reports = []
        for _ in range(self.cfg.steps if steps is None else steps):
            forget, retain = sample_pair(corpus, self.rng)
            rep = self.step(forget, retain)
            reports.append(rep)
            if callback:
                callback(rep)
        return reports


def unlearn_step(model: Model, frozen: Model, pair: tuple[Document, Document], cfg: UnlearnConfig,
                 u: ControlVector, tok: Tokenizer, optimizer=None) -> StepReport:
    """One standalone step; the model's trainability mask must already match ``cfg``.

    Pass the same ``optimizer`` across calls to keep Adam state.
    """
    if cfg.method not in ("rmu", "adaptive-rmu"):
        raise ValueError("unlearn_step runs rmu or adaptive-rmu; use baseline_step for baselines")
    return Unlearner(model, frozen, cfg, tok, u, optimizer, apply_mask=False).step(*pair)


def baseline_step(method: str, model: Model, pair: tuple[Document, Document | None], cfg: UnlearnConfig,
                  tok: Tokenizer, optimizer=None) -> StepReport:
    """Gradient ascent (maximise forget LM loss) or gradient difference (L = -L_f + L_r)."""
    if method not in ("gradient-ascent", "gradient-difference"):
        raise ValueError(f"unknown baseline {method!r}")
    cfg = UnlearnConfig(**{**asdict(cfg), "method": method})
    return Unlearner(model, None, cfg, tok, None, optimizer, apply_mask=False).step(*pair)


# -- diagnostics -----------------------------------------------------------


def steering_stats(model: Model, frozen: Model, tok: Tokenizer, docs: Sequence[Document], layer: int,
                   u: ControlVector, completion_only: bool = False) -> dict[str, float]:
    """Mean per-token cosine(h_u, u) and mean ||h_u|| / ||h_f|| over ``docs`` at ``layer``.

    With ``completion_only`` only the rows an unlearning loss with the same flag
    would see are counted.
    """
    cos, ratio = [], []
    for d in docs:
        ids, plen = encode_record(tok, d.prompt, d.completion, strict=False)
        rows = slice(plen, None) if completion_only else slice(0, None)
        hu = hidden_states(model, ids[:-1], [layer])[layer].data[rows]
        hf = hidden_states(frozen, ids[:-1], [layer])[layer].data[rows]
        nu = np.linalg.norm(hu, axis=1)
        cos.append(hu @ u.u / np.maximum(nu, 1e-12))
        ratio.append(nu / np.maximum(np.linalg.norm(hf, axis=1), 1e-12))
    return {"cosine": float(np.mean(np.concatenate(cos))), "norm_ratio": float(np.mean(np.concatenate(ratio)))}


# -- memorization ----------------------------------------------------------


@dataclass
class MemorizeConfig:
    max_epochs: int = 100
    lr: float = 3e-3
    batch_size: int = 16
    seed: int = 0
    target_rouge: float = 0.95
    target_qa: float = 0.9
    target_probe: float = 0.9
    eval_every: int = 10
    min_lr_frac: float = 0.1
    loss_on: str = "all"  # "all" tokens of each record or "completion" only

    def __post_init__(self):
        if self.loss_on not in ("all", "completion"):
            raise ValueError(f"loss_on must be 'all' or 'completion', got {self.loss_on!r}")
        if self.batch_size < 1 or self.lr <= 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1 and lr positive")


@dataclass
class MemorizeResult:
    epochs: int
    stop_reason: str
    history: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)


def _batch_arrays(encoded: list[tuple[list[int], int]], pad_id: int, completion_only: bool = False):
    seqs = [ids for ids, _ in encoded]
    full = pad_batch(seqs, pad_id)
    x, y = full[:, :-1], full[:, 1:]
    mask = np.zeros(y.shape)
    for r, (ids, plen) in enumerate(encoded):
        mask[r, (plen - 1 if completion_only else 0):len(ids) - 1] = 1.0
    return x, y, mask


def memorization_scores(model: Model, corpus: Corpus, tok: Tokenizer, probe=None) -> dict[str, float]:
    from .metrics import decode_records, exact_match, knowledge_probe, rouge_l

    out = {}
    for split in ("forget", "retain"):
        sc = corpus.select(split=split, kind="sentence-completion")
        qa = corpus.select(split=split, kind="qa")
        out[f"{split}_rouge"] = float(np.mean([rouge_l(o, d.completion) for o, d in
                                               zip(decode_records(model, tok, sc), sc)]))
        out[f"{split}_qa"] = float(np.mean([exact_match(o, d.completion) for o, d in
                                            zip(decode_records(model, tok, qa), qa)]))
    if probe:
        out["probe"] = knowledge_probe(model, probe, tok)
    return out


def memorize(model: Model, corpus: Corpus, tok: Tokenizer, cfg: MemorizeConfig,
             extra_records: Sequence[tuple[str, str]] = (), probe=None,
             callback: Callable[[dict], None] | None = None) -> MemorizeResult:
    """LM fine-tuning on retain + forget records (+ extra records), length-bucketed
    batches, Adam with cosine decay.

    Stops once forget and retain sentence-completion ROUGE-L reach
    ``target_rouge`` and QA exact match reaches ``target_qa`` (and probe
    accuracy ``target_probe`` when a probe is given), or at ``max_epochs``.
    """
    train = [encode_record(tok, d.prompt, d.completion) for d in corpus.documents
             if d.split in ("retain", "forget")]
    train += [encode_record(tok, p, c) for p, c in extra_records]
    if cfg.max_epochs <= 0:
        return MemorizeResult(0, "zero-epochs")
    set_all_trainable(model)
    opt = ad.Adam(model.params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    result = MemorizeResult(0, "max-epochs")
    total_steps = cfg.max_epochs * math.ceil(len(train) / cfg.batch_size)
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        # bucket by length inside each epoch so batches carry little padding
        chunks = [order[i:i + cfg.batch_size * 4] for i in range(0, len(order), cfg.batch_size * 4)]
        batches = []
        for chunk in chunks:
            chunk = sorted(chunk, key=lambda i: len(train[int(i)][0]))
            batches += [chunk[i:i + cfg.batch_size] for i in range(0, len(chunk), cfg.batch_size)]
        losses = []
        for b in rng.permutation(len(batches)):
            batch = [train[int(i)] for i in batches[int(b)]]
            x, y, mask = _batch_arrays(batch, tok.pad_id, cfg.loss_on == "completion")
            frac = step / max(total_steps - 1, 1)
            opt.lr = cfg.lr * (cfg.min_lr_frac + (1 - cfg.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))
            opt.zero_grad()
            with ad.Tape() as tape:
                sel = mask > 0
                logits, _ = forward(model, x, select=sel)
                loss = lm_loss(logits, y[sel], np.ones(int(sel.sum())))
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"memorization loss became {loss.item()} at epoch {epoch}")
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
            step += 1
        result.epochs = epoch
        entry = {"epoch": epoch, "loss": float(np.mean(losses))}
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            entry.update(memorization_scores(model, corpus, tok, probe))
            done = (entry["forget_rouge"] >= cfg.target_rouge and entry["retain_rouge"] >= cfg.target_rouge
                    and entry["forget_qa"] >= cfg.target_qa and entry["retain_qa"] >= cfg.target_qa
                    and (probe is None or entry["probe"] >= cfg.target_probe))
            result.final = entry
            if done:
                result.stop_reason = "targets-met"
        result.history.append(entry)
        log.info("memorize %s", entry)
        if callback:
            callback(entry)
        if result.stop_reason == "targets-met":
            break
    for p in model.params.values():
        p.requires_grad = False
        p.grad = None
    return result
