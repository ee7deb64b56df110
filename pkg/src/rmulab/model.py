"""Pre-norm decoder-only transformer with residual-stream capture.

Parameter count for vocabulary ``V``, width ``d``, MLP width ``f = mlp_ratio * d``,
``L`` layers and context ``P``::

    V*d + P*d                      token + position embeddings
    + L * (4d + 3d^2 + 3d + d^2 + d + 2*d*f + f + d)
    + 2d + d*V                     final norm + output head

The hidden state captured for layer ``i`` is the residual stream after block
``i`` (attention and MLP both added), before block ``i + 1``.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1
SCOPES = ("mlp-down-only", "full-layer")


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 4
    max_seq_len: int = 128
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 3:
            raise ValueError(f"n_layers must be >= 3 so a three-layer window fits, got {self.n_layers}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if self.vocab_size < 2 or self.max_seq_len < 1 or self.mlp_ratio < 1:
            raise ValueError("vocab_size, max_seq_len and mlp_ratio must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return self.mlp_ratio * self.d_model


def expected_param_count(cfg: ModelConfig) -> int:
    V, d, f, L, P = cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.n_layers, cfg.max_seq_len
    per_layer = 4 * d + 3 * d * d + 3 * d + d * d + d + 2 * d * f + f + d
    return V * d + P * d + L * per_layer + 2 * d + d * V


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    frozen: bool = False

    def trainable_names(self) -> list[str]:
        return [k for k, p in self.params.items() if p.requires_grad]

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}


def layer_param_names(i: int) -> list[str]:
    p = f"h{i}."
    return [p + s for s in ("ln1.g", "ln1.b", "attn.w_qkv", "attn.b_qkv", "attn.w_o", "attn.b_o",
                            "ln2.g", "ln2.b", "mlp.w_up", "mlp.b_up", "mlp.w_down", "mlp.b_down")]


def build_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng(config.seed)
    d, f, V = config.d_model, config.d_ff, config.vocab_size

    def w(*shape):
        return rng.normal(0.0, 0.02, size=shape)

    params: dict[str, np.ndarray] = {"wte": w(V, d), "wpe": w(config.max_seq_len, d)}
    for i in range(config.n_layers):
        p = f"h{i}."
        params[p + "ln1.g"] = np.ones(d)
        params[p + "ln1.b"] = np.zeros(d)
        params[p + "attn.w_qkv"] = w(d, 3 * d)
        params[p + "attn.b_qkv"] = np.zeros(3 * d)
        params[p + "attn.w_o"] = w(d, d)
        params[p + "attn.b_o"] = np.zeros(d)
        params[p + "ln2.g"] = np.ones(d)
        params[p + "ln2.b"] = np.zeros(d)
        params[p + "mlp.w_up"] = w(d, f)
        params[p + "mlp.b_up"] = np.zeros(f)
        params[p + "mlp.w_down"] = w(f, d)
        params[p + "mlp.b_down"] = np.zeros(d)
    params["ln_f.g"] = np.ones(d)
    params["ln_f.b"] = np.zeros(d)
    params["head"] = w(d, V)
    return Model(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()})


def _block(model: Model, i: int, x: Tensor) -> Tensor:
    P = model.params
    cfg = model.config
    B, T, d = x.shape
    H, hd = cfg.n_heads, cfg.head_dim
    p = f"h{i}."
    h = ad.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
    qkv = h @ P[p + "attn.w_qkv"] + P[p + "attn.b_qkv"]
    qkv = qkv.reshape(B, T, 3, H, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = ad.softmax_rows(ad.causal_scores(q, k, 1.0 / np.sqrt(hd)))
    o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    x = x + (o @ P[p + "attn.w_o"] + P[p + "attn.b_o"])
    h = ad.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
    u = ad.gelu(h @ P[p + "mlp.w_up"] + P[p + "mlp.b_up"])
    return x + (u @ P[p + "mlp.w_down"] + P[p + "mlp.b_down"])


def _check_tokens(model: Model, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim not in (1, 2):
        raise ValueError(f"tokens must be 1-D or 2-D, got shape {ids.shape}")
    if ids.shape[-1] > model.config.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_seq_len {model.config.max_seq_len}")
    if ids.shape[-1] == 0:
        raise ValueError("empty token sequence")
    return ids


def _check_layers(model: Model, layers) -> list[int]:
    layers = sorted(set(int(i) for i in layers))
    for i in layers:
        if not 0 <= i < model.config.n_layers:
            raise IndexError(f"layer {i} outside [0, {model.config.n_layers})")
    return layers


def _trunk(model: Model, ids: np.ndarray, capture: list[int], upto: int):
    T = ids.shape[-1]
    batch = ids if ids.ndim == 2 else ids[None, :]
    x = ad.embedding(model.params["wte"], batch) + model.params["wpe"][:T]
    trace: dict[int, Tensor] = {}
    for i in range(upto + 1):
        x = _block(model, i, x)
        if i in capture:
            trace[i] = x if ids.ndim == 2 else x.reshape(T, model.config.d_model)
    return x, trace


def forward(model: Model, tokens, capture=(), positions=None, select=None):
    """Run the full model.

    Returns ``(logits, trace)``; logits are ``T x V`` for a 1-D input or
    ``B x T x V`` for a batch.  ``positions`` (one index per row) restricts the
    output head to those positions, giving ``B x V``.  ``trace`` maps each
    captured layer to its post-block hidden states.  ``select`` (a boolean
    ``B x T`` array) instead returns ``N x V`` logits for the selected positions
    in row-major order.
    """
    ids = _check_tokens(model, tokens)
    capture = _check_layers(model, capture)
    x, trace = _trunk(model, ids, capture, model.config.n_layers - 1)
    if positions is not None:
        pos = np.asarray(positions, dtype=np.int64)
        x = x[np.arange(x.shape[0]), pos]
    elif select is not None:
        sel = np.asarray(select, dtype=bool).reshape(x.shape[:2])
        x = x[np.nonzero(sel)]
    x = ad.layer_norm(x, model.params["ln_f.g"], model.params["ln_f.b"])
    logits = x @ model.params["head"]
    if ids.ndim == 1 and positions is None and select is None:
        logits = logits.reshape(ids.shape[0], model.config.vocab_size)
    return logits, trace


def hidden_states(model: Model, tokens, layers) -> dict[int, Tensor]:
    """Post-block hidden states for ``layers``; skips blocks above the highest one."""
    ids = _check_tokens(model, tokens)
    layers = _check_layers(model, layers)
    if not layers:
        return {}
    _, trace = _trunk(model, ids, layers, max(layers))
    return trace


def lm_loss(logits: Tensor, targets, mask) -> Tensor:
    """Mean cross-entropy over positions with a truthy mask (completion tokens)."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ValueError(f"lm_loss length mismatch: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    if not mask.any():
        raise ValueError("lm_loss: every position is masked out")
    return ad.cross_entropy(logits, targets, mask)


def validate_window(model_or_cfg, window) -> tuple[int, int, int]:
    cfg = model_or_cfg.config if isinstance(model_or_cfg, Model) else model_or_cfg
    w = tuple(int(i) for i in window)
    if len(w) != 3 or w[1] != w[0] + 1 or w[2] != w[1] + 1:
        raise ValueError(f"layer window must be three consecutive layers, got {window}")
    if w[0] < 0 or w[2] >= cfg.n_layers:
        raise ValueError(f"layer window {w} outside [0, {cfg.n_layers})")
    return w


def window_param_names(model: Model, window, scope: str = "mlp-down-only") -> list[str]:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    w = validate_window(model, window)
    if scope == "mlp-down-only":
        return [f"h{i}.mlp.w_down" for i in w]
    return [n for i in w for n in layer_param_names(i)]


def set_trainable(model: Model, window, scope: str = "mlp-down-only") -> None:
    if model.frozen:
        raise ValueError("cannot make parameters of a frozen model trainable")
    names = set(window_param_names(model, window, scope))
    for k, p in model.params.items():
        p.requires_grad = k in names
        p.grad = None


def set_all_trainable(model: Model) -> None:
    if model.frozen:
        raise ValueError("cannot make parameters of a frozen model trainable")
    for p in model.params.values():
        p.requires_grad = True


def clone_frozen(model: Model) -> Model:
    params = {k: Tensor(p.data.copy(), requires_grad=False, name=k) for k, p in model.params.items()}
    return Model(ModelConfig(**asdict(model.config)), params, frozen=True)


def clone(model: Model) -> Model:
    params = {k: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=k)
              for k, p in model.params.items()}
    return Model(ModelConfig(**asdict(model.config)), params)


def checksum(model: Model) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(asdict(model.config), sort_keys=True).encode())
    for k in sorted(model.params):
        a = np.ascontiguousarray(model.params[k].data, dtype="<f8")
        h.update(k.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# -- checkpoints -----------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path) -> str:
    """Write config + float64 parameters to an uncompressed zip of .npy members."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = checksum(model)
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.config), "checksum": digest,
            "names": sorted(model.params)}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for k in sorted(model.params):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(model.params[k].data, dtype="<f8"), allow_pickle=False)
            _write_member(zf, f"params/{k}.npy", buf.getvalue())
    return digest


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    zf.writestr(info, data)


def load_checkpoint(path) -> Model:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            params = {}
            for k in meta["names"]:
                arr = np.load(io.BytesIO(zf.read(f"params/{k}.npy")), allow_pickle=False)
                params[k] = Tensor(arr.astype(np.float64), requires_grad=True, name=k)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    model = Model(ModelConfig(**meta["config"]), params)
    if checksum(model) != meta["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    return model


# -- inference helpers -----------------------------------------------------


def pad_batch(seqs: list[list[int]], pad_id: int = 0) -> np.ndarray:
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), pad_id, dtype=np.int64)
    for r, s in enumerate(seqs):
        out[r, : len(s)] = s
    return out


def greedy_decode(model: Model, prompts: list[list[int]], max_new_tokens: int, eos_id: int,
                  pad_id: int = 0, batch_size: int = 64) -> list[list[int]]:
    """Greedy continuation of each prompt, stopping at ``eos_id`` (not returned).

    Right padding is exact because attention is causal: later pad positions
    never influence earlier logits.
    """
    results: list[list[int]] = [[] for _ in prompts]
    limit = model.config.max_seq_len
    order = sorted(range(len(prompts)), key=lambda r: (len(prompts[r]), r))
    for start in range(0, len(order), batch_size):
        rows = order[start:start + batch_size]
        seqs = [list(prompts[r]) for r in rows]
        active = [True] * len(rows)
        for _ in range(max_new_tokens):
            live = [j for j, a in enumerate(active) if a and len(seqs[j]) < limit]
            if not live:
                break
            batch = pad_batch([seqs[j] for j in live], pad_id)
            logits, _ = forward(model, batch, positions=[len(seqs[j]) - 1 for j in live])
            nxt = np.argmax(logits.data, axis=-1)
            for j, t in zip(live, nxt):
                t = int(t)
                if t == eos_id:
                    active[j] = False
                else:
                    seqs[j].append(t)
                    results[rows[j]].append(t)
            for j in range(len(rows)):
                if len(seqs[j]) >= limit:
                    active[j] = False
    return results


def sequence_logprobs(model: Model, seqs: list[list[int]], pad_id: int = 0,
                      batch_size: int = 32) -> list[np.ndarray]:
    """Per-position log p(token[t+1] | tokens[:t+1]) for each sequence (length len-1)."""
    out: list[np.ndarray] = [np.zeros(0)] * len(seqs)
    order = sorted(range(len(seqs)), key=lambda r: (len(seqs[r]), r))
    for start in range(0, len(order), batch_size):
        rows = order[start:start + batch_size]
        batch = pad_batch([seqs[r] for r in rows], pad_id)
        logits, _ = forward(model, batch[:, :-1] if batch.shape[1] > 1 else batch)
        logp = ad.log_softmax_np(logits.data)
        for j, r in enumerate(rows):
            n = len(seqs[r]) - 1
            tgt = np.asarray(seqs[r][1:], dtype=np.int64)
            out[r] = logp[j, np.arange(n), tgt] if n else np.zeros(0)
    return out
