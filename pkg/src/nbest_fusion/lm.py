"""Decoder-only transformer with frozen base weights and two finetuning modes.

``adapter`` mode prepends ``prompt_len`` learnable key/value rows to the
attention of each of the top ``n_tunable`` layers. The prompt branch gets its
own softmax and is scaled by a per-layer gate that starts at zero, so an
untrained adapter model computes exactly what the frozen base computes.

``lora`` mode adds a rank-``lora_rank`` update ``down @ up`` to the query and
value projections of the same layers, with ``up`` starting at zero.

Base blocks are pre-norm (RMSNorm) with a SiLU feed-forward and learned
absolute positions.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODES = ("frozen", "adapter", "lora")


class ConfigError(ValueError):
    pass


class SequenceTooLong(ValueError):
    pass


@dataclass
class LmConfig:
    n_layer: int = 4
    d_model: int = 64
    n_head: int = 4
    vocab_size: int = 100
    block_size: int = 256
    prompt_len: int = 10
    n_tunable: int | None = None  # None -> n_layer - 1
    lora_rank: int = 4
    lora_alpha: float = 8.0
    d_ff: int | None = None  # None -> 4 * d_model
    mode: str = "frozen"

    def __post_init__(self):
        if self.n_tunable is None:
            self.n_tunable = max(1, self.n_layer - 1)
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d_model % self.n_head:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_head={self.n_head}")
        if not 1 <= self.n_tunable <= self.n_layer:
            raise ConfigError(f"n_tunable={self.n_tunable} outside [1, {self.n_layer}]")
        if self.prompt_len < 1:
            raise ConfigError("prompt_len must be >= 1")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.block_size <= self.prompt_len:
            raise ConfigError("block_size must exceed prompt_len")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_head

    @property
    def max_tokens(self) -> int:
        """Longest token sequence a forward pass accepts (prompt rows reserve the rest)."""
        return self.block_size - self.prompt_len

    @property
    def tunable_layers(self) -> range:
        return range(self.n_layer - self.n_tunable, self.n_layer)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape))


def init_base_weights(cfg: LmConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff
    proj_std = 0.02 / math.sqrt(2 * cfg.n_layer)
    w: dict[str, Tensor] = {
        "tok_emb": _normal(rng, (cfg.vocab_size, d), 0.02),
        "pos_emb": _normal(rng, (cfg.block_size, d), 0.02),
    }
    for i in range(cfg.n_layer):
        w[f"h{i}.attn_norm"] = Tensor(np.ones(d))
        for name in ("wq", "wk", "wv"):
            w[f"h{i}.{name}"] = _normal(rng, (d, d), 0.02)
        w[f"h{i}.wo"] = _normal(rng, (d, d), proj_std)
        w[f"h{i}.mlp_norm"] = Tensor(np.ones(d))
        w[f"h{i}.w1"] = _normal(rng, (d, f), 0.02)
        w[f"h{i}.w2"] = _normal(rng, (f, d), proj_std)
    w["final_norm"] = Tensor(np.ones(d))
    w["lm_head"] = _normal(rng, (d, cfg.vocab_size), 0.02)
    for k, t in w.items():
        t.name = k
    return w


@dataclass
class AdapterParams:
    prompts: dict[int, Tensor]
    gates: dict[int, Tensor]

    @classmethod
    def init(cls, cfg: LmConfig, seed: int = 0, prompt_std: float = 0.02) -> "AdapterParams":
        rng = np.random.default_rng(seed)
        prompts, gates = {}, {}
        for layer in cfg.tunable_layers:
            prompts[layer] = Tensor(rng.normal(0.0, prompt_std, (cfg.prompt_len, cfg.d_model)),
                                    requires_grad=True, name=f"h{layer}.prompt")
            gates[layer] = Tensor(np.zeros(()), requires_grad=True, name=f"h{layer}.gate")
        return cls(prompts, gates)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for layer in sorted(self.prompts):
            yield f"h{layer}.prompt", self.prompts[layer]
            yield f"h{layer}.gate", self.gates[layer]


@dataclass
class LoraParams:
    down: dict[tuple[int, str], Tensor]
    up: dict[tuple[int, str], Tensor]
    scaling: float

    @classmethod
    def init(cls, cfg: LmConfig, seed: int = 0) -> "LoraParams":
        rng = np.random.default_rng(seed)
        down, up = {}, {}
        r = cfg.lora_rank
        for layer in cfg.tunable_layers:
            for proj in ("q", "v"):
                key = (layer, proj)
                # Kaiming-uniform style bound on the input side, zeros on the output side.
                bound = 1.0 / math.sqrt(cfg.d_model)
                down[key] = Tensor(rng.uniform(-bound, bound, (cfg.d_model, r)),
                                   requires_grad=True, name=f"h{layer}.lora_{proj}_down")
                up[key] = Tensor(np.zeros((r, cfg.d_model)), requires_grad=True,
                                 name=f"h{layer}.lora_{proj}_up")
        return cls(down, up, cfg.lora_alpha / r)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for key in sorted(self.down):
            yield self.down[key].name, self.down[key]
            yield self.up[key].name, self.up[key]


@dataclass
class FusionModel:
    """Frozen base transformer plus optional tunable adaptation parameters."""

    config: LmConfig
    base: dict[str, Tensor]
    adapter: AdapterParams | None = None
    lora: LoraParams | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: LmConfig, seed: int = 0) -> "FusionModel":
        model = cls(config, init_base_weights(config, seed))
        model.set_mode(config.mode, seed=seed + 1)
        return model

    # -- mode handling ------------------------------------------------------
    def set_mode(self, mode: str, seed: int = 0) -> None:
        """Switch finetuning mode, (re)initializing the tunable parameters."""
        self.config = dataclasses.replace(self.config, mode=mode)
        self.adapter = AdapterParams.init(self.config, seed) if mode == "adapter" else None
        self.lora = LoraParams.init(self.config, seed) if mode == "lora" else None
        self.freeze_base()

    def freeze_base(self) -> None:
        for t in self.base.values():
            t.requires_grad = False
            t.grad = None

    def unfreeze_base(self) -> None:
        for t in self.base.values():
            t.requires_grad = True

    def tunable_parameters(self) -> list[Tensor]:
        """θ: the parameters finetuning is allowed to change."""
        if self.adapter is not None:
            return [t for _, t in self.adapter.named()]
        if self.lora is not None:
            return [t for _, t in self.lora.named()]
        return []

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.base)
        if self.adapter is not None:
            out.update(self.adapter.named())
        if self.lora is not None:
            out.update(self.lora.named())
        return out

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.base):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.base[k].data).tobytes())
        return h.hexdigest()

    # -- forward --------------------------------------------------------------
    def _project(self, x: Tensor, layer: int, proj: str) -> Tensor:
        out = x @ self.base[f"h{layer}.w{proj}"]
        if self.lora is not None and (layer, proj) in self.lora.down:
            delta = (x @ self.lora.down[(layer, proj)]) @ self.lora.up[(layer, proj)]
            out = out + ad.scale(delta, self.lora.scaling)
        return out

    def _split_heads(self, x: Tensor, lead: tuple[int, ...]) -> Tensor:
        # (..., M, D) -> (..., heads, M, head_dim)
        cfg = self.config
        m = x.shape[-2]
        x = x.reshape(lead + (m, cfg.n_head, cfg.head_dim))
        return ad.swapaxes(x, -2, -3)

    def attention(self, layer: int, x: Tensor) -> Tensor:
        """Multi-head causal self-attention for one layer on normalized input ``x``.

        In adapter mode on a tunable layer the gated prompt branch is added;
        see :meth:`adapter_attention`.
        """
        if self.adapter is not None and layer in self.adapter.prompts:
            return self.adapter_attention(layer, x, self.adapter.prompts[layer],
                                          self.adapter.gates[layer])
        out, _ = self._token_attention(layer, x)
        return self._merge(layer, out, x.shape[:-2])

    def _token_attention(self, layer: int, x: Tensor):
        lead = x.shape[:-2]
        m = x.shape[-2]
        q = self._split_heads(self._project(x, layer, "q"), lead)
        k = self._split_heads(self._project(x, layer, "k"), lead)
        v = self._split_heads(self._project(x, layer, "v"), lead)
        scores = ad.scale(q @ ad.transpose(k), 1.0 / math.sqrt(self.config.head_dim))
        causal = np.tril(np.ones((m, m), dtype=bool))
        probs = ad.masked_softmax(scores, causal)
        return probs @ v, q

    def _merge(self, layer: int, heads: Tensor, lead: tuple[int, ...]) -> Tensor:
        m = heads.shape[-2]
        merged = ad.swapaxes(heads, -2, -3).reshape(lead + (m, self.config.d_model))
        return merged @ self.base[f"h{layer}.wo"]

    def adapter_attention(self, layer: int, x: Tensor, prompt: Tensor, gate: Tensor) -> Tensor:
        """Causal attention over tokens plus a gated, separately normalized prompt branch.

        Queries come from the tokens only; keys and values from prompt rows and
        tokens alike, all through the layer's own (frozen) projections. Each
        query sees every prompt row. The prompt scores and the causal token
        scores get independent softmaxes; the prompt probabilities are scaled
        by ``gate`` before both are applied to their values and summed.
        """
        if self.adapter is None or layer not in self.adapter.prompts:
            raise ConfigError(f"layer {layer} is not in the tunable set {list(self.config.tunable_layers)}")
        lead = x.shape[:-2]
        token_out, q = self._token_attention(layer, x)
        kp = self._split_heads(prompt @ self.base[f"h{layer}.wk"], ())
        vp = self._split_heads(prompt @ self.base[f"h{layer}.wv"], ())
        if lead:
            kp = ad.expand(kp, lead)
            vp = ad.expand(vp, lead)
        scores_p = ad.scale(q @ ad.transpose(kp), 1.0 / math.sqrt(self.config.head_dim))
        probs_p = ad.mul(ad.softmax(scores_p, axis=-1), gate)
        return self._merge(layer, token_out + probs_p @ vp, lead)

    def hidden(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        m = ids.shape[-1]
        if m > self.config.max_tokens:
            raise SequenceTooLong(
                f"sequence of {m} tokens exceeds block_size - prompt_len = {self.config.max_tokens}"
            )
        x = ad.embedding(self.base["tok_emb"], ids)
        x = x + ad.slice_axis(self.base["pos_emb"], 0, 0, m)
        for layer in range(self.config.n_layer):
            h = ad.rmsnorm(x, self.base[f"h{layer}.attn_norm"])
            x = x + self.attention(layer, h)
            h = ad.rmsnorm(x, self.base[f"h{layer}.mlp_norm"])
            x = x + ad.silu(h @ self.base[f"h{layer}.w1"]) @ self.base[f"h{layer}.w2"]
        return ad.rmsnorm(x, self.base["final_norm"])

    def forward(self, ids) -> Tensor:
        """Logits for every position: ``(M,) -> (M, V)`` or ``(B, M) -> (B, M, V)``."""
        return self.hidden(ids) @ self.base["lm_head"]

    __call__ = forward

    def cast(self, dtype) -> None:
        """Convert every weight in place (gradients and optimizer state are not kept)."""
        for t in self.named_tensors().values():
            t.data = t.data.astype(dtype)
            t.grad = None

    @contextlib.contextmanager
    def working_precision(self, dtype, restore_base: bool = True):
        """Run a block with weights and new tensors in ``dtype``; weights return to float64 after.

        With ``restore_base`` the original base arrays are put back, so a
        frozen base comes out bit-identical whatever ``dtype`` was.
        """
        original = {k: t.data for k, t in self.base.items()}
        with ad.precision(dtype):
            self.cast(dtype)
            try:
                yield self
            finally:
                self.cast(np.float64)
                if restore_base:
                    for k, t in self.base.items():
                        t.data = original[k]

    # -- persistence ----------------------------------------------------------
    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.config, self.named_tensors(), self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "FusionModel":
        cfg, tensors, meta = load_checkpoint(path)
        model = cls.create(cfg)
        expected = model.named_tensors()
        missing = set(expected) - set(tensors)
        extra = set(tensors) - set(expected)
        if missing or extra:
            raise ConfigError(f"checkpoint tensors mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in expected.items():
            if tensors[name].shape != t.shape:
                raise ConfigError(f"{name}: checkpoint shape {tensors[name].shape} != {t.shape}")
            t.data = tensors[name].astype(np.float64)
        model.meta = meta
        return model


def count_parameters(tensors) -> int:
    return int(sum(t.size for t in tensors))


def save_checkpoint(path, config: LmConfig, tensors: dict[str, Tensor], meta: dict | None = None) -> None:
    header = json.dumps({"config": config.to_dict(), "meta": meta or {}}, sort_keys=True)
    arrays = {f"t:{k}": v.data for k, v in tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(header), **arrays)


def load_checkpoint(path) -> tuple[LmConfig, dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        tensors = {k[2:]: z[k] for k in z.files if k.startswith("t:")}
    cfg = LmConfig(**header["config"])
    return cfg, tensors, header.get("meta", {})


def generate(model: FusionModel, prompt_ids, max_new_tokens: int, temperature: float = 0.2,
             sampling: str = "top1", eos_id: int | None = None) -> list[int]:
    """Autoregressive decoding from ``prompt_ids``; returns only the new tokens.

    ``top1`` picks the argmax of the temperature-scaled logits, i.e. greedy
    search. Decoding stops after ``eos_id`` (not returned) or
    ``max_new_tokens``, or when the block is full.
    """
    return generate_batch(model, [prompt_ids], max_new_tokens, temperature, sampling, eos_id)[0]


def generate_batch(model: FusionModel, prompts, max_new_tokens: int, temperature: float = 0.2,
                   sampling: str = "top1", eos_id: int | None = None) -> list[list[int]]:
    """Greedy-decode several prompts at once with cached keys and values.

    Prompts are left-padded; each row keeps its own positions and never
    attends to padding, so a row decodes as it would alone.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if sampling != "top1":
        raise ValueError(f"unsupported sampling {sampling!r}; only 'top1' is available")
    limit = model.config.max_tokens
    seqs = [list(map(int, p)) for p in prompts]
    for s in seqs:
        if len(s) > limit:
            raise SequenceTooLong(f"prompt of {len(s)} tokens exceeds {limit}")
        if not s:
            raise ValueError("prompt must contain at least one token")
    outs: list[list[int]] = [[] for _ in seqs]
    rows = [i for i in range(len(seqs)) if max_new_tokens > 0 and len(seqs[i]) < limit]
    if not rows:
        return outs
    width = max(len(seqs[i]) for i in rows)
    pads = np.array([width - len(seqs[i]) for i in rows])
    ids = np.zeros((len(rows), width), dtype=np.int64)
    for r, i in enumerate(rows):
        ids[r, pads[r]:] = seqs[i]
    cols = np.arange(width)
    positions = np.maximum(cols[None, :] - pads[:, None], 0)
    key_ok = cols[None, :] >= pads[:, None]
    cache = IncrementalState(model)
    last = cache.step(ids, positions, key_ok)[:, -1]
    lengths = np.array([len(seqs[i]) for i in rows])
    while rows:
        nxt = ((last @ model.base["lm_head"].data) / temperature).argmax(axis=-1)
        keep = []
        for r, i in enumerate(rows):
            tok = int(nxt[r])
            if eos_id is not None and tok == eos_id:
                continue
            outs[i].append(tok)
            if len(outs[i]) < max_new_tokens and lengths[r] + 1 < limit:
                keep.append(r)
        if not keep:
            break
        keep_idx = np.array(keep)
        cache.select(keep_idx)
        rows = [rows[r] for r in keep]
        lengths = lengths[keep_idx] + 1
        new_ids = nxt[keep_idx][:, None]
        last = cache.step(new_ids, (lengths - 1)[:, None], np.ones((len(rows), 1), dtype=bool))[:, -1]
    return outs


class IncrementalState:
    """Per-layer key/value cache for inference-only forward passes (no graph).

    :meth:`step` appends a block of new columns for every row and returns
    their final hidden states. Computation mirrors :meth:`FusionModel.hidden`
    in plain numpy.
    """

    def __init__(self, model: FusionModel):
        self.model = model
        self.keys: list[np.ndarray | None] = [None] * model.config.n_layer
        self.values: list[np.ndarray | None] = [None] * model.config.n_layer
        self.key_ok: np.ndarray | None = None

    def select(self, rows: np.ndarray) -> None:
        self.keys = [k[rows] for k in self.keys]
        self.values = [v[rows] for v in self.values]
        self.key_ok = self.key_ok[rows]

    def _proj(self, x, layer: int, proj: str) -> np.ndarray:
        m = self.model
        out = x @ m.base[f"h{layer}.w{proj}"].data
        if m.lora is not None and (layer, proj) in m.lora.down:
            out = out + ((x @ m.lora.down[(layer, proj)].data) @ m.lora.up[(layer, proj)].data) * m.lora.scaling
        return out

    def _heads(self, x: np.ndarray) -> np.ndarray:
        cfg = self.model.config
        return x.reshape(x.shape[:-1] + (cfg.n_head, cfg.head_dim)).swapaxes(-2, -3)

    def step(self, ids: np.ndarray, positions: np.ndarray, key_ok: np.ndarray) -> np.ndarray:
        m, cfg = self.model, self.model.config
        base = {k: t.data for k, t in m.base.items()}
        b, new = ids.shape
        self.key_ok = key_ok if self.key_ok is None else np.concatenate([self.key_ok, key_ok], axis=1)
        total = self.key_ok.shape[1]
        qcols = np.arange(total - new, total)
        visible = (np.arange(total)[None, :] <= qcols[:, None])[None, :, :] & self.key_ok[:, None, :]
        visible |= (np.arange(total)[None, :] == qcols[:, None])[None]  # padding rows see themselves
        visible = visible[:, None]  # (B, 1, new, total)
        scale = 1.0 / math.sqrt(cfg.head_dim)
        x = base["tok_emb"][ids] + base["pos_emb"][positions]
        for layer in range(cfg.n_layer):
            h = _rms(x, base[f"h{layer}.attn_norm"])
            q = self._heads(self._proj(h, layer, "q"))
            k = self._heads(self._proj(h, layer, "k"))
            v = self._heads(self._proj(h, layer, "v"))
            if self.keys[layer] is not None:
                k = np.concatenate([self.keys[layer], k], axis=2)
                v = np.concatenate([self.values[layer], v], axis=2)
            self.keys[layer], self.values[layer] = k, v
            scores = np.where(visible, (q @ k.swapaxes(-1, -2)) * scale, -np.inf)
            out = _softmax(scores) @ v
            if m.adapter is not None and layer in m.adapter.prompts:
                prompt = m.adapter.prompts[layer].data
                kp = self._heads(prompt @ base[f"h{layer}.wk"])
                vp = self._heads(prompt @ base[f"h{layer}.wv"])
                probs_p = _softmax((q @ kp.swapaxes(-1, -2)) * scale) * m.adapter.gates[layer].data
                out = out + probs_p @ vp
            merged = out.swapaxes(-2, -3).reshape(b, new, cfg.d_model)
            x = x + merged @ base[f"h{layer}.wo"]
            h = _rms(x, base[f"h{layer}.mlp_norm"])
            u = h @ base[f"h{layer}.w1"]
            x = x + (u / (1.0 + np.exp(-u))) @ base[f"h{layer}.w2"]
        return _rms(x, base["final_norm"])


def _rms(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * gain


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
