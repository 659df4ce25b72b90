"""The unified generative model.

A user history ``i_1, b_1, ..., i_n, b_n`` is interleaved into 2n tokens and
run through a causal pre-norm transformer. Outputs at item tokens feed the
click head (ranking); outputs at behavior tokens are next-item vectors
compared against the item table by inner product (retrieval).

Parameter names are namespaced ``model/...`` (embeddings, transformer) and
``head/...`` (click head). The count is::

    (|I| + 1) d + 3 d + 2 n d                  embeddings, positions
    + L (12 d^2 + 9 d)                         per block: 4 attention d x d,
                                               FFN d->4d->d with biases, 2 norms
    + 2 d                                      final norm
    + d h' + h' + h' + 1,  h' = max(1, d//2)   click head

The head count does not enter the formula.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from unigrf import engine as E
from unigrf.engine import Tensor
from unigrf.errors import ContractError

NEG_INF = -np.inf


@dataclass(frozen=True)
class ModelConfig:
    num_items: int
    n: int = 200
    d: int = 64
    heads: int = 2
    layers: int = 2

    def __post_init__(self):
        if self.d % self.heads:
            raise ContractError(f"d={self.d} is not divisible by heads={self.heads}")
        if min(self.num_items, self.n, self.d, self.heads) < 1 or self.layers < 0:
            raise ContractError(f"invalid model dimensions {self}")

    @property
    def head_hidden(self) -> int:
        return max(1, self.d // 2)


def parameter_count(num_items: int, n: int, d: int, heads: int, layers: int) -> int:
    del heads
    hh = max(1, d // 2)
    return (num_items + 1) * d + 3 * d + 2 * n * d + layers * (12 * d * d + 9 * d) + 2 * d + d * hh + 2 * hh + 1


@dataclass
class TransformOutputs:
    behavior_latents: Tensor  # (B, n, d), item-token outputs
    next_item_latents: Tensor  # (B, n, d), behavior-token outputs
    hidden: Tensor  # (B, 2n, d)


def interleave_tokens(items: np.ndarray, behaviors: np.ndarray, num_items: int) -> tuple[np.ndarray, np.ndarray]:
    """Token ids into the stacked [item table; behavior table] and a validity mask.

    Behavior rows are padding (0), no-click (1), click (2).
    """
    items = np.atleast_2d(np.asarray(items, dtype=np.int64))
    behaviors = np.atleast_2d(np.asarray(behaviors, dtype=np.int64))
    valid = items != 0
    B, n = items.shape
    tokens = np.empty((B, 2 * n), dtype=np.int64)
    tokens[:, 0::2] = items
    tokens[:, 1::2] = num_items + 1 + np.where(valid, behaviors + 1, 0)
    token_valid = np.repeat(valid, 2, axis=1)
    return tokens, token_valid


def deinterleave_tokens(tokens: np.ndarray, num_items: int) -> tuple[np.ndarray, np.ndarray]:
    items = tokens[..., 0::2].copy()
    beh = tokens[..., 1::2] - (num_items + 1)
    return items, np.where(beh > 0, beh - 1, 0)


def attention_mask(token_valid: np.ndarray) -> np.ndarray:
    """True where a query (row) must not see a key (column).

    Future keys are always hidden; padding keys are hidden except on the
    diagonal, so a padding query still has one key and softmax stays finite.
    """
    T = token_valid.shape[-1]
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    pad_key = ~token_valid[:, None, :] & ~np.eye(T, dtype=bool)
    return future | pad_key


def shift_append(items: np.ndarray, behaviors: np.ndarray, new_item, new_behavior) -> tuple[np.ndarray, np.ndarray]:
    """Drop the oldest slot and place one more interaction in the last slot."""
    items = np.atleast_2d(items)
    behaviors = np.atleast_2d(behaviors)
    out_i = np.concatenate([items[:, 1:], np.asarray(new_item, dtype=np.int64).reshape(-1, 1)], axis=1)
    out_b = np.concatenate([behaviors[:, 1:], np.asarray(new_behavior, dtype=np.int64).reshape(-1, 1)], axis=1)
    return out_i, out_b


def unsqueeze_last(x: Tensor) -> Tensor:
    """(..., k) -> (..., k, 1) via a gather whose index carries the extra axis."""
    return E.gather_rows(x, np.arange(x.shape[-1])[:, None], axis=x.ndim - 1)


class UniGRFModel:
    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor]):
        self.config = config
        self.params = dict(params)

    # -- construction -----------------------------------------------------

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, dtype=None) -> "UniGRFModel":
        rng = np.random.default_rng(seed)
        d, dk, hh = config.d, config.d // config.heads, config.head_hidden
        # std, or "ones"/"zeros" for norm gains and biases
        shapes: dict[str, tuple[tuple[int, ...], float | str]] = {
            "model/item_embeddings": ((config.num_items + 1, d), d**-0.5),
            "model/behavior_embeddings": ((3, d), d**-0.5),
            "model/positions": ((2 * config.n, d), 0.1),
        }
        out_std = d**-0.5 / np.sqrt(2 * max(config.layers, 1))
        for l in range(config.layers):
            p = f"model/layers/{l}"
            for name in ("ln1", "ln2"):
                shapes[f"{p}/{name}/gain"] = ((d,), "ones")
                shapes[f"{p}/{name}/bias"] = ((d,), "zeros")
            for h in range(config.heads):
                for proj in "qkv":
                    shapes[f"{p}/attn/{proj}/{h}"] = ((d, dk), d**-0.5)
                shapes[f"{p}/attn/o/{h}"] = ((dk, d), out_std)
            shapes[f"{p}/ffn/w1"] = ((d, 4 * d), d**-0.5)
            shapes[f"{p}/ffn/b1"] = ((4 * d,), "zeros")
            shapes[f"{p}/ffn/w2"] = ((4 * d, d), (4 * d) ** -0.5 / np.sqrt(2 * config.layers))
            shapes[f"{p}/ffn/b2"] = ((d,), "zeros")
        shapes["model/final_ln/gain"] = ((d,), "ones")
        shapes["model/final_ln/bias"] = ((d,), "zeros")
        shapes["head/w1"] = ((d, hh), d**-0.5)
        shapes["head/b1"] = ((hh,), "zeros")
        shapes["head/w2"] = ((hh, 1), hh**-0.5)
        shapes["head/b2"] = ((1,), "zeros")

        params = {}
        with E.default_dtype(dtype or E.get_default_dtype()):
            for name, (shape, std) in shapes.items():
                if std == "ones":
                    values = np.ones(shape)
                elif std == "zeros":
                    values = np.zeros(shape)
                else:
                    values = rng.normal(scale=std, size=shape)
                if name == "model/item_embeddings":
                    values[0] = 0.0
                params[name] = Tensor(values, requires_grad=True, name=name)
        return cls(config, params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values for name, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ContractError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ContractError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.values[...] = arr

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def item_embeddings(self) -> Tensor:
        return self.params["model/item_embeddings"]

    # -- forward ----------------------------------------------------------

    def interleave_embed(self, items: np.ndarray, behaviors: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Token embeddings plus positional terms, shape (B, 2n', d) for n' <= n slots."""
        items = np.atleast_2d(items)
        cfg = self.config
        if items.shape[1] > cfg.n:
            raise ContractError(f"sequence has {items.shape[1]} slots; model holds {cfg.n}")
        if items.min() < 0 or items.max() > cfg.num_items:
            raise ContractError(f"item index out of range [0, {cfg.num_items}]")
        tokens, token_valid = interleave_tokens(items, behaviors, cfg.num_items)
        table = E.concat_rows([self.params["model/item_embeddings"], self.params["model/behavior_embeddings"]])
        x = E.gather_rows(table, tokens)
        pos = E.gather_rows(self.params["model/positions"], np.arange(tokens.shape[1]))
        return x + pos, token_valid

    def _block(self, l: int, x: Tensor, mask: np.ndarray, cache: dict | None) -> Tensor:
        p = self.params
        pre = f"model/layers/{l}"
        dk = self.config.d // self.config.heads
        h = E.layer_norm(x, p[f"{pre}/ln1/gain"], p[f"{pre}/ln1/bias"])
        attn = None
        for head in range(self.config.heads):
            q = h @ p[f"{pre}/attn/q/{head}"]
            k = h @ p[f"{pre}/attn/k/{head}"]
            v = h @ p[f"{pre}/attn/v/{head}"]
            if cache is not None:
                cache[(l, head)] = (k, v)
            scores = E.masked_fill(E.scale(q @ E.transpose(k), dk**-0.5), mask, NEG_INF)
            out = (E.softmax_row(scores) @ v) @ p[f"{pre}/attn/o/{head}"]
            attn = out if attn is None else attn + out
        x = x + attn
        return x + self._ffn(l, E.layer_norm(x, p[f"{pre}/ln2/gain"], p[f"{pre}/ln2/bias"]))

    def _ffn(self, l: int, h: Tensor) -> Tensor:
        p = self.params
        pre = f"model/layers/{l}/ffn"
        return E.silu(h @ p[f"{pre}/w1"] + p[f"{pre}/b1"]) @ p[f"{pre}/w2"] + p[f"{pre}/b2"]

    def encode(self, items: np.ndarray, behaviors: np.ndarray, cache: dict | None = None) -> Tensor:
        x, token_valid = self.interleave_embed(items, behaviors)
        mask = attention_mask(token_valid)
        if cache is not None:
            cache["token_valid"] = token_valid
        for l in range(self.config.layers):
            x = self._block(l, x, mask, cache)
        return E.layer_norm(x, self.params["model/final_ln/gain"], self.params["model/final_ln/bias"])

    def forward_transform(self, items: np.ndarray, behaviors: np.ndarray) -> TransformOutputs:
        hidden = self.encode(items, behaviors)
        T = hidden.shape[1]
        return TransformOutputs(
            behavior_latents=E.gather_rows(hidden, np.arange(0, T, 2), axis=1),
            next_item_latents=E.gather_rows(hidden, np.arange(1, T, 2), axis=1),
            hidden=hidden,
        )

    # -- heads ------------------------------------------------------------

    def ranking_logits(self, latents: Tensor) -> Tensor:
        """Click-head pre-activation, shape latents.shape[:-1]."""
        p = self.params
        h = E.silu(latents @ p["head/w1"] + p["head/b1"])
        return E.row_sum(h @ p["head/w2"] + p["head/b2"])

    def ranking_score(self, latent) -> float:
        latent = latent if isinstance(latent, Tensor) else Tensor(latent)
        with E.no_grad():
            z = self.ranking_logits(Tensor(latent.values.reshape(1, -1)))
        return float(E.sigmoid(z).values[0])

    def retrieval_scores(self, latent) -> np.ndarray:
        """Inner product with every row of the item table (row 0 is padding)."""
        v = latent.values if isinstance(latent, Tensor) else np.asarray(latent)
        return self.item_embeddings.values @ v.T

    # -- target-aware scoring ----------------------------------------------

    def candidate_logits(self, items: np.ndarray, behaviors: np.ndarray, candidates: np.ndarray,
                         detach_history: bool = False) -> Tensor:
        """Click logits for ``candidates`` (B, C) appended after each history (B, n).

        The history drops its oldest slot so the candidate lands in the last
        item slot, the same position training labels occupy. History keys and
        values are computed once and shared by every candidate; each
        candidate attends to them plus itself.
        """
        cfg = self.config
        items = np.atleast_2d(items)
        behaviors = np.atleast_2d(behaviors)
        candidates = np.asarray(candidates, dtype=np.int64).reshape(items.shape[0], -1)
        if (candidates <= 0).any() or (candidates > cfg.num_items).any():
            raise ContractError("candidate must be a real item index in [1, |I|]")
        if items.shape[1] < 2 or not (items != 0).any(axis=1).all():
            raise ContractError("target-aware scoring needs n >= 2 and at least one history item")

        prefix_items, prefix_beh = items[:, 1:], behaviors[:, 1:]
        cache: dict = {}
        if detach_history:
            with E.no_grad():
                self.encode(prefix_items, prefix_beh, cache)
        else:
            self.encode(prefix_items, prefix_beh, cache)
        token_valid = cache["token_valid"]  # (B, T)
        B, T = token_valid.shape
        C = candidates.shape[1]
        key_mask = np.broadcast_to(np.concatenate([~token_valid, np.zeros((B, 1), bool)], axis=1)[:, None, :], (B, C, T + 1))

        p = self.params
        dk = cfg.d // cfg.heads
        x = E.gather_rows(p["model/item_embeddings"], candidates) + E.gather_rows(p["model/positions"], np.array(T))
        hist_idx = np.arange(T)
        self_idx = np.full(dk, T)
        for l in range(cfg.layers):
            pre = f"model/layers/{l}"
            h = E.layer_norm(x, p[f"{pre}/ln1/gain"], p[f"{pre}/ln1/bias"])
            attn = None
            for head in range(cfg.heads):
                k_hist, v_hist = cache[(l, head)]
                q = h @ p[f"{pre}/attn/q/{head}"]
                k = h @ p[f"{pre}/attn/k/{head}"]
                v = h @ p[f"{pre}/attn/v/{head}"]
                s = E.concat_rows([q @ E.transpose(k_hist), unsqueeze_last(E.row_sum(q * k))], axis=2)
                a = E.softmax_row(E.masked_fill(E.scale(s, dk**-0.5), key_mask, NEG_INF))
                mixed = E.gather_rows(a, hist_idx, axis=2) @ v_hist + E.gather_rows(a, self_idx, axis=2) * v
                out = mixed @ p[f"{pre}/attn/o/{head}"]
                attn = out if attn is None else attn + out
            x = x + attn
            x = x + self._ffn(l, E.layer_norm(x, p[f"{pre}/ln2/gain"], p[f"{pre}/ln2/bias"]))
        x = E.layer_norm(x, p["model/final_ln/gain"], p["model/final_ln/bias"])
        return self.ranking_logits(x)

    def target_aware_score(self, seq, candidate: int) -> float:
        """Click probability of ``candidate`` placed right after ``seq``'s history."""
        if candidate == 0:
            raise ContractError("candidate cannot be the padding index")
        with E.no_grad():
            z = self.candidate_logits(seq.items[None, :], seq.behaviors[None, :], np.array([[candidate]]))
        return float(E.sigmoid(z).values[0, 0])

    def score_users(self, items: np.ndarray, behaviors: np.ndarray, candidates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Next-item vector at the last slot (B, d) and click logits for candidates (B, C), no graph."""
        with E.no_grad():
            latent = self.forward_transform(items, behaviors).next_item_latents.values[:, -1]
            logits = self.candidate_logits(items, behaviors, candidates).values
        return latent, logits
