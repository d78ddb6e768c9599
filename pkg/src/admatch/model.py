"""Two-tower matching network with shared embeddings and two task heads.

The query tower encodes (query terms, profile, behavior sequence) and the
ad tower encodes ad features; both pass through shared fully connected
layers to d-dimensional vectors. Head 1 scores retrieval relevance as
sigmoid(gamma * cosine); head 2 scores pre-rank click probability with a
small fully connected net over the concatenated tower outputs. Both heads
train with binary cross-entropy, optionally blended into one joint loss.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

SPACES = ("item_id", "shop_id", "brand_id", "term_id", "profile_id")

VARIANTS = (
    "DNN",
    "GRU_RNN",
    "ATTENTION_DNN",
    "ATTENTION_GRU_RNN",
    "CONCATENATE_DNN",
)

ACTIVATIONS = ("relu", "tanh")

PROB_CLIP = 1e-12

CHECKPOINT_VERSION = 1


class VocabularyError(ValueError):
    """An id is outside the vocabulary of its embedding space."""


@dataclass(frozen=True)
class BehaviorItem:
    """One past behavior: the item plus the query that led to it."""

    item_id: int
    shop_id: int
    brand_id: int
    title_term_ids: tuple[int, ...] = ()
    query_term_ids: tuple[int, ...] = ()


PAD_BEHAVIOR = BehaviorItem(0, 0, 0, (), ())


@dataclass(frozen=True)
class AdItem:
    """An ad candidate's id features (no source-query feature)."""

    item_id: int
    shop_id: int
    brand_id: int
    title_term_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class QueryRequest:
    """Query terms, profile ids, and a fixed-length behavior window.

    Behaviors are time-ordered oldest to newest and left-padded with
    ``PAD_BEHAVIOR`` so the most recent behavior sits in the last slot.
    """

    query_term_ids: tuple[int, ...]
    profile_ids: tuple[int, ...]
    behaviors: tuple[BehaviorItem, ...]


@dataclass(frozen=True)
class ImpressionInstance:
    """One labeled training example: request, ad, click label."""

    request: QueryRequest
    ad: AdItem
    label: int


@dataclass
class EncoderConfig:
    """Architecture and loss hyperparameters.

    The behavior-sequence encoder variant, all layer widths, the tower
    activation, the retrieval sharpness ``gamma`` and the joint-loss
    blend ``alpha`` are config knobs; ``tower_dims`` ends in the common
    output dimension d of both towers.
    """

    variant: str = "ATTENTION_GRU_RNN"
    behavior_window: int = 6
    item_dim: int = 16
    shop_dim: int = 8
    brand_dim: int = 8
    term_dim: int = 16
    profile_dim: int = 8
    gru_hidden: int = 32
    attention_hidden: int = 32
    tower_dims: tuple[int, int] = (128, 128)
    prerank_hidden: int = 64
    share_tower: bool = True
    # tanh default: relu towers can emit exact zero vectors under training
    # pressure, which the cosine head rejects as degenerate
    activation: str = "tanh"
    gamma: float = 6.0
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.tower_dims = tuple(self.tower_dims)
        if len(self.tower_dims) != 2:
            raise ValueError("tower_dims must hold exactly two layer widths")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        dims = (
            self.behavior_window,
            self.item_dim,
            self.shop_dim,
            self.brand_dim,
            self.term_dim,
            self.profile_dim,
            self.gru_hidden,
            self.attention_hidden,
            self.prerank_hidden,
            *self.tower_dims,
        )
        if any(d < 1 for d in dims):
            raise ValueError("all dimensions must be positive")

    @property
    def d(self) -> int:
        return self.tower_dims[1]

    @property
    def behavior_embed_dim(self) -> int:
        return (
            self.item_dim
            + self.shop_dim
            + self.brand_dim
            + self.term_dim  # title terms
            + self.term_dim  # source-query terms
        )

    @property
    def ad_embed_dim(self) -> int:
        return self.item_dim + self.shop_dim + self.brand_dim + self.term_dim

    @property
    def h_dim(self) -> int:
        """Width of the behavior encoding h, by variant."""
        if self.variant in ("DNN", "ATTENTION_DNN"):
            return self.behavior_embed_dim
        return self.gru_hidden

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "behavior_window": self.behavior_window,
            "item_dim": self.item_dim,
            "shop_dim": self.shop_dim,
            "brand_dim": self.brand_dim,
            "term_dim": self.term_dim,
            "profile_dim": self.profile_dim,
            "gru_hidden": self.gru_hidden,
            "attention_hidden": self.attention_hidden,
            "tower_dims": list(self.tower_dims),
            "prerank_hidden": self.prerank_hidden,
            "share_tower": self.share_tower,
            "activation": self.activation,
            "gamma": self.gamma,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "EncoderConfig":
        kwargs = dict(payload)
        if "tower_dims" in kwargs:
            kwargs["tower_dims"] = tuple(kwargs["tower_dims"])
        return cls(**kwargs)


def apply_activation(name: str, x: np.ndarray) -> np.ndarray:
    """Numpy-side activation, for serving paths outside the tape."""
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {name!r}")


def prerank_split(
    v_qu: np.ndarray, v_a: np.ndarray, weight: np.ndarray, bias: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decompose the pre-rank first layer into query and ad partial products.

    q_part = (V_qu, 0) @ W + bias and a_part = (0, V_a) @ W; their sum
    equals the direct product concat(V_qu, V_a) @ W + bias, so a_part can
    be computed offline per ad. The bias is folded into the query side,
    which is computed once per request.
    """
    v_qu = np.asarray(v_qu, dtype=np.float64)
    v_a = np.asarray(v_a, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    d_q = v_qu.shape[-1]
    d_a = v_a.shape[-1]
    if weight.shape[0] != d_q + d_a:
        raise ad.ShapeError(
            f"split weight has {weight.shape[0]} rows, expected {d_q + d_a}"
        )
    q_part = v_qu @ weight[:d_q] + bias
    a_part = v_a @ weight[d_q:]
    return q_part, a_part, q_part + a_part


def _bce(p: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with probabilities clipped away from 0/1."""
    y = Tensor(labels)
    p = ad.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    per = ad.neg(ad.add(ad.mul(y, ad.log(p)), ad.mul(1.0 - y, ad.log(1.0 - p))))
    return ad.mean_all(per)


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("empty batch")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    return labels


class MatchingModel:
    """The full network: embeddings, both towers, and both heads.

    One embedding table exists per id space and is referenced by both
    towers, so gradients from either side update the same storage. Row 0
    of every table is the reserved pad/OOV row and stays at zero.
    """

    def __init__(
        self,
        config: EncoderConfig,
        vocab_sizes: Mapping[str, int],
        seed: int = 0,
    ) -> None:
        missing = [s for s in SPACES if s not in vocab_sizes]
        if missing:
            raise ValueError(f"vocab_sizes missing spaces {missing}")
        self.config = config
        self.vocab_sizes = {s: int(vocab_sizes[s]) for s in SPACES}
        if any(v < 1 for v in self.vocab_sizes.values()):
            raise ValueError("every space needs at least the pad row")
        self.params = ParamStore()
        self._init_params(seed)

    # ------------------------------------------------------------------
    # parameters

    def _init_params(self, seed: int) -> None:
        cfg = self.config
        rng = np.random.default_rng(seed)

        def emb(rows, cols):
            return rng.uniform(-0.05, 0.05, size=(rows, cols))

        def u(*shape):
            # fan-scaled weights, zero biases: a flat init scale leaves the
            # towers bias-dominated and training stalls at desk widths
            if len(shape) == 1:
                return np.zeros(shape)
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            return rng.uniform(-limit, limit, size=shape)

        dims = {
            "item_id": cfg.item_dim,
            "shop_id": cfg.shop_dim,
            "brand_id": cfg.brand_dim,
            "term_id": cfg.term_dim,
            "profile_id": cfg.profile_dim,
        }
        for space in SPACES:
            self.params.add(
                f"emb/{space}",
                emb(self.vocab_sizes[space], dims[space]),
                frozen_rows=(0,),
            )

        e_b = cfg.behavior_embed_dim
        hid = cfg.gru_hidden
        if cfg.variant in ("GRU_RNN", "ATTENTION_GRU_RNN"):
            for gate in ("z", "r", "n"):
                self.params.add(f"gru/W{gate}", u(e_b, hid))
                self.params.add(f"gru/U{gate}", u(hid, hid))
                self.params.add(f"gru/b{gate}", u(hid))
        if cfg.variant in ("ATTENTION_DNN", "ATTENTION_GRU_RNN"):
            state_dim = e_b if cfg.variant == "ATTENTION_DNN" else hid
            self.params.add("attn/W1", u(state_dim + cfg.term_dim, cfg.attention_hidden))
            self.params.add("attn/b1", u(cfg.attention_hidden))
            # no output bias: softmax ignores a shared logit offset
            self.params.add("attn/W2", u(cfg.attention_hidden, 1))
        if cfg.variant == "CONCATENATE_DNN":
            self.params.add("concat/W", u(cfg.behavior_window * e_b, hid))
            self.params.add("concat/b", u(hid))

        h_dim = cfg.h_dim
        self.params.add("qu_proj/W", u(cfg.term_dim + cfg.profile_dim + h_dim, h_dim))
        self.params.add("qu_proj/b", u(h_dim))
        self.params.add("ad_proj/W", u(cfg.ad_embed_dim, h_dim))
        self.params.add("ad_proj/b", u(h_dim))

        t1, d = cfg.tower_dims
        if cfg.share_tower:
            sides = ("tower",)
        else:
            sides = ("qu_tower", "ad_tower")
        for side in sides:
            self.params.add(f"{side}1/W", u(h_dim, t1))
            self.params.add(f"{side}1/b", u(t1))
            self.params.add(f"{side}2/W", u(t1, d))
            self.params.add(f"{side}2/b", u(d))

        self.params.add("prerank/W1", u(2 * d, cfg.prerank_hidden))
        self.params.add("prerank/b1", u(cfg.prerank_hidden))
        self.params.add("prerank/W2", u(cfg.prerank_hidden, 1))
        self.params.add("prerank/b2", u(1))

    def tower_param_names(self, side: str) -> tuple[str, ...]:
        """Parameter names of the tower used by one side ('qu' or 'ad')."""
        prefix = "tower" if self.config.share_tower else f"{side}_tower"
        return (f"{prefix}1/W", f"{prefix}1/b", f"{prefix}2/W", f"{prefix}2/b")

    # ------------------------------------------------------------------
    # embedding layer

    def _validate_ids(self, space: str, ids: np.ndarray) -> None:
        size = self.vocab_sizes[space]
        if ids.size and (ids.min() < 0 or ids.max() >= size):
            bad = int(ids.min() if ids.min() < 0 else ids.max())
            raise VocabularyError(
                f"id {bad} out of range for space '{space}' (vocab size {size})"
            )

    def _embed_ids(self, space: str, ids: Sequence[int]) -> Tensor:
        idx = np.asarray(ids, dtype=np.intp)
        self._validate_ids(space, idx)
        return ad.gather_rows(self.params[f"emb/{space}"], idx)

    def _embed_id_lists(self, space: str, lists: Sequence[Sequence[int]]) -> Tensor:
        flat = np.fromiter(
            (i for lst in lists for i in lst),
            dtype=np.intp,
            count=sum(len(lst) for lst in lists),
        )
        self._validate_ids(space, flat)
        return ad.gather_sum(self.params[f"emb/{space}"], lists)

    def _embed_behaviors_step(self, items: Sequence[BehaviorItem]) -> Tensor:
        return ad.concat_cols(
            [
                self._embed_ids("item_id", [it.item_id for it in items]),
                self._embed_ids("shop_id", [it.shop_id for it in items]),
                self._embed_ids("brand_id", [it.brand_id for it in items]),
                self._embed_id_lists("term_id", [it.title_term_ids for it in items]),
                self._embed_id_lists("term_id", [it.query_term_ids for it in items]),
            ]
        )

    def _embed_ads(self, ads: Sequence[AdItem]) -> Tensor:
        return ad.concat_cols(
            [
                self._embed_ids("item_id", [a.item_id for a in ads]),
                self._embed_ids("shop_id", [a.shop_id for a in ads]),
                self._embed_ids("brand_id", [a.brand_id for a in ads]),
                self._embed_id_lists("term_id", [a.title_term_ids for a in ads]),
            ]
        )

    def embed_item(self, item: BehaviorItem | AdItem) -> Tensor:
        """Concatenated per-space embedding of one item, as a 1-d tensor.

        Multivalued spaces (title terms, source-query terms) are summed
        before concatenation; pad ids contribute zero.
        """
        if isinstance(item, BehaviorItem):
            row = self._embed_behaviors_step([item])
        else:
            row = self._embed_ads([item])
        return ad.reshape(row, (-1,))

    # ------------------------------------------------------------------
    # behavior-sequence encoders

    def _act(self, x: Tensor) -> Tensor:
        return ad.relu(x) if self.config.activation == "relu" else ad.tanh(x)

    def _gru_states(self, steps: Sequence[Tensor]) -> list[Tensor]:
        p = self.params
        batch = steps[0].shape[0]
        h = Tensor(np.zeros((batch, self.config.gru_hidden)))
        states = []
        for x in steps:
            z = ad.sigmoid(x @ p["gru/Wz"] + h @ p["gru/Uz"] + p["gru/bz"])
            r = ad.sigmoid(x @ p["gru/Wr"] + h @ p["gru/Ur"] + p["gru/br"])
            n = ad.tanh(x @ p["gru/Wn"] + ad.mul(r, h) @ p["gru/Un"] + p["gru/bn"])
            h = ad.add(ad.mul(1.0 - z, h), ad.mul(z, n))
            states.append(h)
        return states

    def attention_weights(self, states: Sequence[Tensor], query_emb: Tensor) -> Tensor:
        """Softmax credit over behavior states, keyed on the query embedding.

        Each state is scored by a two-layer net on concat(state, query);
        the returned [batch x m] weights are non-negative and sum to 1
        per row.
        """
        p = self.params
        logits = []
        for state in states:
            x = ad.concat_cols([state, query_emb])
            hidden = self._act(x @ p["attn/W1"] + p["attn/b1"])
            logits.append(hidden @ p["attn/W2"])
        return ad.softmax(ad.concat_cols(logits))

    def _attentive_sum(self, states: Sequence[Tensor], query_emb: Tensor) -> Tensor:
        weights = self.attention_weights(states, query_emb)
        total: Tensor | None = None
        for t, state in enumerate(states):
            term = ad.mul(ad.take_cols(weights, t, t + 1), state)
            total = term if total is None else ad.add(total, term)
        return total

    def _encode_behaviors(
        self, requests: Sequence[QueryRequest], query_emb: Tensor
    ) -> Tensor:
        cfg = self.config
        m = cfg.behavior_window
        for r in requests:
            if len(r.behaviors) != m:
                raise ValueError(
                    f"request has {len(r.behaviors)} behavior slots, expected {m}"
                )
        steps = [
            self._embed_behaviors_step([r.behaviors[t] for r in requests])
            for t in range(m)
        ]
        if cfg.variant == "DNN":
            total = steps[0]
            for x in steps[1:]:
                total = ad.add(total, x)
            return ad.mul(total, 1.0 / m)
        if cfg.variant == "ATTENTION_DNN":
            return self._attentive_sum(steps, query_emb)
        if cfg.variant == "GRU_RNN":
            return self._gru_states(steps)[-1]
        if cfg.variant == "ATTENTION_GRU_RNN":
            return self._attentive_sum(self._gru_states(steps), query_emb)
        # CONCATENATE_DNN
        stacked = ad.concat_cols(steps)
        return self._act(stacked @ self.params["concat/W"] + self.params["concat/b"])

    def encode_behaviors(self, requests: Sequence[QueryRequest]) -> Tensor:
        """Variant-dispatched behavior encoding h, one row per request."""
        query_emb = self._embed_id_lists(
            "term_id", [r.query_term_ids for r in requests]
        )
        return self._encode_behaviors(requests, query_emb)

    # ------------------------------------------------------------------
    # towers

    def _tower(self, x: Tensor, side: str) -> Tensor:
        w1, b1, w2, b2 = (self.params[n] for n in self.tower_param_names(side))
        return self._act(self._act(x @ w1 + b1) @ w2 + b2)

    def qu_forward(self, requests: Sequence[QueryRequest]) -> Tensor:
        """Query-tower outputs V_qu, shape [batch x d]."""
        if not requests:
            raise ValueError("empty request batch")
        query_emb = self._embed_id_lists(
            "term_id", [r.query_term_ids for r in requests]
        )
        profile_emb = self._embed_id_lists(
            "profile_id", [r.profile_ids for r in requests]
        )
        h = self._encode_behaviors(requests, query_emb)
        x = ad.concat_cols([query_emb, profile_emb, h])
        x = self._act(x @ self.params["qu_proj/W"] + self.params["qu_proj/b"])
        return self._tower(x, "qu")

    def ad_forward(self, ads: Sequence[AdItem]) -> Tensor:
        """Ad-tower outputs V_a, shape [batch x d]."""
        if not ads:
            raise ValueError("empty ad batch")
        x = self._embed_ads(ads)
        x = self._act(x @ self.params["ad_proj/W"] + self.params["ad_proj/b"])
        return self._tower(x, "ad")

    # ------------------------------------------------------------------
    # heads and losses

    def retrieval_prob(
        self, v_qu: Tensor, v_a: Tensor, gamma: float | None = None
    ) -> Tensor:
        """sigmoid(gamma * cosine(V_qu, V_a)) per row, in (0, 1)."""
        g = self.config.gamma if gamma is None else gamma
        if g <= 0:
            raise ValueError(f"gamma must be positive, got {g}")
        return ad.sigmoid(ad.mul(ad.cosine_rows(v_qu, v_a), g))

    def retrieval_loss(
        self, v_qu: Tensor, v_a: Tensor, labels, gamma: float | None = None
    ) -> Tensor:
        labels = _check_labels(labels)
        return _bce(self.retrieval_prob(v_qu, v_a, gamma), labels)

    def prerank_prob(self, v_qu: Tensor, v_a: Tensor) -> Tensor:
        """Click probability from the lightweight interaction net, per row."""
        p = self.params
        x = ad.concat_cols([v_qu, v_a])
        hidden = self._act(x @ p["prerank/W1"] + p["prerank/b1"])
        logit = hidden @ p["prerank/W2"] + p["prerank/b2"]
        return ad.sigmoid(ad.reshape(logit, (-1,)))

    def prerank_loss(self, v_qu: Tensor, v_a: Tensor, labels) -> Tensor:
        labels = _check_labels(labels)
        return _bce(self.prerank_prob(v_qu, v_a), labels)

    def towers_forward(
        self, instances: Sequence[ImpressionInstance]
    ) -> tuple[Tensor, Tensor, np.ndarray]:
        """One shared forward pass up to both tower outputs."""
        if not instances:
            raise ValueError("empty batch")
        v_qu = self.qu_forward([i.request for i in instances])
        v_a = self.ad_forward([i.ad for i in instances])
        labels = np.array([i.label for i in instances], dtype=np.float64)
        return v_qu, v_a, labels

    def joint_loss(
        self,
        instances: Sequence[ImpressionInstance],
        alpha: float | None = None,
        gamma: float | None = None,
    ) -> Tensor:
        """alpha * retrieval loss + (1 - alpha) * pre-rank loss, one forward."""
        a = self.config.alpha if alpha is None else alpha
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {a}")
        v_qu, v_a, labels = self.towers_forward(instances)
        c_v = self.retrieval_loss(v_qu, v_a, labels, gamma)
        c_r = self.prerank_loss(v_qu, v_a, labels)
        return ad.add(ad.mul(c_v, a), ad.mul(c_r, 1.0 - a))

    def loss_for_mode(
        self,
        instances: Sequence[ImpressionInstance],
        mode: str,
        alpha: float | None = None,
        gamma: float | None = None,
    ) -> Tensor:
        if mode == "JOINT":
            return self.joint_loss(instances, alpha, gamma)
        v_qu, v_a, labels = self.towers_forward(instances)
        if mode == "SINGLE_RETRIEVAL":
            return self.retrieval_loss(v_qu, v_a, labels, gamma)
        if mode == "SINGLE_PRERANK":
            return self.prerank_loss(v_qu, v_a, labels)
        raise ValueError(f"unknown training mode {mode!r}")

    # ------------------------------------------------------------------
    # inference

    def predict(
        self,
        instances: Sequence[ImpressionInstance],
        gamma: float | None = None,
        batch_size: int = 512,
    ) -> dict[str, np.ndarray]:
        """Tape-free scores for both heads over a list of instances."""
        retrieval: list[np.ndarray] = []
        prerank: list[np.ndarray] = []
        for lo in range(0, len(instances), batch_size):
            chunk = instances[lo : lo + batch_size]
            v_qu = self.qu_forward([i.request for i in chunk])
            v_a = self.ad_forward([i.ad for i in chunk])
            retrieval.append(self.retrieval_prob(v_qu, v_a, gamma).data)
            prerank.append(self.prerank_prob(v_qu, v_a).data)
        return {
            "retrieval": np.concatenate(retrieval) if retrieval else np.zeros(0),
            "prerank": np.concatenate(prerank) if prerank else np.zeros(0),
        }

    # ------------------------------------------------------------------
    # checkpointing

    def save(self, path: str | Path) -> None:
        """Write a versioned JSON checkpoint; float64 round-trips bit-exactly."""
        params = {}
        for name, entry in self.params.items():
            arr = entry.value.data
            params[name] = {
                "shape": list(arr.shape),
                "data": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii"),
                "trainable": entry.trainable,
                "frozen_rows": list(entry.frozen_rows),
            }
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "vocab_sizes": self.vocab_sizes,
            "params": params,
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "MatchingModel":
        payload = json.loads(Path(path).read_text())
        version = payload.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version!r}")
        config = EncoderConfig.from_dict(payload["config"])
        model = cls(config, payload["vocab_sizes"], seed=0)
        arrays = {}
        for name, entry in payload["params"].items():
            arr = np.frombuffer(
                base64.b64decode(entry["data"]), dtype="<f8"
            ).reshape(entry["shape"])
            arrays[name] = arr.astype(np.float64)
        model.params.load_arrays(arrays)
        return model
