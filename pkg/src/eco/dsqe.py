"""Domain-specific query encoding.

A stack of square ``ReLU(Dropout(W x + b))`` layers maps base embeddings into
a space where each query lands near the prototype of its critical component
set.  Everything is plain numpy with hand-derived gradients.

Training objective::

    L = L_contrast + alpha * L_diversity + beta * L_reg

    L_contrast  = -sum_q log softmax_k(cos(f(e_q), v_k) / temperature)[c_q]
    L_diversity = 1/(K(K-1)) * sum_{i != j} max(0, cos(v_i, v_j) - margin)
    L_reg       = mean_q ||f(e_q)||^2
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .cca import ComponentValue, CriticalComponentMap

log = logging.getLogger(__name__)

EPS = 1e-12
MANY_PROTOTYPES = 64


@dataclass(frozen=True)
class DsqeConfig:
    alpha: float = 0.5
    beta: float = 0.01
    temperature: float = 0.1
    margin: float = 0.5
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    dropout: float = 0.1
    layers: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.margin <= 1:
            raise ValueError("margin must be in [0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "DsqeConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in doc.items() if k in known})


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, EPS), norms


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def contrastive_loss(projected: np.ndarray, assignments: Sequence[int], prototypes: np.ndarray,
                     temperature: float) -> float:
    projected = np.atleast_2d(projected)
    if len(prototypes) == 0:
        raise ValueError("no prototypes")
    a_hat, _ = _normalize_rows(projected)
    v_hat, _ = _normalize_rows(prototypes)
    logits = a_hat @ v_hat.T / temperature
    logits = logits - logits.max(axis=1, keepdims=True)
    log_p = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    idx = np.asarray(assignments)
    return float(-log_p[np.arange(len(idx)), idx].sum())


def diversity_loss(prototypes: np.ndarray, margin: float) -> float:
    k = len(prototypes)
    if k < 2:
        return 0.0
    v_hat, _ = _normalize_rows(prototypes)
    sims = v_hat @ v_hat.T
    hinge = np.maximum(0.0, sims - margin)
    np.fill_diagonal(hinge, 0.0)
    return float(hinge.sum() / (k * (k - 1)))


def reg_loss(projected: np.ndarray) -> float:
    projected = np.atleast_2d(projected)
    if projected.size == 0:
        return 0.0
    return float((projected ** 2).sum(axis=1).mean())


@dataclass
class ProjectionNetwork:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.0
    training: bool = False

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]

    @classmethod
    def init(cls, dim: int, layers: int, dropout: float, rng: np.random.Generator) -> "ProjectionNetwork":
        # near-identity start keeps the base embedding geometry for early epochs
        weights = [np.eye(dim) + rng.normal(0.0, 0.1 / np.sqrt(dim), (dim, dim)) for _ in range(layers)]
        biases = [np.zeros(dim) for _ in range(layers)]
        return cls(weights, biases, dropout)

    def masks(self, batch: int, rng: np.random.Generator) -> list[np.ndarray] | None:
        if not self.training or self.dropout == 0.0:
            return None
        keep = 1.0 - self.dropout
        return [(rng.random((batch, self.dim)) < keep) / keep for _ in self.weights]

    def forward(self, x: np.ndarray, masks: list[np.ndarray] | None = None):
        """Returns the output and the per-layer cache needed for backprop."""
        h = np.atleast_2d(x)
        cache = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            u = z * masks[i] if masks is not None else z
            cache.append((h, u))
            h = np.maximum(u, 0.0)
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(x)
        return out if np.ndim(x) > 1 else out[0]

    def backward(self, grad_out: np.ndarray, cache, masks=None):
        grads_w, grads_b = [None] * len(self.weights), [None] * len(self.weights)
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            h_in, u = cache[i]
            du = g * (u > 0)
            dz = du * masks[i] if masks is not None else du
            grads_w[i] = dz.T @ h_in
            grads_b[i] = dz.sum(axis=0)
            g = dz @ self.weights[i]
        return grads_w, grads_b


def loss_and_grads(net: ProjectionNetwork, prototypes: np.ndarray, x: np.ndarray,
                   targets: np.ndarray, config: DsqeConfig, masks=None):
    """Total loss on a batch plus gradients for every weight, bias and prototype."""
    y, cache = net.forward(x, masks)
    batch = len(y)
    k = len(prototypes)

    a_hat, a_norm = _normalize_rows(y)
    v_hat, v_norm = _normalize_rows(prototypes)
    cos = a_hat @ v_hat.T
    p = _softmax(cos / config.temperature)
    onehot = np.zeros_like(p)
    onehot[np.arange(batch), targets] = 1.0
    l_con = float(-np.log(np.maximum(p[np.arange(batch), targets], 1e-300)).sum())

    g_cos = (p - onehot) / config.temperature  # dL/dcos
    safe_a = np.maximum(a_norm, EPS)
    safe_v = np.maximum(v_norm, EPS)
    row = (g_cos * cos).sum(axis=1, keepdims=True)
    grad_y = (g_cos @ v_hat - row * a_hat) / safe_a
    col = (g_cos * cos).sum(axis=0)[:, None]
    grad_v = (g_cos.T @ a_hat - col * v_hat) / safe_v

    l_div = 0.0
    if k >= 2:
        sims = v_hat @ v_hat.T
        active = (sims > config.margin).astype(float)
        np.fill_diagonal(active, 0.0)
        hinge = np.maximum(0.0, sims - config.margin)
        np.fill_diagonal(hinge, 0.0)
        scale = 1.0 / (k * (k - 1))
        l_div = float(hinge.sum() * scale)
        g_vhat = 2.0 * scale * (active @ v_hat)
        radial = (g_vhat * v_hat).sum(axis=1, keepdims=True)
        grad_v = grad_v + config.alpha * (g_vhat - radial * v_hat) / safe_v

    l_reg = float((y ** 2).sum(axis=1).mean())
    grad_y = grad_y + config.beta * 2.0 * y / batch

    grads_w, grads_b = net.backward(grad_y, cache, masks)
    total = l_con + config.alpha * l_div + config.beta * l_reg
    return total, {"contrast": l_con, "diversity": l_div, "reg": l_reg}, grads_w, grads_b, grad_v


@dataclass
class EncoderModel:
    embedder_id: str
    network: ProjectionNetwork
    prototypes: np.ndarray
    component_sets: list[frozenset[ComponentValue]]
    config: DsqeConfig
    loss_history: list[float] = field(default_factory=list)
    build_id: str = ""

    @property
    def dim(self) -> int:
        return self.network.dim

    def project(self, embeddings: np.ndarray) -> np.ndarray:
        out, _ = self.network.forward(embeddings)
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "build_id": self.build_id,
            "embedder": self.embedder_id,
            "dim": self.dim,
            "config": asdict(self.config),
            "layers": [
                {"weight": w.tolist(), "bias": b.tolist()}
                for w, b in zip(self.network.weights, self.network.biases)
            ],
            "prototypes": self.prototypes.tolist(),
            "component_sets": [[c.to_dict() for c in sorted(s)] for s in self.component_sets],
            "loss_history": self.loss_history,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "EncoderModel":
        config = DsqeConfig.from_dict(doc["config"])
        net = ProjectionNetwork(
            [np.asarray(layer["weight"], dtype=np.float64) for layer in doc["layers"]],
            [np.asarray(layer["bias"], dtype=np.float64) for layer in doc["layers"]],
            config.dropout,
            training=False,
        )
        sets = [frozenset(ComponentValue.from_dict(c) for c in s) for s in doc["component_sets"]]
        return cls(doc["embedder"], net, np.asarray(doc["prototypes"], dtype=np.float64), sets, config,
                   list(doc.get("loss_history", [])), doc.get("build_id", ""))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "EncoderModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _full_loss(net: ProjectionNetwork, prototypes: np.ndarray, x: np.ndarray, targets: np.ndarray,
               config: DsqeConfig) -> float:
    y, _ = net.forward(x)
    return (contrastive_loss(y, targets, prototypes, config.temperature)
            + config.alpha * diversity_loss(prototypes, config.margin)
            + config.beta * reg_loss(y))


def train(embeddings: np.ndarray, targets: Sequence[int], component_sets: Sequence[frozenset[ComponentValue]],
          config: DsqeConfig = DsqeConfig(), embedder_id: str = "", build_id: str = "") -> EncoderModel:
    """Mini-batch gradient descent on the projection network and prototypes.

    ``targets[i]`` indexes ``component_sets`` for the i-th embedding.  The loss
    history holds the full-data loss (dropout off) before training and after
    each epoch.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    targets = np.asarray(targets, dtype=int)
    k = len(component_sets)
    if len(x) == 0 or k == 0:
        raise ValueError("training needs at least one query and one component set")
    if k > MANY_PROTOTYPES:
        log.warning("%d distinct critical component sets; prototypes may be poorly separated", k)
    rng = np.random.default_rng(config.seed)
    net = ProjectionNetwork.init(x.shape[1], config.layers, config.dropout, rng)

    projected = net(x)
    prototypes = np.zeros((k, x.shape[1]))
    for j in range(k):
        members = projected[targets == j]
        centre = members.mean(axis=0) if len(members) else rng.normal(size=x.shape[1])
        prototypes[j] = centre
    prototypes, _ = _normalize_rows(prototypes)

    history = [_full_loss(net, prototypes, x, targets, config)]
    lr = config.learning_rate
    for _epoch in range(config.epochs):
        order = rng.permutation(len(x))
        net.training = True
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            masks = net.masks(len(idx), rng)
            _, _, gw, gb, gv = loss_and_grads(net, prototypes, x[idx], targets[idx], config, masks)
            for i in range(len(net.weights)):
                net.weights[i] -= lr * gw[i]
                net.biases[i] -= lr * gb[i]
            prototypes, _ = _normalize_rows(prototypes - lr * gv)
        net.training = False
        history.append(_full_loss(net, prototypes, x, targets, config))
    return EncoderModel(embedder_id, net, prototypes, list(component_sets), config, history, build_id)


def targets_from_map(query_ids: Sequence[str], phi: CriticalComponentMap):
    """Index every query's critical set into the list of distinct sets."""
    sets: list[frozenset[ComponentValue]] = []
    targets = []
    for qid in query_ids:
        s = phi[qid]
        if s not in sets:
            sets.append(s)
        targets.append(sets.index(s))
    return targets, sets


def train_from_map(texts: Sequence[str], query_ids: Sequence[str], phi: CriticalComponentMap, embedder,
                   config: DsqeConfig = DsqeConfig(), build_id: str = "") -> EncoderModel:
    missing = [q for q in query_ids if q not in phi]
    if missing:
        raise ValueError(f"{len(missing)} training queries have no critical component entry")
    targets, sets = targets_from_map(query_ids, phi)
    emb = embedder.embed_many(list(texts))
    return train(emb, targets, sets, config, embedder.id, build_id)


@dataclass(frozen=True)
class PrototypeAssignment:
    index: int
    components: frozenset[ComponentValue]
    similarity: float
    fallback: bool = False


def assign_embedding(model: EncoderModel, embedding: np.ndarray) -> PrototypeAssignment:
    y = model.project(np.atleast_2d(embedding))[0]
    if float(np.linalg.norm(y)) == 0.0:
        return PrototypeAssignment(-1, frozenset(), 0.0, fallback=True)
    y_hat = y / np.linalg.norm(y)
    v_hat, _ = _normalize_rows(model.prototypes)
    sims = v_hat @ y_hat
    k = int(np.argmax(sims))  # first max wins ties
    return PrototypeAssignment(k, model.component_sets[k], float(sims[k]))


def assign_prototype(model: EncoderModel, text: str, embedder) -> PrototypeAssignment:
    return assign_embedding(model, embedder.embed(text))
