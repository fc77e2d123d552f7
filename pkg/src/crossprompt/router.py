"""Prototype routing over fused text/image embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .exceptions import (
    ConfigurationError,
    DegenerateInputError,
    MissingCacheError,
    NotFittedError,
    ShapeError,
)

ROUTER_MODES = ("learned", "oracle", "none")


def _normalize(x: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateInputError(f"zero {what} cannot be normalised")
    return x / n


@dataclass(frozen=True)
class RouterEncoders:
    """Fixed text and image encoders standing in for a frozen joint embedding model.

    ``xi`` averages token embeddings over valid instruction positions;
    ``gamma`` is a linear map of the row-averaged raw visual features.
    """

    token_table: np.ndarray  # (vocab, d_r)
    image_map: np.ndarray  # (d_r, d_v)

    @classmethod
    def create(cls, vocab: int, d_v: int, d_r: int = 16, seed: int = 0) -> "RouterEncoders":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC11B]))
        tt = rng.standard_normal((vocab, d_r))
        im = rng.standard_normal((d_r, d_v)) / np.sqrt(d_v)
        tt.setflags(write=False)
        im.setflags(write=False)
        return cls(tt, im)

    def xi(self, tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
        tokens, mask = np.atleast_2d(tokens), np.atleast_2d(mask).astype(np.float64)
        counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        return np.einsum("bs,bsd->bd", mask, self.token_table[tokens]) / counts

    def gamma(self, visual: np.ndarray) -> np.ndarray:
        visual = np.asarray(visual, dtype=np.float64)
        if visual.ndim == 2:
            visual = visual[None]
        return visual.mean(axis=1) @ self.image_map.T


def fuse(text_emb: np.ndarray, image_emb: np.ndarray) -> np.ndarray:
    """``norm([norm(text); norm(image)])`` row-wise."""
    text_emb, image_emb = np.atleast_2d(text_emb), np.atleast_2d(image_emb)
    cat = np.concatenate([_normalize(text_emb, "text embedding"), _normalize(image_emb, "image embedding")], axis=-1)
    return _normalize(cat, "routing feature")


def routing_feature(encoders: RouterEncoders, tokens, mask, visual) -> np.ndarray:
    return fuse(encoders.xi(tokens, mask), encoders.gamma(visual))


def init_prototype(features: np.ndarray) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] == 0:
        raise DegenerateInputError("cannot build a prototype from no features")
    mean = features.mean(axis=0)
    if np.linalg.norm(mean) < 1e-12:
        raise DegenerateInputError("features average to zero")
    return mean / np.linalg.norm(mean)


def prototype_loss(cached: np.ndarray, c_t: np.ndarray, prev: np.ndarray, tau: float) -> float:
    """Mean cross-entropy of picking ``c_t`` among ``[c_t, prev...]`` by cosine / tau."""
    return _loss_and_grad(cached, c_t, prev, tau)[0]


def _loss_and_grad(cached, c_t, prev, tau):
    e = np.atleast_2d(cached)
    prev = np.atleast_2d(prev)
    cn = np.linalg.norm(c_t)
    cos_t = e @ c_t / (np.linalg.norm(e, axis=1) * cn)
    cos_s = (e @ prev.T) / (np.linalg.norm(e, axis=1, keepdims=True) * np.linalg.norm(prev, axis=1))
    logits = np.concatenate([cos_t[:, None], cos_s], axis=1) / tau
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float(np.mean(lse - logits[:, 0]))
    p_t = np.exp(logits[:, 0] - lse)
    # d loss / d cos_t per sample, then chain through cos(e, c) = e.c / (|e||c|)
    dcos = -(1.0 - p_t) / (tau * e.shape[0])
    en = e / np.linalg.norm(e, axis=1, keepdims=True)
    dc = (en - cos_t[:, None] * c_t / cn) / cn
    return loss, dcos @ dc


def refine_prototype(
    c_t: np.ndarray, cached: np.ndarray | None, prev: np.ndarray, tau: float = 0.07, lr: float = 0.05, steps: int = 100
) -> tuple[np.ndarray, list[float]]:
    """Gradient descent on the prototype loss w.r.t. ``c_t`` only.

    ``c_t`` is renormalised after every step. Returns the refined prototype and
    the loss before each step plus the final loss.
    """
    if cached is None or len(cached) == 0:
        raise MissingCacheError("no cached routing features to refine on")
    if tau <= 0:
        raise ConfigurationError("tau must be positive")
    prev = np.atleast_2d(prev)
    if prev.shape[0] == 0:
        raise ConfigurationError("refinement needs at least one earlier prototype")
    c = np.asarray(c_t, dtype=np.float64) / np.linalg.norm(c_t)
    history = []
    for _ in range(steps):
        loss, g = _loss_and_grad(cached, c, prev, tau)
        history.append(loss)
        if lr == 0:
            continue
        c = c - lr * g
        c = c / np.linalg.norm(c)
    history.append(prototype_loss(cached, c, prev, tau))
    return c, history


def route(feature: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Argmax cosine similarity; ties go to the lowest task index."""
    prototypes = np.atleast_2d(prototypes)
    if prototypes.shape[0] == 0:
        raise NotFittedError("no prototypes registered")
    f = np.atleast_2d(feature)
    if f.shape[1] != prototypes.shape[1]:
        raise ShapeError("feature and prototype widths differ")
    scores = _normalize(f, "routing feature") @ _normalize(prototypes, "prototype").T
    return np.argmax(scores, axis=1)


class PrototypeRouter(ClassifierMixin, BaseEstimator):
    """One unit prototype per task, registered incrementally with ``partial_fit``.

    The class label is the task index. Instance features are cached only
    between ``partial_fit`` and ``discard_cache``.
    """

    def __init__(self, tau: float = 0.07, lr: float = 0.05, steps: int = 100, refine: bool = True):
        self.tau = tau
        self.lr = lr
        self.steps = steps
        self.refine = refine

    def partial_fit(self, X, y=None, discard: bool = True):
        """Register the prototype of the next task from its routing features ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        protos = getattr(self, "prototypes_", np.zeros((0, X.shape[1])))
        task = protos.shape[0]
        if y is not None and np.any(np.asarray(y) != task):
            raise ConfigurationError(f"partial_fit expects features of task {task} only")
        c = init_prototype(X)
        self._cache = X
        self.refine_history_ = []
        if self.refine and task > 0:
            c, self.refine_history_ = refine_prototype(c, X, protos, self.tau, self.lr, self.steps)
        self.prototypes_ = np.vstack([protos, c[None]])
        self.classes_ = np.arange(self.prototypes_.shape[0])
        self.n_features_in_ = X.shape[1]
        if discard:
            self.discard_cache()
        return self

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        self.__dict__.pop("prototypes_", None)
        for t in np.unique(y):
            self.partial_fit(X[y == t])
        return self

    def refine_last(self):
        """Re-run refinement of the newest prototype on its cache."""
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise MissingCacheError("instance cache was discarded")
        c, self.refine_history_ = refine_prototype(
            self.prototypes_[-1], cache, self.prototypes_[:-1], self.tau, self.lr, self.steps
        )
        self.prototypes_[-1] = c
        return self

    def discard_cache(self):
        self._cache = None

    def predict(self, X):
        if not hasattr(self, "prototypes_"):
            raise NotFittedError("router has no prototypes")
        return route(X, self.prototypes_)

    def decision_function(self, X):
        return _normalize(np.atleast_2d(X), "routing feature") @ self.prototypes_.T


class RoutingEncoder(TransformerMixin, BaseEstimator):
    """Batch -> fused routing features. Stateless apart from the seeded encoders."""

    def __init__(self, vocab: int = 64, d_v: int = 16, d_r: int = 16, seed: int = 0):
        self.vocab = vocab
        self.d_v = d_v
        self.d_r = d_r
        self.seed = seed

    def fit(self, X=None, y=None):
        self.encoders_ = RouterEncoders.create(self.vocab, self.d_v, self.d_r, self.seed)
        return self

    def transform(self, X):
        if not hasattr(self, "encoders_"):
            self.fit()
        return routing_feature(self.encoders_, X.tokens, X.mask, X.visual)
