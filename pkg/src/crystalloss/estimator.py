"""scikit-learn estimator wrapping the embedding network + loss head, so
the training pipeline composes with Pipeline/GridSearchCV/clone.

``fit`` trains the MLP end-to-end through the configured head;
``transform`` returns raw embeddings (normalization is the scorer's job);
``predict`` is the head's argmax.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .heads import head_logits
from .network import MlpModel, TrainConfig, build_head, extract_features, train

__all__ = ["CrystalEmbeddingClassifier"]


class CrystalEmbeddingClassifier(BaseEstimator, ClassifierMixin, TransformerMixin):
    """Classifier with an L2-constrained-softmax (or plain softmax) head.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of the relu hidden layers.
    embedding_dim : int
        Output dimension of the embedding (the penultimate feature).
    head : {"crystal_fixed", "crystal_trainable", "softmax"}
        Loss head trained on top of the embedding.
    alpha : float or None
        Hypersphere radius for crystal heads.  None picks the default for
        crystal_fixed and the p=0.9 lower bound for crystal_trainable.
    batch_size, base_lr, lr_drop_steps, lr_drop_factor, max_iters, seed
        SGD schedule, forwarded to the training loop.  Identical seeds give
        bit-identical fits.
    """

    def __init__(self, hidden_layer_sizes=(64, 64), embedding_dim=16,
                 head="crystal_fixed", alpha=None, batch_size=32, base_lr=0.1,
                 lr_drop_steps=(), lr_drop_factor=0.1, max_iters=500, seed=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.embedding_dim = embedding_dim
        self.head = head
        self.alpha = alpha
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.lr_drop_steps = lr_drop_steps
        self.lr_drop_factor = lr_drop_factor
        self.max_iters = max_iters
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        config = TrainConfig(
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            lr_drop_steps=tuple(self.lr_drop_steps),
            lr_drop_factor=self.lr_drop_factor,
            max_iters=self.max_iters,
            seed=self.seed,
            head_kind=self.head,
            alpha=self.alpha,
        )
        rng = np.random.default_rng(self.seed)
        sizes = [X.shape[1], *self.hidden_layer_sizes, self.embedding_dim]
        model = MlpModel.initialize(sizes, rng)
        head = build_head(config, len(self.classes_), self.embedding_dim, rng)
        self.model_, self.head_, self.history_ = train(model, head, (X, y_idx), config)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        """Raw (un-normalized) embeddings, one row per sample."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return extract_features(self.model_, X)

    def decision_function(self, X):
        return head_logits(self.head_, self.transform(X))

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
