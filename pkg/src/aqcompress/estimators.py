"""scikit-learn compatible wrappers around the functional core."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y
from scipy.special import softmax

from . import aq_model, entropy_codec, pager, task_zoo
from .tensor_io import TensorArchive


class AdditiveQuantizer(TransformerMixin, BaseEstimator):
    """Learn M codebooks of K basis vectors so each row of X is a sum of M rows.

    ``transform`` returns the (n_samples, M) integer codes and
    ``inverse_transform`` rebuilds rows from codes.

    Parameters
    ----------
    n_codebooks, n_basis, hidden : int
        M, K and the encoder hidden width H.
    tau : float
        Gumbel-softmax temperature.
    epochs, batch_size, learning_rate : training budget for Adam.
    patience : int or None
        Early stop after this many epochs without improvement.
    random_state : int
    """

    def __init__(self, n_codebooks=4, n_basis=16, hidden=32, tau=1.0, epochs=500, batch_size=256,
                 learning_rate=1e-3, patience=None, random_state=0):
        self.n_codebooks = n_codebooks
        self.n_basis = n_basis
        self.hidden = hidden
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.random_state = random_state

    def _hyper(self, n_features):
        return aq_model.AqHyper(D=n_features, M=self.n_codebooks, K=self.n_basis, H=self.hidden,
                                tau=self.tau, seed=self.random_state)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        self.hyper_ = self._hyper(X.shape[1])
        opt = aq_model.OptimConfig(lr=self.learning_rate, batch_size=self.batch_size,
                                   epochs=self.epochs, patience=self.patience)
        self.encoder_, self.codebooks_, self.train_log_ = aq_model.train_aq(X, self.hyper_, opt)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "codebooks_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return aq_model.extract_codes(X, self.encoder_, self.hyper_)

    def inverse_transform(self, codes):
        check_is_fitted(self, "codebooks_")
        return aq_model.reconstruct_hard(np.asarray(codes, dtype=np.int64), self.codebooks_)

    def score(self, X, y=None):
        """Negative mean squared L2 reconstruction error (higher is better)."""
        X = check_array(X, dtype=np.float32)
        return -aq_model.recon_loss(X, self.inverse_transform(self.transform(X)))


class ArchiveCompressor(BaseEstimator):
    """Page a checkpoint, fit an :class:`AdditiveQuantizer` on it and emit ``AQPK`` bytes."""

    def __init__(self, page_size=8, n_codebooks=4, n_basis=32, hidden=32, tau=1.0, epochs=500,
                 batch_size=256, learning_rate=1e-3, patience=None, random_state=0):
        self.page_size = page_size
        self.n_codebooks = n_codebooks
        self.n_basis = n_basis
        self.hidden = hidden
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.random_state = random_state

    def fit(self, archive: TensorArchive, y=None):
        pages, self.manifest_ = pager.flatten(archive, self.page_size)
        self.quantizer_ = AdditiveQuantizer(
            n_codebooks=self.n_codebooks, n_basis=self.n_basis, hidden=self.hidden, tau=self.tau,
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            patience=self.patience, random_state=self.random_state,
        ).fit(pages)
        self.codes_ = self.quantizer_.transform(pages)
        self.recon_mse_ = aq_model.recon_loss(pages, self.quantizer_.inverse_transform(self.codes_))
        return self

    @property
    def codebooks_(self):
        return self.quantizer_.codebooks_

    def reconstruct(self) -> TensorArchive:
        check_is_fitted(self, "codes_")
        return pager.unflatten(self.quantizer_.inverse_transform(self.codes_), self.manifest_)

    def ratios(self) -> dict:
        check_is_fitted(self, "codes_")
        return entropy_codec.ratio_report(self.codes_, self.codebooks_, self.manifest_)

    def to_bytes(self, extra: Optional[dict] = None) -> bytes:
        check_is_fitted(self, "codes_")
        return entropy_codec.write_container(self.codebooks_, self.codes_, self.manifest_,
                                             self.quantizer_.hyper_, extra=extra)


class MLPTaskClassifier(ClassifierMixin, BaseEstimator):
    """Fully connected softmax classifier trained with plain minibatch SGD."""

    def __init__(self, hidden_layer_sizes=(64, 64), activation="relu", epochs=30, learning_rate=0.05,
                 batch_size=32, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        widths = (X.shape[1], *self.hidden_layer_sizes, len(self.classes_))
        spec = task_zoo.MlpSpec(widths, self.activation, self.random_state)
        data = task_zoo.Dataset(X, y_idx, len(self.classes_))
        self.model_, self.history_ = task_zoo.train_task(
            spec, data, self.epochs, self.learning_rate, self.random_state, self.batch_size)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        logits, _ = task_zoo.forward(self.model_, check_array(X, dtype=np.float32))
        return softmax(logits, axis=1)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[task_zoo.predict(self.model_, check_array(X, dtype=np.float32))]

    def to_archive(self) -> TensorArchive:
        check_is_fitted(self, "model_")
        return self.model_.to_archive()
