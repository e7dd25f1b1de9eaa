"""Residual-quantized autoencoder that maps POI feature vectors to code tuples.

The encoder and decoder are ReLU MLPs; between them sit ``num_layers``
codebooks, each quantizing the residual left by the layers before it.
Training minimizes ``recon + quant_weight * quant + diversity_weight * div``
with straight-through gradients from the decoder into the encoder.
"""

import json
import logging
import os
import warnings
from dataclasses import dataclass
from typing import List

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import numcore as nc

logger = logging.getLogger(__name__)

COMPACTNESS_OPERANDS = ("assigned", "codewords")


class TrainingDivergedError(RuntimeError):
    """Raised when a loss goes non-finite; the model keeps its last good state."""


@dataclass
class QuantizationResult:
    indices: np.ndarray  # (n, L) selected codeword per layer
    residuals: List[np.ndarray]  # inputs to each layer, r^(0) = z_e
    codewords: List[np.ndarray]  # selected codeword rows per layer
    quantized: np.ndarray  # sum of selected codewords
    final_residual: np.ndarray


def nearest_codewords(R, C, chunk=4096):
    """Index of the closest row of ``C`` for each row of ``R``; ties pick the lowest index."""
    out = np.empty(len(R), dtype=np.int64)
    for start in range(0, len(R), chunk):
        block = R[start : start + chunk]
        d = ((block[:, None, :] - C[None, :, :]) ** 2).sum(-1)
        out[start : start + chunk] = np.argmin(d, axis=1)
    return out


def quantize(z_e, codebooks):
    z_e = np.asarray(z_e, dtype=np.float64)
    r = z_e
    quantized = np.zeros_like(z_e)
    indices, residuals, selected = [], [], []
    for C in codebooks:
        k = nearest_codewords(r, C)
        e = C[k]
        indices.append(k)
        residuals.append(r)
        selected.append(e)
        quantized = quantized + e
        r = r - e
    return QuantizationResult(np.stack(indices, axis=1), residuals, selected, quantized, r)


def _as_tensor(x):
    return x if isinstance(x, nc.Tensor) else nc.constant(x)


def loss_recon(p, p_hat):
    """Squared L2 reconstruction error per example, averaged over the batch."""
    return nc.mean_row_sqnorm(nc.sub(_as_tensor(p), _as_tensor(p_hat)))


def loss_quant(residuals, codewords, beta=0.25):
    """Codebook term plus beta-weighted commitment term, summed over layers.

    The codebook term sees the residual through stop-gradient and the
    commitment term sees the codeword through stop-gradient.
    """
    terms = []
    for r, e in zip(residuals, codewords):
        r, e = _as_tensor(r), _as_tensor(e)
        terms.append(nc.mean_row_sqnorm(nc.sub(nc.stop_gradient(r), e)))
        terms.append(nc.scale(nc.mean_row_sqnorm(nc.sub(r, nc.stop_gradient(e))), beta))
    return nc.total(*terms)


def utilization_loss(indices, K):
    """(1/N) * sum_i |count_i - N/K| over the K codewords of one layer."""
    indices = np.asarray(indices)
    n = len(indices)
    if n == 0:
        return 0.0
    counts = np.bincount(indices, minlength=K)
    return float(np.abs(counts - n / K).sum() / n)


def compactness_loss(vectors, indices, K):
    """Sum over codewords of mean pairwise squared distance among assigned vectors."""
    return nc.group_compactness(_as_tensor(vectors), indices, K)


def soft_utilization(residual, codebook, tau):
    """Zero-valued term whose gradient is that of the soft-count utilization.

    Added to the hard utilization value it leaves the loss value unchanged
    while giving the codebook and encoder a signal toward balanced usage.
    """
    D = nc.sq_dist_rows(_as_tensor(residual), _as_tensor(codebook))
    # Temperature is relative to the batch's mean distance so the signal survives rescaling.
    scale = max(float(D.value.mean()), 1e-12)
    soft = nc.soft_count_deviation(D, tau * scale)
    return nc.sub(soft, nc.stop_gradient(soft))


def loss_diversity(indices, residuals, K, codebooks=None, operand="assigned", soft_tau=None):
    """Utilization plus compactness, summed over layers.

    ``indices`` is (n, L). With ``operand="codewords"`` the compactness term
    is taken over each layer's codebook rows instead of the assigned batch
    residuals, which needs ``codebooks``. Hard counts carry no gradient;
    ``soft_tau`` adds the soft-count gradient (see :func:`soft_utilization`).
    """
    indices = np.asarray(indices)
    util = sum(utilization_loss(indices[:, l], K) for l in range(indices.shape[1]))
    terms = [nc.constant(util)]
    if soft_tau is not None:
        terms.extend(soft_utilization(residuals[l], codebooks[l], soft_tau) for l in range(indices.shape[1]))
    for l in range(indices.shape[1]):
        if operand == "assigned":
            terms.append(compactness_loss(residuals[l], indices[:, l], K))
        elif operand == "codewords":
            C = _as_tensor(codebooks[l])
            terms.append(nc.group_compactness(C, np.zeros(C.shape[0], dtype=np.int64), 1))
        else:
            raise ValueError(f"compactness operand must be one of {COMPACTNESS_OPERANDS}")
    return nc.total(*terms)


def kmeans(X, K, iters, rng):
    """k-means++ seeded Lloyd iterations; empty clusters take the farthest point."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if n < K:
        warnings.warn(f"k-means batch has {n} rows for {K} clusters; sampling with replacement")
        X = X[rng.integers(0, n, size=K)]
        n = K
    if np.all(X == X[0]):
        warnings.warn("k-means batch is degenerate (all rows identical); codewords will coincide")
        return np.repeat(X[:1], K, axis=0)

    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for j in range(1, K):
        s = d2.sum()
        idx = rng.choice(n, p=d2 / s) if s > 0 else int(rng.integers(n))
        centers[j] = X[idx]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(1))

    for _ in range(iters):
        assign = nearest_codewords(X, centers)
        dist = ((X - centers[assign]) ** 2).sum(1)
        for j in range(K):
            members = assign == j
            if members.any():
                centers[j] = X[members].mean(0)
            else:
                far = int(np.argmax(dist))
                centers[j] = X[far]
                dist[far] = 0.0
    return centers


def kmeans_init(z_batch, num_layers, K, iters, rng):
    """Initialize codebooks layer by layer on the residuals of the layers before."""
    books = []
    r = np.asarray(z_batch, dtype=np.float64)
    for _ in range(num_layers):
        C = kmeans(r, K, iters, rng)
        books.append(C)
        r = r - C[nearest_codewords(r, C)]
    return books


def _entropy(indices, K):
    p = np.bincount(indices, minlength=K) / max(len(indices), 1)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def collision_count(indices):
    """Number of rows whose code tuple is shared with at least one other row."""
    _, inverse, counts = np.unique(indices, axis=0, return_inverse=True, return_counts=True)
    return int((counts[np.ravel(inverse)] > 1).sum())


class RQVAE(TransformerMixin, BaseEstimator):
    """Residual-quantized autoencoder; ``transform`` returns (n, num_layers) code indices.

    Parameters mirror the training configuration: ``commitment_beta`` weights
    the commitment term, ``quant_weight`` and ``diversity_weight`` weight the
    quantization and diversity losses. Training runs Adam for at most
    ``max_epochs`` epochs and stops after ``patience`` epochs without a
    reconstruction improvement on the monitored rows (a held-out fraction
    when ``validation_fraction > 0``, otherwise all training rows).
    ``utilization_tau`` sets the relative temperature of the soft-count
    gradient for the utilization term; ``None`` leaves that term gradient-free.
    """

    def __init__(
        self,
        num_layers=3,
        codebook_size=32,
        code_dim=64,
        encoder_hidden=(512, 128),
        commitment_beta=0.25,
        quant_weight=1.0,
        diversity_weight=0.25,
        batch_size=256,
        max_epochs=200,
        patience=10,
        learning_rate=1e-3,
        kmeans_iters=10,
        compactness_operand="assigned",
        utilization_tau=0.02,
        validation_fraction=0.0,
        random_state=0,
    ):
        self.num_layers = num_layers
        self.codebook_size = codebook_size
        self.code_dim = code_dim
        self.encoder_hidden = encoder_hidden
        self.commitment_beta = commitment_beta
        self.quant_weight = quant_weight
        self.diversity_weight = diversity_weight
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.kmeans_iters = kmeans_iters
        self.compactness_operand = compactness_operand
        self.utilization_tau = utilization_tau
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _check_config(self):
        errors = []
        if self.num_layers < 1:
            errors.append("num_layers must be >= 1")
        if self.codebook_size < 2:
            errors.append("codebook_size must be >= 2")
        if self.code_dim < 1:
            errors.append("code_dim must be >= 1")
        if not 0.0 <= self.quant_weight <= 1.0:
            errors.append("quant_weight must lie in [0, 1]")
        if not 0.0 <= self.diversity_weight <= 1.0:
            errors.append("diversity_weight must lie in [0, 1]")
        if self.commitment_beta < 0:
            errors.append("commitment_beta must be >= 0")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.compactness_operand not in COMPACTNESS_OPERANDS:
            errors.append(f"compactness_operand must be one of {COMPACTNESS_OPERANDS}")
        if self.utilization_tau is not None and not self.utilization_tau > 0:
            errors.append("utilization_tau must be None or > 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            errors.append("validation_fraction must lie in [0, 1)")
        if errors:
            raise ValueError("; ".join(errors))

    # -- parameters -----------------------------------------------------

    def _init_params(self, n_in, rng):
        store = nc.ParamStore()
        enc = [n_in, *self.encoder_hidden, self.code_dim]
        dec = enc[::-1]
        for prefix, dims in (("enc", enc), ("dec", dec)):
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                bound = 1.0 / np.sqrt(a)
                store.add(f"{prefix}{i}.W", rng.uniform(-bound, bound, size=(a, b)))
                store.add(f"{prefix}{i}.b", rng.uniform(-bound, bound, size=(1, b)))
        return store

    @property
    def _n_mlp(self):
        return len(self.encoder_hidden) + 1

    @property
    def codebooks_(self):
        check_is_fitted(self, "store_")
        return [self.store_[f"codebook{l}"].value for l in range(self.num_layers)]

    def _mlp(self, prefix, h):
        for i in range(self._n_mlp):
            h = nc.affine(h, self.store_[f"{prefix}{i}.W"], self.store_[f"{prefix}{i}.b"])
            if i < self._n_mlp - 1:
                h = nc.relu(h)
        return h

    def _mlp_np(self, prefix, h):
        for i in range(self._n_mlp):
            h = h @ self.store_[f"{prefix}{i}.W"].value + self.store_[f"{prefix}{i}.b"].value
            if i < self._n_mlp - 1:
                h = np.maximum(h, 0.0)
        return h

    # -- forward --------------------------------------------------------

    def forward(self, X):
        """Build the training graph for a batch.

        Returns a dict of tensors (``total``, ``recon``, ``quant``, ``div``)
        plus the selected ``indices``.
        """
        x = nc.constant(X)
        z_e = self._mlp("enc", x)
        r = z_e
        residuals, selected, indices = [], [], []
        z_q = None
        for l in range(self.num_layers):
            C = self.store_[f"codebook{l}"]
            k = nearest_codewords(r.value, C.value)
            e = nc.take_rows(C, k)
            residuals.append(r)
            selected.append(e)
            indices.append(k)
            z_q = e if z_q is None else nc.add(z_q, e)
            # Residual chain does not route gradient into earlier codebooks.
            r = nc.sub(r, nc.stop_gradient(e))
        p_hat = self._mlp("dec", nc.straight_through(z_e, z_q))
        indices = np.stack(indices, axis=1)
        recon = loss_recon(x, p_hat)
        quant = loss_quant(residuals, selected, self.commitment_beta)
        div = loss_diversity(
            indices,
            residuals,
            self.codebook_size,
            [self.store_[f"codebook{l}"] for l in range(self.num_layers)],
            self.compactness_operand,
            self.utilization_tau,
        )
        loss = nc.total(recon, nc.scale(quant, self.quant_weight), nc.scale(div, self.diversity_weight))
        return {"total": loss, "recon": recon, "quant": quant, "div": div, "indices": indices}

    # -- training -------------------------------------------------------

    def fit(self, X, y=None):
        self._check_config()
        X = check_array(X, dtype=np.float64)
        rng = np.random.default_rng(self.random_state)
        n = len(X)
        self.n_features_in_ = X.shape[1]

        order = rng.permutation(n)
        n_val = int(n * self.validation_fraction)
        val_rows, train_rows = order[:n_val], order[n_val:]
        if len(train_rows) == 0:
            raise ValueError("no training rows left after the validation hold-out")
        X_train = X[train_rows]
        X_monitor = X[val_rows] if n_val else X_train

        self.store_ = self._init_params(self.n_features_in_, rng)
        perm = rng.permutation(len(X_train))
        first = X_train[perm[: self.batch_size]]
        books = kmeans_init(self.encode(first), self.num_layers, self.codebook_size, self.kmeans_iters, rng)
        for l, C in enumerate(books):
            self.store_.add(f"codebook{l}", C)

        self.history_ = []
        best = np.inf
        best_snap = self.store_.snapshot()
        last_good = best_snap
        stale = 0
        self.best_epoch_ = 0
        for epoch in range(1, self.max_epochs + 1):
            if epoch > 1:
                perm = rng.permutation(len(X_train))
            sums = {"total": 0.0, "recon": 0.0, "quant": 0.0, "div": 0.0}
            n_batches = 0
            try:
                for start in range(0, len(X_train), self.batch_size):
                    batch = X_train[perm[start : start + self.batch_size]]
                    out = self.forward(batch)
                    self.store_.zero_grad()
                    nc.backward(out["total"])
                    nc.adam_step(self.store_, self.learning_rate)
                    for key in sums:
                        sums[key] += out[key].item()
                    n_batches += 1
            except FloatingPointError as exc:
                self.store_.restore(last_good)
                raise TrainingDivergedError(f"epoch {epoch}: {exc}; restored last good parameters") from exc
            last_good = self.store_.snapshot()

            row = {k: v / n_batches for k, v in sums.items()}
            row["epoch"] = epoch
            q_train = self.quantize(X_train)
            idx_train = q_train.indices
            row["entropy"] = [_entropy(idx_train[:, l], self.codebook_size) for l in range(self.num_layers)]
            row["collisions"] = collision_count(idx_train)
            q_monitor = self.quantize(X_monitor) if n_val else q_train
            monitor = float(np.mean(((X_monitor - self.decode(q_monitor.quantized)) ** 2).sum(1)))
            row["monitor_recon"] = monitor
            self.history_.append(row)
            logger.debug("epoch %d %s", epoch, row)

            if monitor < best - 1e-12:
                best, best_snap, stale = monitor, last_good, 0
                self.best_epoch_ = epoch
            else:
                stale += 1
                if stale >= self.patience:
                    break
        self.store_.restore(best_snap)
        self.n_iter_ = len(self.history_)
        return self

    # -- inference ------------------------------------------------------

    def _check_X(self, X):
        check_is_fitted(self, "store_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def encode(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.store_["enc0.W"].shape[0]:
            raise ValueError(f"expected {self.store_['enc0.W'].shape[0]} features, got {X.shape[1]}")
        return self._mlp_np("enc", X)

    def decode(self, Z):
        Z = np.asarray(Z, dtype=np.float64)
        if Z.shape[1] != self.code_dim:
            raise ValueError(f"expected code dimension {self.code_dim}, got {Z.shape[1]}")
        return self._mlp_np("dec", Z)

    def quantize(self, X):
        return quantize(self.encode(self._check_X(X)), self.codebooks_)

    def transform(self, X):
        return self.quantize(X).indices

    predict = transform

    def reconstruct(self, X):
        return self.decode(self.quantize(X).quantized)

    def report_lines(self):
        """Per-epoch training log as text lines."""
        check_is_fitted(self, "history_")
        head = "epoch\tL_total\tL_recon\tL_quant\tL_div\tmonitor_recon\tentropy\tcollisions"
        lines = [head]
        for row in self.history_:
            ent = ",".join(f"{h:.6f}" for h in row["entropy"])
            lines.append(
                f"{row['epoch']}\t{row['total']:.10g}\t{row['recon']:.10g}\t{row['quant']:.10g}\t"
                f"{row['div']:.10g}\t{row['monitor_recon']:.10g}\t{ent}\t{row['collisions']}"
            )
        return lines

    # -- persistence ----------------------------------------------------

    def save(self, directory):
        check_is_fitted(self, "store_")
        os.makedirs(directory, exist_ok=True)
        nc.save_params(self.store_.values(), os.path.join(directory, "params.txt"))
        params = self.get_params()
        params["encoder_hidden"] = list(params["encoder_hidden"])
        meta = {"config": params, "n_features_in": self.n_features_in_, "best_epoch": self.best_epoch_}
        with open(os.path.join(directory, "config.json"), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "config.json"), encoding="utf-8") as f:
            meta = json.load(f)
        config = meta["config"]
        config["encoder_hidden"] = tuple(config["encoder_hidden"])
        model = cls(**config)
        model.store_ = nc.ParamStore()
        for name, arr in nc.load_params(os.path.join(directory, "params.txt")).items():
            model.store_.add(name, arr)
        model.n_features_in_ = meta["n_features_in"]
        model.best_epoch_ = meta["best_epoch"]
        return model


def infer_indices(model, features):
    """Code tuples for a :class:`~poisid.features.FeatureMatrix` as ``{poi_id: tuple}``."""
    idx = model.transform(features.X)
    return {pid: tuple(int(v) for v in row) for pid, row in zip(features.poi_ids, idx)}
