"""Scikit-learn style wrappers around the forecasting pipeline.

``UniFlowForecaster.fit`` takes a list of :class:`FlowDataset` (the model is
trained jointly on all of them); ``predict`` maps history windows in data
units to horizon forecasts in data units.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .data import FlowDataset, GraphTopology, Normalizer, TaskSpec
from .evaluation import EvalReport, history_average, noise_eval, protocol_predict
from .model import ModelConfig
from .partition import partition_kway
from .patching import PatchConfig
from .stmra import BANKS
from .training import PreparedDataset, TrainConfig, build_model, predict_normalized, prepare, train
from .validation import check_datasets, check_flow_array, check_noise_level, check_positive_int


class MinMaxFlowScaler(TransformerMixin, BaseEstimator):
    """Global min-max scaling to [0, 1] over every value of ``X``."""

    def fit(self, X, y=None):
        X = check_flow_array(X, ndim=range(1, 5))
        self.normalizer_ = Normalizer.fit(X)
        self.data_min_ = self.normalizer_.lo
        self.data_max_ = self.normalizer_.hi
        return self

    def transform(self, X):
        check_is_fitted(self, "normalizer_")
        return self.normalizer_.transform(check_flow_array(X, ndim=range(1, 5)))

    def inverse_transform(self, X):
        check_is_fitted(self, "normalizer_")
        return self.normalizer_.inverse_transform(check_flow_array(X, ndim=range(1, 5)))


class HistoryAverage(BaseEstimator):
    """Phase-matched mean of the history for each horizon step."""

    def __init__(self, horizon_len: int = 12, period: int = 24):
        self.horizon_len = horizon_len
        self.period = period

    def fit(self, X=None, y=None):
        check_positive_int(self.horizon_len, "horizon_len")
        check_positive_int(self.period, "period")
        self.fitted_ = True
        return self

    def predict(self, X):
        """``X``: (B, H, ...) history windows -> (B, horizon_len, ...)."""
        check_is_fitted(self, "fitted_")
        X = check_flow_array(X, ndim=range(2, 6))
        out = history_average(np.moveaxis(X, 1, 0), self.horizon_len, self.period)
        return np.moveaxis(out, 0, 1)


class KWayPartitioner(ClusterMixin, BaseEstimator):
    """Balanced minimum-edge-cut partition of a graph's nodes.

    ``fit`` accepts a :class:`GraphTopology` or a symmetric 0/1 adjacency matrix.
    """

    def __init__(self, n_parts: int = 16, random_state: int = 0):
        self.n_parts = n_parts
        self.random_state = random_state

    def fit(self, X, y=None):
        topo = X if isinstance(X, GraphTopology) else _topology_from_adjacency(X)
        part = partition_kway(topo, check_positive_int(self.n_parts, "n_parts"), seed=int(self.random_state))
        self.labels_ = part.assignment
        self.cut_ = part.cut
        self.sizes_ = np.asarray(part.sizes)
        self.partition_ = part
        return self


def _topology_from_adjacency(A) -> GraphTopology:
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {A.shape}")
    if not np.array_equal(A, A.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(np.diag(A)):
        raise ValueError("adjacency must not contain self-loops")
    i, j = np.nonzero(np.triu(A, k=1))
    return GraphTopology.from_edges(A.shape[0], list(zip(i.tolist(), j.tolist())))


class UniFlowForecaster(BaseEstimator):
    """One forecasting model shared by every grid and graph dataset it is fitted on."""

    def __init__(self, history_len: int = 12, horizon_len: int = 12, p_t: int = 4, p_s: int = 2,
                 num_subgraphs: int = 16, d_model: int = 64, enc_layers: int = 4, dec_layers: int = 4,
                 heads: int = 8, ff_mult: int = 4, dropout: float = 0.1, n_mem: int = 512,
                 banks: tuple = BANKS, max_epochs: int = 200, lr_initial: float = 5e-4,
                 lr_late: float = 5e-5, lr_switch_epoch: int = 150, early_stop_patience: int = 15,
                 iters_per_epoch: int = 100, val_max_windows: int = 64, grad_clip: Optional[float] = 1.0,
                 random_state: int = 0):
        self.history_len = history_len
        self.horizon_len = horizon_len
        self.p_t = p_t
        self.p_s = p_s
        self.num_subgraphs = num_subgraphs
        self.d_model = d_model
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.heads = heads
        self.ff_mult = ff_mult
        self.dropout = dropout
        self.n_mem = n_mem
        self.banks = banks
        self.max_epochs = max_epochs
        self.lr_initial = lr_initial
        self.lr_late = lr_late
        self.lr_switch_epoch = lr_switch_epoch
        self.early_stop_patience = early_stop_patience
        self.iters_per_epoch = iters_per_epoch
        self.val_max_windows = val_max_windows
        self.grad_clip = grad_clip
        self.random_state = random_state

    # -- configs -------------------------------------------------------------

    def task(self) -> TaskSpec:
        return TaskSpec(self.history_len, self.horizon_len)

    def patch_config(self) -> PatchConfig:
        return PatchConfig(self.p_t, self.p_s, self.d_model, self.num_subgraphs)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.enc_layers, self.dec_layers, self.d_model, self.heads, self.ff_mult,
                           self.dropout, self.n_mem, tuple(self.banks))

    def train_config(self) -> TrainConfig:
        return TrainConfig(max_epochs=self.max_epochs, lr_initial=self.lr_initial, lr_late=self.lr_late,
                           lr_switch_epoch=self.lr_switch_epoch, early_stop_patience=self.early_stop_patience,
                           seed=int(self.random_state), grad_clip=self.grad_clip,
                           iters_per_epoch=self.iters_per_epoch, val_max_windows=self.val_max_windows)

    # -- fitting -------------------------------------------------------------

    def fit(self, datasets, y=None):
        datasets = check_datasets(datasets)
        patch_cfg = self.patch_config()
        patch_cfg.check_task(self.task())
        self.prepared_ = {d.name: prepare(d, patch_cfg, partition_seed=int(self.random_state)) for d in datasets}
        self.model_ = build_model(patch_cfg, self.model_config(), seed=int(self.random_state))
        self.result_ = train(self.model_, list(self.prepared_.values()), self.task(), self.train_config())
        self.trained_on_ = tuple(self.prepared_)
        return self

    def _prepared(self, dataset) -> PreparedDataset:
        check_is_fitted(self, "model_")
        if isinstance(dataset, PreparedDataset):
            return dataset
        if isinstance(dataset, str):
            if dataset not in self.prepared_:
                raise KeyError(f"unknown dataset {dataset!r}; pass the FlowDataset itself")
            return self.prepared_[dataset]
        if not isinstance(dataset, FlowDataset):
            raise TypeError(f"expected a dataset name or FlowDataset, got {type(dataset).__name__}")
        if dataset.name not in self.prepared_:
            self.prepared_[dataset.name] = prepare(dataset, self.model_.patch_cfg, partition_seed=int(self.random_state))
        return self.prepared_[dataset.name]

    def predict(self, X, dataset) -> np.ndarray:
        """Horizon forecasts for history windows ``X`` of shape (B, H, N) or (B, H, N, C), in data units."""
        prepared = self._prepared(dataset)
        X = check_flow_array(X)
        squeeze = X.ndim == 3
        if squeeze:
            X = X[..., None]
        task = self.task()
        B, H, N, C = X.shape
        if H != task.history_len or N != prepared.dataset.N or C != prepared.dataset.C:
            raise ValueError(f"expected windows (B, {task.history_len}, {prepared.dataset.N}, {prepared.dataset.C}), "
                             f"got {X.shape}")
        windows = np.zeros((B, task.window_len, N, C), dtype=np.float32)
        windows[:, :H] = prepared.normalizer.transform(X)
        out = predict_normalized(self.model_, prepared, windows, task)[:, H:]
        out = prepared.normalizer.inverse_transform(out)
        return out[..., 0] if squeeze else out

    def evaluate(self, dataset, noise: float = 0.0, seed: Optional[int] = None) -> EvalReport:
        """Test-split report for ``dataset``, optionally with history noise."""
        prepared = self._prepared(dataset)
        seed = int(self.random_state) if seed is None else seed
        if check_noise_level(noise):
            return noise_eval(self.model_, prepared, noise, self.task(), seed=seed)
        return protocol_predict(self.model_, prepared, self.task(), seed=seed)

    # -- persistence -----------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(self.model_, path, meta={"estimator_params": _jsonable(self.get_params()),
                                                        "trained_on": list(self.trained_on_)})

    @classmethod
    def load(cls, path) -> "UniFlowForecaster":
        model, meta = load_checkpoint(path)
        params = dict(meta.get("estimator_params", {}))
        if "banks" in params:
            params["banks"] = tuple(params["banks"])
        est = cls(**params)
        est.model_ = model
        est.prepared_ = {}
        est.trained_on_ = tuple(meta.get("trained_on", ()))
        return est


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}

