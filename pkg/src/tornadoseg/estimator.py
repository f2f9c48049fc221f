"""scikit-learn style wrappers around the functional pipeline.

Inputs are lists of frames. A frame is a :class:`PointCloud` or an ``N x 4``
array ``(x, y, z, remission)``; labels are integer arrays of training ids.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import model as M
from .augment import AugmentConfig
from .evaluation import ConfusionMatrix, miou
from .exceptions import ContractError
from .losses import LossWeights
from .pointcloud import IGNORE_ID, LabelArray, PointCloud
from .postprocess import KnnConfig, knn_refine
from .projection import SphericalConfig, spherical_project
from .tensor import no_grad
from .trainer import TrainConfig, predict_points, train


def check_cloud(frame) -> PointCloud:
    """Coerce ``frame`` to a finite, non-empty :class:`PointCloud`."""
    if isinstance(frame, PointCloud):
        cloud = frame
    else:
        arr = np.asarray(frame)
        if arr.dtype == object or not np.issubdtype(arr.dtype, np.number):
            raise ContractError("a frame must be numeric")
        cloud = PointCloud.from_array(arr)
    if cloud.count == 0:
        raise ContractError("empty point cloud")
    if not np.all(np.isfinite(cloud.remission)):
        raise ContractError("remission must be finite")
    return cloud


def check_frames(X) -> list[PointCloud]:
    if isinstance(X, (PointCloud, np.ndarray)):
        X = [X]
    frames = [check_cloud(f) for f in X]
    if not frames:
        raise ContractError("no frames given")
    return frames


def check_labels(y, frames, num_classes: int, ignore_id: int = IGNORE_ID) -> list[np.ndarray]:
    if len(y) != len(frames):
        raise ContractError(f"{len(y)} label arrays for {len(frames)} frames")
    out = []
    for lab, cloud in zip(y, frames):
        lab = np.asarray(getattr(lab, "semantic", lab), dtype=np.int64).reshape(-1)
        if lab.size != cloud.count:
            raise ContractError(f"{lab.size} labels for {cloud.count} points")
        bad = (lab != ignore_id) & ((lab < 0) | (lab >= num_classes))
        if bad.any():
            raise ContractError("label id outside [0, num_classes)")
        out.append(lab)
    return out


class SphericalProjector(TransformerMixin, BaseEstimator):
    """Project each frame to a ``C x H x W`` range image.

    Parameters
    ----------
    width, height : int
    fov_up, fov_down : float
        Vertical field of view above and below the horizon, degrees.
    """

    def __init__(self, width=2048, height=64, fov_up=3.0, fov_down=25.0):
        self.width = width
        self.height = height
        self.fov_up = fov_up
        self.fov_down = fov_down

    def fit(self, X=None, y=None):
        self.config_ = SphericalConfig.from_degrees(self.width, self.height, self.fov_up, self.fov_down)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        images = [spherical_project(c, self.config_)[0].channels for c in check_frames(X)]
        return np.stack(images)


class TornadoSegmenter(ClassifierMixin, BaseEstimator):
    """Per-point semantic segmentation network.

    Parameters
    ----------
    model : ModelConfig, optional
        Network configuration; the published full-size network when omitted.
    epochs, batch_size, max_lr, weight_decay : optimization settings
    loss_weights : LossWeights, optional
    augment : AugmentConfig, optional
        ``None`` disables augmentation.
    seed : int
    """

    def __init__(self, model=None, epochs=50, batch_size=4, max_lr=0.004, weight_decay=1e-4,
                 loss_weights=None, augment=None, seed=0, max_steps=None):
        self.model = model
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.weight_decay = weight_decay
        self.loss_weights = loss_weights
        self.augment = augment
        self.seed = seed
        self.max_steps = max_steps

    def _model_config(self) -> M.ModelConfig:
        return self.model if self.model is not None else M.ModelConfig()

    def fit(self, X, y):
        frames = check_frames(X)
        cfg = self._model_config()
        labels = check_labels(y, frames, cfg.num_classes)
        tcfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, max_lr=self.max_lr,
            weight_decay=self.weight_decay, seed=self.seed, max_steps=self.max_steps,
            loss_weights=self.loss_weights if self.loss_weights is not None else LossWeights(),
            augment=self.augment if isinstance(self.augment, AugmentConfig) else None,
            model=cfg, validate_every=max(self.epochs, 1),
        )
        result = train([(c, LabelArray(l)) for c, l in zip(frames, labels)], tcfg)
        self.params_ = result.params
        self.config_ = cfg
        self.classes_ = np.arange(cfg.num_classes)
        self.log_ = result.log
        self.n_steps_ = result.steps
        return self

    def predict_logits(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "params_")
        frames = [M.prepare_frame(c, self.config_) for c in check_frames(X)]
        with no_grad():
            out = M.forward_frames(frames, self.params_, self.config_, training=False)
        return [t.data.copy() for t in out.point_logits]

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "params_")
        frames = [M.prepare_frame(c, self.config_) for c in check_frames(X)]
        return predict_points(self.params_, self.config_, frames, self.batch_size)

    def score(self, X, y, sample_weight=None) -> float:
        """Mean intersection-over-union over the frames in ``X``."""
        frames = check_frames(X)
        labels = check_labels(y, frames, self.config_.num_classes)
        cm = ConfusionMatrix(self.config_.num_classes)
        for pred, lab in zip(self.predict(frames), labels):
            cm.accumulate(pred, lab)
        return miou(cm)


class KNNRefiner(BaseEstimator):
    """Range-gated neighbour vote over a predicted range-image label map.

    Parameters
    ----------
    kernel_size, k, sigma, cutoff, distance : see :class:`KnnConfig`
    width, height, fov_up, fov_down : range-image geometry (degrees)
    """

    def __init__(self, kernel_size=5, k=5, sigma=1.0, cutoff=1.0, distance="chebyshev",
                 width=2048, height=64, fov_up=3.0, fov_down=25.0):
        self.kernel_size = kernel_size
        self.k = k
        self.sigma = sigma
        self.cutoff = cutoff
        self.distance = distance
        self.width = width
        self.height = height
        self.fov_up = fov_up
        self.fov_down = fov_down

    def fit(self, X=None, y=None):
        self.config_ = KnnConfig(self.kernel_size, self.k, self.sigma, self.cutoff, self.distance)
        self.projection_ = SphericalConfig.from_degrees(self.width, self.height, self.fov_up,
                                                        self.fov_down)
        return self

    def refine(self, cloud, point_labels) -> np.ndarray:
        """Smooth per-point labels of one frame through its range image."""
        check_is_fitted(self, "config_")
        cloud = check_cloud(cloud)
        point_labels = np.asarray(point_labels, dtype=np.int64)
        if point_labels.shape != (cloud.count,):
            raise ContractError("one label per point is required")
        image, pmap = spherical_project(cloud, self.projection_)
        winner = image.winner_index
        label_image = np.zeros(winner.shape, dtype=np.int64)
        label_image[image.valid_mask] = point_labels[winner[image.valid_mask]]
        out = point_labels.copy()
        ok = pmap.in_bounds
        out[ok] = knn_refine(label_image, image.pixel_range(), image.valid_mask, pmap.u[ok],
                             pmap.v[ok], image.range[ok], self.config_,
                             num_classes=int(point_labels.max()) + 1)
        return out
