"""scikit-learn style wrappers around the cascade, the feature network and the caption parser."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import datagen, training
from .metrics import ToyFeatureNet, train_feature_net
from .scenegraph import parse_caption
from .validation import check_captions, check_images, check_labels


class SceneGraphParser(TransformerMixin, BaseEstimator):
    """Stateless caption -> scene graph transformer."""

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def transform(self, X):
        return [parse_caption(c) for c in check_captions(X)]


class CaptionDiffusion(BaseEstimator):
    """Caption-conditioned diffusion cascade.

    ``fit(captions, images)`` takes images at the resolution of the last trained
    stage; lower resolutions are box-downsampled from them. ``predict`` samples
    one image per caption at that resolution.
    """

    def __init__(self, stages=("base",), steps=2000, lr=1e-3, warmup_steps=100, batch_size=16,
                 use_scene_graph=True, use_swin_unet=True, gcn_pretrain_steps=300, sample_steps=None,
                 model_config=None, seed=0):
        self.stages = stages
        self.steps = steps
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.use_scene_graph = use_scene_graph
        self.use_swin_unet = use_swin_unet
        self.gcn_pretrain_steps = gcn_pretrain_steps
        self.sample_steps = sample_steps
        self.model_config = model_config
        self.seed = seed

    def _run_config(self) -> training.RunConfig:
        return training.RunConfig(seed=self.seed, stages=list(self.stages), steps=self.steps, lr=self.lr,
                                  warmup_steps=self.warmup_steps, batch_size=self.batch_size,
                                  use_scene_graph=self.use_scene_graph, use_swin_unet=self.use_swin_unet,
                                  gcn_pretrain_steps=self.gcn_pretrain_steps,
                                  model=dict(self.model_config or {}))

    def _resolution(self, cfg: training.RunConfig) -> int:
        res = cfg.cascade_config().resolutions
        return res[max(training.ROLES.index(s) for s in cfg.stages)]

    def _samples(self, X, y, cfg):
        caps = check_captions(X)
        imgs = check_images(y, self._resolution(cfg))
        if len(caps) != len(imgs):
            raise ValueError(f"{len(caps)} captions but {len(imgs)} images")
        resolutions = [r for r in cfg.cascade_config().resolutions if r <= imgs.shape[1]]
        return [datagen.Sample(datagen.ladder(img, resolutions), c, parse_caption(c), None, -1)
                for c, img in zip(caps, imgs)]

    def fit(self, X, y):
        cfg = self._run_config()
        samples = self._samples(X, y, cfg)
        tr = training.Trainer(cfg, data=(samples, []))
        tr.run()
        self.model_ = tr.model
        self.config_ = cfg
        self.loss_curve_ = [r["loss"] for r in tr.losses]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        caps = check_captions(X)
        graphs = [parse_caption(c) for c in caps] if self.use_scene_graph else None
        n_stages = max(training.ROLES.index(s) for s in self.config_.stages) + 1
        imgs = training.generate_images(self.model_, caps, graphs, np.random.default_rng([self.seed, 9]),
                                        self.use_scene_graph, n_stages=n_stages, steps=self.sample_steps)
        return imgs[-1]

    def score(self, X, y):
        """Negative mean denoising loss of the base stage (higher is better)."""
        check_is_fitted(self, "model_")
        samples = self._samples(X, y, self.config_)
        return -training.heldout_loss(self.model_, samples, "base", self.use_scene_graph, seed=self.seed)


class FeatureClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Toy feature network: ``transform`` gives penultimate features, ``predict`` the class."""

    def __init__(self, d_feat=16, hidden=128, steps=800, lr=3e-3, noise=0.1, seed=0):
        self.d_feat = d_feat
        self.hidden = hidden
        self.steps = steps
        self.lr = lr
        self.noise = noise
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X), datagen.NUM_CLASSES)
        self.net_ = ToyFeatureNet(self.d_feat, self.hidden, rng=np.random.default_rng([self.seed, 5]))
        self.loss_curve_ = train_feature_net(self.net_, X, y, self.steps, lr=self.lr, noise=self.noise,
                                             rng=np.random.default_rng([self.seed, 6]))
        self.classes_ = np.arange(datagen.NUM_CLASSES)
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        return self.net_.embed(check_images(X))

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return self.net_.probabilities(check_images(X))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
