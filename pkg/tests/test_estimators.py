import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sgdiff.datagen import generate
from sgdiff.estimators import CaptionDiffusion, FeatureClassifier, SceneGraphParser
from sgdiff.scenegraph import ParseError

TINY = dict(base_dim=8, heads=2, d_cond=8, d_text=8, text_heads=2, d_graph=8, text_layers=1, graph_layers=1)


def test_parser_transform():
    graphs = SceneGraphParser().fit().transform(["a red circle left of a blue square"])
    assert graphs[0].num_objects == 2
    with pytest.raises(ParseError):
        SceneGraphParser().transform(["a purple hexagon"])


def test_caption_diffusion_params_and_fit():
    est = CaptionDiffusion(steps=3, batch_size=4, warmup_steps=1, gcn_pretrain_steps=1, sample_steps=2,
                           model_config=TINY)
    assert clone(est).get_params()["steps"] == 3
    with pytest.raises(NotFittedError):
        est.predict(["a red circle"])
    samples = generate(0, 6)
    caps = [s.caption for s in samples]
    imgs = np.stack([s.images[8] for s in samples])
    est.fit(caps, imgs)
    assert len(est.loss_curve_) == 3
    out = est.predict(caps[:2])
    assert out.shape == (2, 8, 8, 3) and np.abs(out).max() <= 1
    assert np.isfinite(est.score(caps, imgs))
    with pytest.raises(ValueError):
        est.fit(caps[:2], imgs)


def test_feature_classifier():
    samples = generate(0, 200)
    X = np.stack([s.images[8] for s in samples])
    y = np.array([s.label for s in samples])
    clf = FeatureClassifier(steps=200).fit(X, y)
    assert clf.transform(X).shape == (200, 16)
    proba = clf.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
    assert clf.score(X, y) > 0.3
    with pytest.raises(ValueError):
        clf.fit(X, y[:-1])
