import numpy as np
import pytest

from hvq.metrics import evaluate
from hvq.synthetic import SeparationError, SyntheticSpec, nearest_mean_labels, subaction_means, synth_generate


def test_zero_noise_frames_are_subaction_means():
    spec = SyntheticSpec(noise=0.0, n_videos=3, seed=5)
    ds = synth_generate(spec)
    means, _ = subaction_means(spec, np.random.default_rng(5))
    for video, subs in zip(ds.videos, ds.sub_labels):
        np.testing.assert_allclose(video.frames, means[subs], atol=1e-15)


def test_same_seed_same_dataset():
    a, b = synth_generate(SyntheticSpec(seed=11)), synth_generate(SyntheticSpec(seed=11))
    for va, vb in zip(a.videos, b.videos):
        assert va.id == vb.id and va.frames.tobytes() == vb.frames.tobytes()
    for la, lb in zip(a.labels + a.sub_labels, b.labels + b.sub_labels):
        np.testing.assert_array_equal(la, lb)
    c = synth_generate(SyntheticSpec(seed=12))
    assert a.videos[0].frames.shape != c.videos[0].frames.shape or \
        not np.array_equal(a.videos[0].frames, c.videos[0].frames)


def test_default_spec_is_nearly_separable():
    ds = synth_generate(SyntheticSpec())
    assert (ds.K, ds.feature_dim, len(ds.videos)) == (4, 16, 20)
    report = evaluate({"s": nearest_mean_labels(ds)}, {"s": ds.labels})
    assert report.mof >= 0.99


def test_subaction_means_respect_separation():
    spec = SyntheticSpec(K=5, feature_dim=24, seed=3)
    means, owner = subaction_means(spec, np.random.default_rng(3))
    cos = means @ means.T
    np.fill_diagonal(cos, -1)
    assert cos.max() <= np.cos(np.deg2rad(60)) + 1e-9
    np.testing.assert_allclose(np.linalg.norm(means, axis=1), 1.0)
    counts = np.bincount(owner)
    assert len(counts) == 5 and counts.min() >= 2 and counts.max() <= 3


def test_action_order_is_fixed_and_subactions_nest():
    ds = synth_generate(SyntheticSpec(n_videos=5, seed=2))
    for act, sub in zip(ds.labels, ds.sub_labels):
        runs = [int(a) for i, a in enumerate(act) if i == 0 or act[i - 1] != a]
        assert runs == list(range(ds.K))
        # Every subaction belongs to exactly one action.
        for s in np.unique(sub):
            assert len(np.unique(act[sub == s])) == 1
        assert np.all(np.diff(sub) >= 0)


def test_frames_are_unit_norm():
    ds = synth_generate(SyntheticSpec(n_videos=2, noise=0.3))
    for v in ds.videos:
        np.testing.assert_allclose(np.linalg.norm(v.frames, axis=1), 1.0)


@pytest.mark.parametrize("kwargs", [dict(K=8, feature_dim=8), dict(K=6, feature_dim=7, separation_deg=89.0)])
def test_infeasible_separation_raises(kwargs):
    with pytest.raises(SeparationError, match="feature_dim"):
        synth_generate(SyntheticSpec(**kwargs))


@pytest.mark.parametrize("kwargs", [dict(noise=-0.1), dict(separation_deg=0), dict(separation_deg=91),
                                    dict(short_lengths=(0, 3)), dict(min_subactions=4),
                                    dict(max_subactions=1, min_subactions=2), dict(K=0)])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SyntheticSpec(**kwargs)
