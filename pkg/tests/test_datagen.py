import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semfl.datagen import (
    ClientDataset,
    DataGenError,
    NoiseConfig,
    SemSample,
    SplitPlan,
    build_experiment_splits,
    class_mean_tolerance,
    clamp_bias_bound,
    export_dataset,
    generate_corpus,
    generate_layout,
    import_dataset,
    render_sem,
    resize_sample,
)


def test_layout_density_256():
    mask = generate_layout(256, 256, 0.4, seed=1)
    frac = mask.mean()
    assert 0.36 <= frac <= 0.44


def test_layout_minimum_size_has_both_classes():
    mask = generate_layout(8, 8, 0.5, seed=0)
    assert mask.shape == (8, 8)
    assert set(np.unique(mask)) == {0, 1}


def test_layout_deterministic():
    assert np.array_equal(generate_layout(64, 48, 0.3, 5), generate_layout(64, 48, 0.3, 5))
    assert not np.array_equal(generate_layout(64, 48, 0.3, 5), generate_layout(64, 48, 0.3, 6))


@pytest.mark.parametrize("h,w,d", [(7, 64, 0.5), (64, 4, 0.5), (64, 64, 0.0), (64, 64, 1.0), (64, 64, 1.2)])
def test_layout_rejects_bad_args(h, w, d):
    with pytest.raises(DataGenError):
        generate_layout(h, w, d, 0)


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(8, 96),
    w=st.integers(8, 96),
    density=st.floats(0.05, 0.9),
    seed=st.integers(0, 2**31 - 1),
)
def test_layout_density_band_property(h, w, density, seed):
    mask = generate_layout(h, w, density, seed)
    count = int(mask.sum())
    total = h * w
    assert 0 < count < total
    lo, hi = np.ceil(0.9 * density * total), np.floor(1.1 * density * total)
    if lo <= hi:
        assert lo <= count <= hi


def test_render_class_means_paper_config():
    mask = np.zeros((256, 256), dtype=np.uint8)
    mask[:, :128] = 1
    cfg = NoiseConfig(75, 135, 20, shot_noise=20, dwell_time=10, seed=3)
    s = render_sem(mask, cfg)
    bg, fg = s.image[mask == 0].mean() * 255, s.image[mask == 1].mean() * 255
    assert abs(bg - 75) <= 2 and abs(fg - 135) <= 2
    # the statistical bound (3 standard errors + clamp bias) is tighter still
    n = int((mask == 0).sum())
    assert abs(bg - 75) <= class_mean_tolerance(cfg, 75, n)
    assert abs(fg - 135) <= class_mean_tolerance(cfg, 135, n)


def test_render_noiseless_limit():
    mask = generate_layout(32, 32, 0.5, 2)
    s = render_sem(mask, NoiseConfig(75, 135, 0.001, shot_noise=0, dwell_time=10, seed=0))
    expected = np.where(mask == 1, 135, 75) / 255
    assert np.max(np.abs(s.image - expected)) < 1e-4


def test_render_deterministic_and_normalized():
    mask = generate_layout(64, 64, 0.4, 9)
    cfg = NoiseConfig(seed=11)
    a, b = render_sem(mask, cfg), render_sem(mask, cfg)
    assert np.array_equal(a.image, b.image)
    assert a.image.min() >= 0 and a.image.max() <= 1


def test_shot_noise_variance_scales_with_signal_and_dwell():
    mask = np.zeros((200, 200), dtype=np.uint8)
    short = render_sem(mask, NoiseConfig(100, 200, 1.0, shot_noise=20, dwell_time=2, seed=0)).image * 255
    long = render_sem(mask, NoiseConfig(100, 200, 1.0, shot_noise=20, dwell_time=20, seed=0)).image * 255
    # variance = std^2 + level * shot / dwell
    assert short.var() == pytest.approx(1 + 100 * 20 / 2, rel=0.05)
    assert long.var() == pytest.approx(1 + 100 * 20 / 20, rel=0.05)


def test_clamp_bias_bound_covers_simulated_bias():
    rng = np.random.default_rng(0)
    level, sigma = 10.0, 20.0
    x = np.clip(rng.normal(level, sigma, 2_000_000), 0, 255)
    assert abs(x.mean() - level) <= clamp_bias_bound(level, sigma)
    # negligible next to the +-2 gray-level tolerance at the default levels
    assert clamp_bias_bound(75, NoiseConfig().class_sigma(75)) < 0.1


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(background_mean=135, foreground_mean=75),
        dict(std_dev=0),
        dict(shot_noise=-1),
        dict(dwell_time=0),
        dict(foreground_mean=300),
    ],
)
def test_noise_config_invariants(kwargs):
    with pytest.raises(DataGenError):
        NoiseConfig(**kwargs)


def test_sample_invariants():
    with pytest.raises(DataGenError):
        SemSample(np.zeros((4, 4)), np.zeros((4, 5), dtype=np.uint8), "x")
    with pytest.raises(DataGenError):
        SemSample(np.full((4, 4), 1.5), np.zeros((4, 4), dtype=np.uint8), "x")
    with pytest.raises(DataGenError):
        SemSample(np.zeros((4, 4)), np.full((4, 4), 2, dtype=np.uint8), "x")


def test_paper_splits():
    samples = generate_corpus(100, (16, 16), seed=0)
    splits = build_experiment_splits(samples, SplitPlan.paper())
    by = {d.subset_name: d for d in splits}
    assert [d.subset_name for d in splits] == list("ABCDEFGHIJK")
    assert all(len(by[n]) == 10 for n in "ABCDEFGHIJ")
    assert len(by["K"]) == 90
    assert by["K"].ids == [i for n in "ABCDEFGHI" for i in by[n].ids]
    fresh = [set(by[n].ids) for n in "ABCDEFGHIJ"]
    assert set().union(*fresh) == {s.id for s in samples}
    for i in range(len(fresh)):
        for j in range(i + 1, len(fresh)):
            assert not fresh[i] & fresh[j]
    assert by["J"].owner == "client10"


def test_single_subset_and_errors():
    samples = generate_corpus(10, (8, 8), seed=0)
    (only,) = build_experiment_splits(samples, SplitPlan.simple({"A": 10}))
    assert only.ids == [s.id for s in samples]
    with pytest.raises(DataGenError, match="insufficient samples"):
        build_experiment_splits(samples, SplitPlan.simple({"A": 110}))
    dup = SplitPlan.from_dict([{"name": "A", "count": 1}, {"name": "A", "count": 1}])
    with pytest.raises(DataGenError, match="duplicate"):
        build_experiment_splits(samples, dup)


def test_resize_512_to_256_keeps_binary_mask():
    mask = generate_layout(512, 512, 0.4, 3)
    s = render_sem(mask, NoiseConfig(seed=1), "big")
    r = resize_sample(s, 256, 256)
    assert r.image.shape == r.mask.shape == (256, 256)
    assert set(np.unique(r.mask)) <= {0, 1}
    assert 0 <= r.image.min() and r.image.max() <= 1


def test_resize_identity_is_bit_exact():
    s = generate_corpus(1, (32, 32), seed=4)[0]
    r = resize_sample(s, 32, 32)
    assert np.array_equal(r.image, s.image) and np.array_equal(r.mask, s.mask)


def test_resize_desk_scale_keeps_both_classes():
    for s in generate_corpus(100, (256, 256), seed=0):
        r = resize_sample(s, 64, 64)
        assert set(np.unique(r.mask)) == {0, 1}


def test_resize_too_small():
    s = generate_corpus(1, (16, 16), seed=0)[0]
    with pytest.raises(DataGenError):
        resize_sample(s, 4, 16)


def test_corpus_deterministic():
    a, b = generate_corpus(3, (16, 16), seed=5), generate_corpus(3, (16, 16), seed=5)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)


def test_export_import_roundtrip(tmp_path):
    samples = generate_corpus(20, (32, 32), seed=1)
    plan = SplitPlan.paper(per_client=2)
    splits = build_experiment_splits(samples, plan)
    export_dataset(splits, tmp_path, noise=NoiseConfig(), plan=plan)
    back, manifest = import_dataset(tmp_path)
    assert manifest["noise"]["shot_noise"] == 20
    assert [d.subset_name for d in back] == [d.subset_name for d in splits]
    for orig, got in zip(splits, back):
        assert orig.ids == got.ids
        for s, t in zip(orig.samples, got.samples):
            assert np.max(np.abs(s.image - t.image)) <= 1 / 255
            assert np.array_equal(s.mask, t.mask)
    assert not (tmp_path / "K").exists()
