import math

import numpy as np
import pytest
from scipy.special import rel_entr

from gazeforge.fixations import (REPORT_HEADER, DensityFitConfig, FixationFormatError, FixationRecord, Stimulus,
                                 analysis_report, entropy, estimate_center_bias, fit_all, fit_density, kde,
                                 object_probability, read_fixations, read_stimuli, relative_change, subset,
                                 write_fixations)
from gazeforge.tensor import ShapeError, UsageError


def blob_density(n=64, centre=(40.0, 24.0), sigma=6.0):
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    d = np.exp(-((xx - centre[0]) ** 2 + (yy - centre[1]) ** 2) / (2 * sigma ** 2))
    return d / d.sum()


def sample_records(density, rng, image="img", subjects=10, per_subject=20):
    h, w = density.shape
    flat = rng.choice(h * w, size=subjects * per_subject, p=density.ravel())
    rows, cols = np.divmod(flat, w)
    xs = cols + rng.uniform(0, 1, flat.size)
    ys = rows + rng.uniform(0, 1, flat.size)
    out = []
    for k in range(flat.size):
        s, i = divmod(k, per_subject)
        out.append(FixationRecord(f"s{s:02d}", image, 1 + i // 10, 1 + i % 10, float(xs[k]), float(ys[k])))
    return out


def test_kde_normalized_and_reflected():
    pts = np.array([[0.2, 0.3], [15.9, 7.5], [8.0, 4.0]])
    d = kde(pts, (8, 16), 3.0)
    assert d.shape == (8, 16)
    assert d.sum() == pytest.approx(1.0, abs=1e-12)
    assert (d >= 0).all()


def test_kde_matches_folded_monte_carlo():
    rng = np.random.default_rng(0)
    n, sigma, x0 = 10, 2.5, 1.3
    draws = x0 + sigma * rng.standard_normal(2_000_000)
    folded = np.mod(draws, 2 * n)
    folded = np.where(folded < n, folded, 2 * n - folded)
    hist = np.histogram(folded, bins=n, range=(0, n))[0] / draws.size
    d = kde(np.array([[x0, 5.0]]), (10, n), sigma).sum(axis=0)
    np.testing.assert_allclose(d, hist, atol=2e-3)


def test_kde_interior_matches_product_of_normal_cdfs():
    from scipy.stats import norm

    d = kde(np.array([[20.5, 18.25]]), (40, 41), 1.5)
    ex = np.diff(norm.cdf(np.arange(42), loc=20.5, scale=1.5))
    ey = np.diff(norm.cdf(np.arange(41), loc=18.25, scale=1.5))
    np.testing.assert_allclose(d, np.outer(ey, ex) / np.outer(ey, ex).sum(), atol=1e-15)


def test_kde_errors():
    with pytest.raises(ValueError):
        kde(np.zeros((1, 2)), (4, 4), 0.0)
    with pytest.raises(UsageError):
        kde(np.zeros((0, 2)), (4, 4), 1.0)


def test_fit_recovers_blob():
    truth = blob_density()
    records = sample_records(truth, np.random.default_rng(7))
    fit = fit_density(records, (64, 64))
    assert fit.density.sum() == pytest.approx(1.0, abs=1e-6)
    assert rel_entr(truth, fit.density).sum() < 0.15


def test_fit_is_exhaustive_and_tie_breaks():
    rng = np.random.default_rng(3)
    records = sample_records(np.full((16, 16), 1 / 256), rng, subjects=4, per_subject=10)
    cfg = DensityFitConfig(bandwidths=(1.0, 4.0), alphas=(0.0, 0.25, 0.5, 1.0), betas=(0.0,))
    fit = fit_density(records, (16, 16), cfg)
    assert len(fit.scores) == 2 * 4
    best = max(s[3] for s in fit.scores)
    tied = [s for s in fit.scores if abs(s[3] - best) <= 1e-12 * abs(best)]
    expected = max(tied, key=lambda s: (s[1], s[2], s[0]))
    assert (fit.sigma, fit.alpha, fit.beta) == expected[:3]
    assert fit.alpha > 0


def test_uniform_data_selects_largest_tied_alpha():
    # narrow kernels lose to the uniform component on uniform data; with alpha = 1 every
    # bandwidth scores the same, so the larger sigma wins the tie
    records = sample_records(np.full((8, 8), 1 / 64), np.random.default_rng(1), subjects=8, per_subject=40)
    cfg = DensityFitConfig(bandwidths=(0.3, 0.5), alphas=(0.0, 0.5, 1.0), betas=(0.0,))
    fit = fit_density(records, (8, 8), cfg)
    assert fit.alpha == 1.0 and fit.sigma == 0.5
    np.testing.assert_allclose(fit.density, 1 / 64)


def test_fit_needs_two_subjects():
    records = [FixationRecord("a", "img", 1, 1, 1.0, 1.0)]
    with pytest.raises(UsageError):
        fit_density(records, (4, 4))


def test_fit_centre_bias_shape():
    records = [FixationRecord(s, "img", 1, 1, 1.0, 1.0) for s in "ab"]
    with pytest.raises(ShapeError):
        fit_density(records, (4, 4), center_bias=np.ones((3, 3)) / 9)


def test_grid_divisor():
    records = sample_records(blob_density(16, (8, 8), 3), np.random.default_rng(2), subjects=3, per_subject=5)
    fit = fit_density(records, (16, 16), DensityFitConfig(grid_divisor=2))
    assert fit.density.shape == (8, 8)
    with pytest.raises(ShapeError):
        DensityFitConfig(grid_divisor=3).grid_extents((16, 16))


def test_config_validation():
    with pytest.raises(ValueError):
        DensityFitConfig(bandwidths=(0.0,))
    with pytest.raises(ValueError):
        DensityFitConfig(alphas=(-0.1,))
    with pytest.raises(ValueError):
        DensityFitConfig(alphas=(0.8,), betas=(0.5,))


def test_center_bias_leave_one_out(rng):
    uniform = {k: np.full((4, 4), 1 / 16) for k in ("a", "b")}
    np.testing.assert_allclose(estimate_center_bias(uniform, "a"), 1 / 16)
    dens = {k: rng.dirichlet(np.ones(16)).reshape(4, 4) for k in "abc"}
    cb = estimate_center_bias(dens, "a")
    assert cb.sum() == pytest.approx(1.0, abs=1e-9)
    dens["a"] = rng.dirichlet(np.ones(16)).reshape(4, 4)
    assert np.array_equal(estimate_center_bias(dens, "a"), cb)
    with pytest.raises(UsageError):
        estimate_center_bias({"a": uniform["a"]}, "a")


def test_object_probability(rng):
    p = np.full((4, 4), 1 / 16)
    assert object_probability(p, np.ones((4, 4))) == pytest.approx(1.0)
    half = np.zeros((4, 4))
    half[:2] = 1
    assert object_probability(p, half) == pytest.approx(0.5)
    q = rng.dirichlet(np.ones(20)).reshape(4, 5)
    soft = rng.uniform(0, 1, (4, 5))
    brute = 0.0
    for i in range(4):
        for j in range(5):
            brute += q[i, j] * soft[i, j]
    assert object_probability(q, soft) == pytest.approx(brute, abs=1e-12)
    with pytest.raises(ShapeError):
        object_probability(p, np.ones((3, 3)))


def test_entropy():
    assert entropy(np.full((4, 8), 1 / 32), "bits") == math.log2(32)
    onehot = np.zeros(9)
    onehot[4] = 1
    assert entropy(onehot) == 0.0
    assert entropy(np.array([0.5, 0.25, 0.25]), "bits") == pytest.approx(1.5, abs=1e-15)
    with pytest.raises(ValueError):
        entropy(np.ones(2) / 2, "decibans")


def test_relative_change():
    c = relative_change(0.2, 0.37)
    assert c.absolute == pytest.approx(0.17) and c.relative == pytest.approx(0.85)
    c = relative_change(0.21, 0.09)
    assert c.absolute == pytest.approx(-0.12) and c.relative == pytest.approx(-0.5714285714)
    c = relative_change(0.0, 0.3)
    assert c.absolute == 0.3 and not c.defined and math.isnan(c.relative)


def make_trials():
    recs = []
    for subj in ("a", "b"):
        for block in (1, 2):
            for idx in range(1, 6):
                recs.append(FixationRecord(subj, "img", block, idx, float(idx), 2.0))
    return recs


def test_subsets():
    recs = make_trials()
    assert subset(recs, "all") == recs
    first = subset(recs, "first-fixation")
    assert len(first) == 4 and all(r.fix_index == 1 for r in first)
    assert subset(first, "first-fixation") == first
    block = subset(recs, "first-block")
    assert len(block) == 10 and all(r.block == 1 for r in block)
    assert subset(block, "first-block") == block
    with pytest.raises(UsageError):
        subset(recs, "last")


def test_fixation_csv_roundtrip(tmp_path):
    recs = make_trials()
    recs[0] = FixationRecord("a", "img", 1, 1, 0.1, 0.2, 250.0)
    write_fixations(tmp_path / "f.csv", recs)
    assert read_fixations(tmp_path / "f.csv", {"img": (8, 8)}) == recs


@pytest.mark.parametrize("body,line", [
    ("a,img,1,1,2.0\n", 2),
    ("a,img,1,1,2.0,3.0\nb,img,x,1,1,1\n", 3),
    ("a,img,1,1,2.0,3.0\n\nb,img,1,1,9.0,1.0\n", 4),
    ("a,img,1,0,2.0,3.0\n", 2),
    ("a,other,1,1,2.0,3.0\n", 2),
])
def test_malformed_rows_name_the_line(tmp_path, body, line):
    path = tmp_path / "f.csv"
    path.write_text("subject,image,block,fix_index,x,y\n" + body)
    with pytest.raises(FixationFormatError) as info:
        read_fixations(path, {"img": (8, 8)})
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_bad_header(tmp_path):
    path = tmp_path / "f.csv"
    path.write_text("who,what\n")
    with pytest.raises(FixationFormatError):
        read_fixations(path)


@pytest.fixture(scope="module")
def report_inputs():
    rng = np.random.default_rng(5)
    stimuli = [Stimulus("orig", "orig", 16, 16, "obj"), Stimulus("edit", "orig", 16, 16),
               Stimulus("other", "other", 16, 16)]
    mask = np.zeros((16, 16))
    mask[4:10, 4:10] = 1
    records = []
    for s, centre in zip(stimuli, [(8, 8), (6, 6), (12, 3)]):
        records += sample_records(blob_density(16, centre, 3.0), rng, s.id, subjects=4, per_subject=10)
    cfg = DensityFitConfig(bandwidths=(1.0, 2.0), alphas=(0.0, 0.1), betas=(0.0, 0.2))
    return stimuli, records, {"obj": mask}, cfg


def test_report_rows_and_aggregate(report_inputs):
    stimuli, records, masks, cfg = report_inputs
    models = {s.id: np.full((16, 16), 1 / 256) for s in stimuli}
    rows, agg = analysis_report(stimuli, records, masks, cfg, model_densities=models)
    assert len(rows) == len(stimuli)
    assert all(len(r) == len(REPORT_HEADER) for r in rows)
    orig = rows[0]
    assert orig[8] == 0.0 and orig[9] == 0.0 and orig[10] == 0.0
    assert orig[13] == 0.0
    assert rows[1][8] == pytest.approx(rows[1][6] - orig[6])
    other = rows[2]
    assert math.isnan(other[6])
    for k in range(3, len(REPORT_HEADER)):
        col = [r[k] for r in rows if not math.isnan(r[k])]
        if col:
            assert agg[k] == pytest.approx(sum(col) / len(col), rel=1e-12)
    assert agg[2] == pytest.approx(40.0)


def test_fit_all_uses_leave_one_out_bias(report_inputs):
    stimuli, records, _, cfg = report_inputs
    fits = fit_all(stimuli, records, cfg)
    for fit in fits.values():
        assert fit.density.sum() == pytest.approx(1.0, abs=1e-6)
        assert any(s[2] > 0 for s in fit.scores)


def test_report_errors(report_inputs):
    stimuli, records, masks, cfg = report_inputs
    with pytest.raises(UsageError):
        analysis_report(stimuli, records, {}, cfg)
    with pytest.raises(UsageError):
        analysis_report([Stimulus("edit", "gone", 16, 16)], records, masks, cfg)
    with pytest.raises(UsageError):
        fit_all([Stimulus("absent", "absent", 16, 16)], records, cfg)


def test_read_stimuli(tmp_path):
    path = tmp_path / "s.json"
    path.write_text('{"format": "gazeforge-stimuli/1", "stimuli": [{"id": "a", "height": 8, "width": 8}]}')
    (s,) = read_stimuli(path)
    assert s.original == "a" and s.target_mask is None
    path.write_text('{"format": "gazeforge-stimuli/1", "stimuli": [{"id": "a"}]}')
    with pytest.raises(UsageError):
        read_stimuli(path)
