import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from sudelab.conditioning import CATEGORY_NAMES
from sudelab.glyphs import (BACKGROUND, RES, GlyphDataset, GlyphSpec, PrivateParams, _coverage, _grid, all_cells,
                            gen_pretrain_set, make_subject, render)


def test_render_deterministic():
    s = GlyphSpec("ring", "rot45", "thin", "small", "light", PrivateParams((0.1, -0.3), 0.05))
    a, b = render(s), render(s)
    assert a.shape == (RES, RES) and a.tobytes() == b.tobytes()
    assert a.min() >= -1 and a.max() <= 1


@pytest.mark.parametrize("cat", CATEGORY_NAMES)
@pytest.mark.parametrize("thickness", ["thin", "thick"])
def test_rotation_matches_resampled_reference(cat, thickness):
    base = GlyphSpec(cat, "rot0", thickness)
    rotated = render(GlyphSpec(cat, "rot45", thickness))
    if cat != "disc":
        assert not np.array_equal(render(base), rotated)
    ss = 8
    x, y = _grid(RES, ss)
    fine = ndimage.rotate(_coverage(base, x, y), 45, reshape=False, order=1, mode="constant", cval=0.0)
    cov = fine.reshape(RES, ss, RES, ss).mean(axis=(1, 3))
    bg = BACKGROUND["dark"]
    assert np.abs(bg + cov * (1 - bg) - rotated).mean() < 0.1


def test_background_gap_on_border():
    dark = render(GlyphSpec("bar", size="small", background="dark"))
    light = render(GlyphSpec("bar", size="small", background="light"))
    border = np.ones((RES, RES), bool)
    border[1:-1, 1:-1] = False
    gap = BACKGROUND["light"] - BACKGROUND["dark"]
    np.testing.assert_allclose((light - dark)[border], gap, atol=1e-12)


def test_cell_count_and_dataset_size():
    assert len(all_cells()) == 64
    ds = gen_pretrain_set(seed=0, per_condition=8)
    assert len(ds) == 512
    assert len({s for s in ds.specs}) == 64


def test_dataset_deterministic_under_seed():
    a, b = gen_pretrain_set(3, 2), gen_pretrain_set(3, 2)
    assert a.specs == b.specs and a.images.tobytes() == b.images.tobytes()
    assert gen_pretrain_set(4, 2).specs != a.specs


def test_dataset_round_trip(tmp_path):
    ds = gen_pretrain_set(1, 1)
    ds.save(tmp_path, config_hash="abc")
    back = GlyphDataset.load(tmp_path)
    assert back.specs == ds.specs
    np.testing.assert_allclose(back.images, ds.images, atol=1e-6)
    assert (tmp_path / "images.f32").stat().st_size == len(ds) * RES * RES * 4


def test_make_subject():
    img_a, spec_a = make_subject("cross", 0)
    img_b, spec_b = make_subject("cross", 1)
    assert spec_a.private != spec_b.private
    assert spec_a.category == spec_b.category == "cross"
    assert not spec_a.private.is_default
    np.testing.assert_array_equal(make_subject("cross", 0)[0], img_a)


def test_spec_validation():
    with pytest.raises(ValueError):
        GlyphSpec("star")
    with pytest.raises(ValueError):
        GlyphSpec("disc", rotation="rot90")
    with pytest.raises(ValueError):
        GlyphSpec("disc", background="grey")


privates = st.builds(lambda n1, n2, a: PrivateParams((n1, n2), a),
                     st.floats(-0.8, 0.8), st.floats(-0.8, 0.8), st.floats(-0.2, 0.2))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(all_cells()), privates, privates)
def test_distinct_private_params_are_distinguishable(cell, p, q):
    if np.linalg.norm(p.vector() - q.vector()) < 0.3:
        return  # near-identical deformations are allowed to look alike
    a = render(GlyphSpec(cell.category, cell.rotation, cell.thickness, cell.size, cell.background, p))
    b = render(GlyphSpec(cell.category, cell.rotation, cell.thickness, cell.size, cell.background, q))
    assert np.linalg.norm(a - b) > 0.5
