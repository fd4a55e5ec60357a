import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import step_profile_edges
from simalign.frameprep import (FrameImage, PrepParams, SplitRegion, average_edge_map, canny, erase_edges,
                                feature_maps, find_split_lines, max_split_depth, split_maps, split_recursive,
                                stddev_map)
from simalign.synthgen import gen_composite_frames, grid_layout


def step_image(h=40, w=60, at=30, lo=0.0, hi=255.0):
    px = np.full((h, w), lo)
    px[:, at:] = hi
    return px


def close(a: SplitRegion, b: SplitRegion, tol=2):
    return max(abs(x - y) for x, y in zip(a.as_list(), b.as_list())) <= tol


# -- canny -------------------------------------------------------------------

def test_constant_image_has_no_edges():
    assert not canny(np.full((32, 32), 128.0)).any()


def test_step_edge_matches_profile_oracle():
    img = step_image()
    e = canny(img, sigma=1.0, low=10, high=50)
    expected = step_profile_edges(img[0], 1.0, 10, 50)
    assert expected and max(abs(c - 30) for c in expected) <= 1
    cols = {int(c) for c in np.flatnonzero(e.any(axis=0))}
    assert cols == expected
    assert np.all(e[:, sorted(expected)] == 1)


@pytest.mark.parametrize("at,hi", [(17, 90.0), (41, 255.0), (8, 30.0)])
def test_step_edge_oracle_other_profiles(at, hi):
    img = step_image(at=at, hi=hi)
    e = canny(img, sigma=1.4, low=20, high=60)
    assert {int(c) for c in np.flatnonzero(e.any(axis=0))} == step_profile_edges(img[0], 1.4, 20, 60)


@settings(max_examples=60, deadline=None)
@given(st.integers(8, 52), st.floats(25.0, 255.0), st.sampled_from([1.0, 1.4, 2.0]))
def test_step_edge_oracle_property(at, hi, sigma):
    img = step_image(at=at, hi=hi)
    e = canny(img, sigma=sigma, low=20, high=60)
    assert {int(c) for c in np.flatnonzero(e.any(axis=0))} == step_profile_edges(img[0], sigma, 20, 60)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_canny_transpose_symmetry(seed):
    img = np.random.default_rng(seed).uniform(0, 255, (24, 31))
    assert np.array_equal(canny(img).T, canny(img.T))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(1.0, 60.0))
def test_canny_brightness_invariance(seed, shift):
    img = np.random.default_rng(seed).uniform(0, 180, (24, 24))
    assert np.array_equal(canny(img), canny(img + shift))


def test_canny_preconditions():
    with pytest.raises(ValueError):
        canny(np.zeros((20, 20)), low=50, high=10)
    with pytest.raises(ValueError):
        canny(np.zeros((20, 20)), sigma=0)
    with pytest.raises(ValueError, match="smaller"):
        canny(np.zeros((5, 5)), sigma=1.4)


def test_frame_image_validation():
    with pytest.raises(ValueError):
        FrameImage(np.full((4, 4), 300.0))
    rgb = FrameImage(np.full((4, 4, 3), 100.0))
    assert rgb.pixels.shape == (4, 4) and np.allclose(rgb.pixels, 100.0)


# -- maps --------------------------------------------------------------------

def test_average_edge_of_identical_frames():
    img = step_image()
    assert np.array_equal(average_edge_map([img] * 4), canny(img))


def test_average_edge_with_blank_frame_is_half():
    img = step_image()
    avg = average_edge_map([img, np.zeros_like(img)])
    e = canny(img)
    assert np.all(avg[e == 1] == 0.5) and not avg[e == 0].any()


def test_average_edge_shared_border():
    rng = np.random.default_rng(0)
    frames = []
    for _ in range(10):
        px = rng.uniform(0, 255, (48, 64))
        px[:, 30:34] = 0.0
        px[:, :30] = np.clip(px[:, :30] * 0.1 + 200, 0, 255)
        frames.append(px)
    avg = average_edge_map(frames)
    assert avg[:, 29:31].max(axis=1).min() >= 0.9
    assert avg[5:-5, 40:60].mean() < 0.5


def test_average_edge_mixed_sizes():
    with pytest.raises(ValueError, match="mixed"):
        average_edge_map([np.zeros((20, 20)), np.zeros((20, 21))])


def test_stddev_map_values():
    assert np.all(stddev_map([np.zeros((3, 4)), np.full((3, 4), 2.0)]) == 1.0)
    assert not stddev_map([np.full((3, 4), 7.0)] * 3).any()
    with pytest.raises(ValueError):
        stddev_map([np.zeros((3, 3))])


def test_stddev_static_border_noisy_interior():
    frames, _ = gen_composite_frames([SplitRegion(4, 4, 60, 44)], 4, 32, seed=0, size=(64, 48))
    std = stddev_map(frames)
    assert std[:4].max() < 1 and std[10:40, 10:50].min() > 5


# -- split lines and erase ---------------------------------------------------

def test_two_tile_split_line():
    lay = [SplitRegion(0, 0, 99, 100), SplitRegion(101, 0, 200, 100)]
    frames, _ = gen_composite_frames(lay, 2, 16, seed=2, size=(200, 100))
    edge, std = feature_maps(frames)
    lines = find_split_lines(edge, std, SplitRegion(0, 0, 200, 100))
    assert len(lines) == 1 and lines[0].axis == "x" and 98 <= lines[0].pos <= 102


def test_blank_maps_give_no_lines():
    z = np.zeros((50, 70))
    assert find_split_lines(z, z, SplitRegion(0, 0, 70, 50)) == []


def test_grid_gives_one_line_per_axis():
    lay = grid_layout(160, 120, 2, 2, 4)
    frames, _ = gen_composite_frames(lay, 4, 16, seed=5, size=(160, 120))
    edge, std = feature_maps(frames)
    lines = find_split_lines(edge, std, erase_edges(std, SplitRegion(0, 0, 160, 120)))
    assert sorted(ln.axis for ln in lines) == ["x", "y"]


def test_lines_near_border_excluded():
    edge = np.zeros((40, 40))
    edge[:, 2] = 1.0
    edge[:, 20] = 1.0
    lines = find_split_lines(edge, np.full((40, 40), 10.0), SplitRegion(0, 0, 40, 40))
    assert [(ln.axis, ln.pos) for ln in lines] == [("x", 20)]


def test_region_out_of_bounds():
    with pytest.raises(ValueError):
        find_split_lines(np.zeros((10, 10)), np.zeros((10, 10)), SplitRegion(0, 0, 11, 10))


def test_erase_keeps_busy_region():
    r = SplitRegion(0, 0, 30, 20)
    assert erase_edges(np.full((20, 30), 9.0), r) == r


def test_erase_letterbox():
    frames, _ = gen_composite_frames([SplitRegion(0, 10, 80, 50)], 0, 8, seed=1, size=(80, 60))
    got = erase_edges(stddev_map(frames), SplitRegion(0, 0, 80, 60))
    assert abs(got.y0 - 10) <= 1 and abs(got.y1 - 50) <= 1
    assert (got.x0, got.x1) == (0, 80)


def test_erase_static_frame_collapses():
    got = erase_edges(np.zeros((40, 40)), SplitRegion(0, 0, 40, 40))
    assert got.width == 1 and got.height == 1


# -- recursion ---------------------------------------------------------------

def test_single_scene_is_full_frame():
    frames, _ = gen_composite_frames([SplitRegion(0, 0, 96, 64)], 0, 8, seed=4)
    assert split_recursive(frames) == [SplitRegion(0, 0, 96, 64)]


def test_two_tile_stack():
    lay = grid_layout(200, 100, 1, 2, 3)
    frames, gt = gen_composite_frames(lay, 3, 16, seed=6, size=(200, 100))
    got = split_recursive(frames)
    assert len(got) == 2 and all(any(close(r, g) for r in got) for g in gt)


def test_four_tiles_with_letterbox():
    lay = [SplitRegion(x0, y0, x1, y1) for y0, y1 in ((14, 70), (74, 130)) for x0, x1 in ((0, 94), (98, 192))]
    frames, gt = gen_composite_frames(lay, 4, 16, seed=8, size=(192, 144))
    got = split_recursive(frames)
    assert len(got) == 4 and all(any(close(r, g) for r in got) for g in gt)


def test_static_video_falls_back_to_full_frame():
    assert split_recursive([np.full((40, 50), 10.0)] * 3) == [SplitRegion(0, 0, 50, 40)]


def test_too_few_frames():
    with pytest.raises(ValueError):
        split_recursive([np.zeros((40, 40))])


@pytest.mark.parametrize("seed,tiles", [(0, (1, 2)), (1, (2, 2)), (2, (2, 1))])
def test_regions_disjoint_contained_and_idempotent(seed, tiles):
    lay = grid_layout(176, 132, *tiles, 4)
    frames, _ = gen_composite_frames(lay, 4, 12, seed=seed, size=(176, 132))
    got = split_recursive(frames)
    for i, a in enumerate(got):
        assert 0 <= a.x0 < a.x1 <= 176 and 0 <= a.y0 < a.y1 <= 132
        for b in got[i + 1:]:
            assert a.x1 <= b.x0 or b.x1 <= a.x0 or a.y1 <= b.y0 or b.y1 <= a.y0
    for r in got:
        crop = [f.pixels[r.y0:r.y1, r.x0:r.x1] for f in frames]
        assert split_recursive(crop) == [SplitRegion(0, 0, r.width, r.height)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(40, 300), st.integers(40, 300))
def test_depth_bound(seed, w, h):
    rng = np.random.default_rng(seed)
    edge = (rng.uniform(size=(h, w)) < 0.5).astype(float)
    std = rng.uniform(0, 8, (h, w))
    trace = split_maps(edge, std, PrepParams())
    assert trace.max_depth <= np.log2(max(w, h) / 32) + 1
    assert trace.max_depth <= max_split_depth(w, h)
