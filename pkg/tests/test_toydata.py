import numpy as np
import pytest

from i2vtoy.codec import encode_video
from i2vtoy.tensor import Rng
from i2vtoy.toydata import (
    INTENSITY_RANGE,
    MAX_SPEED,
    RADIUS_RANGE,
    SceneSpec,
    generate_scene,
    is_wall_free,
    make_clip,
    make_dataset,
    render_video,
    scene_condition,
)


def test_scene_reproducible_and_in_range():
    assert generate_scene(Rng(4, 2)) == generate_scene(Rng(4, 2))
    scenes = [generate_scene(Rng(0, i)) for i in range(1000)]
    assert {s.shape_class for s in scenes} == {"square", "disc"}
    for s in scenes:
        assert RADIUS_RANGE[0] <= s.radius <= RADIUS_RANGE[1]
        assert INTENSITY_RANGE[0] <= s.intensity <= INTENSITY_RANGE[1]
        assert all(abs(v) <= MAX_SPEED for v in s.velocity)
        assert all(s.radius <= c <= 1 - s.radius for c in s.center)


def test_scene_dict_round_trip():
    s = generate_scene(Rng(1))
    assert SceneSpec.from_dict(s.to_dict()) == s


def test_static_scene_frames_identical():
    s = SceneSpec("disc", (0.5, 0.5), (0.0, 0.0), 0.2, 0.8)
    v = render_video(s, 6, 32, 32)
    assert all(np.array_equal(v[0], f) for f in v)


@pytest.mark.parametrize("shape", ["square", "disc"])
def test_translation_oracle(shape):
    W = 32
    s = SceneSpec(shape, (0.3, 0.5), (2 / W, 0.0), 0.15, 0.9)
    assert is_wall_free(s, 5, W, W)
    v = render_video(s, 5, W, W)
    for k in range(1, 5):
        # interior columns: frame k equals frame 0 moved right by 2k pixels
        np.testing.assert_array_equal(v[k][0, :, 2 * k:], v[0][0, :, : W - 2 * k])


def test_pixel_range_and_shapes():
    clip = make_clip(0, 3, 8, 32, 32)
    assert clip.frames.shape == (8, 1, 32, 32)
    assert clip.frames.min() >= 0 and clip.frames.max() <= 1
    assert np.array_equal(clip.latents, encode_video(clip.frames))


def test_reflection_keeps_shape_inside():
    s = SceneSpec("square", (0.8, 0.2), (0.06, -0.06), 0.15, 1.0)
    v = render_video(s, 20, 32, 32)
    mass = v.sum(axis=(1, 2, 3))
    np.testing.assert_allclose(mass, mass[0], rtol=1e-5)


def test_condition_vector():
    s = SceneSpec("disc", (0.3, 0.4), (0.01, -0.02), 0.2, 0.7)
    np.testing.assert_allclose(scene_condition(s).vector, [0, 1, 0.3, 0.4, 0.1, -0.2, 0.2, 0.7], rtol=1e-6)


def test_dataset_reproducible_and_split():
    a, b = make_dataset(20, 4, 16, 16, seed=5), make_dataset(20, 4, 16, 16, seed=5)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.conditions, b.conditions)
    assert len(a.train_idx) == 18 and len(a.val_idx) == 2
    assert a.shape == (4, 16, 16)
    assert np.array_equal(a.latents, np.stack([encode_video(f) for f in a.frames]))
    assert not np.array_equal(make_dataset(4, 4, 16, 16, seed=6).frames, a.frames[:4])
