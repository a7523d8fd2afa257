"""Sliding-window tiling and full-volume inference."""

import numpy as np
import pytest

from voxcot.infer import sliding_window_infer, tile_starts
from voxcot.network import ArchitectureDescriptor, ViewModel
from voxcot.rng import RngStream
from voxcot.tensor import no_grad
from voxcot.views import identity, standard_view_set

DESC = ArchitectureDescriptor(base_channels=2, depth=1, stem_kernel=(3, 3, 3),
                              stem_stride=1, dropout_p=0.0)


def _model(seed=0, view=None):
    return ViewModel.build(DESC, view or identity(), RngStream(seed))


# ---------------------------------------------------------------------------
# tile_starts
# ---------------------------------------------------------------------------

def test_tile_starts_exact_fit():
    assert tile_starts(32, 32, 0.5) == [0]


def test_tile_starts_cover_whole_extent():
    for size, window, overlap in [(48, 32, 0.5), (50, 32, 0.5), (64, 16, 0.25),
                                  (33, 32, 0.5), (100, 32, 0.0)]:
        starts = tile_starts(size, window, overlap)
        assert starts[0] == 0
        assert starts[-1] == size - window
        covered = np.zeros(size, bool)
        for s in starts:
            covered[s:s + window] = True
        assert covered.all(), (size, window, overlap, starts)
        assert starts == sorted(starts)


def test_tile_starts_overlap_fraction():
    starts = tile_starts(64, 32, 0.5)
    assert starts == [0, 16, 32]  # stride 16 = window/2


def test_tile_starts_window_too_large():
    with pytest.raises(ValueError):
        tile_starts(16, 32, 0.5)


# ---------------------------------------------------------------------------
# sliding_window_infer
# ---------------------------------------------------------------------------

def test_window_equal_to_volume_matches_direct_argmax():
    m = _model(1)
    img = np.random.default_rng(1).standard_normal((8, 8, 8)).astype(np.float32)
    out = sliding_window_infer([m], img, 8, 0.5, "single")
    with no_grad():
        direct = np.argmax(m.predict_through_view(img[None, None]).data[0],
                           axis=0).astype(np.int16)
    np.testing.assert_array_equal(out, direct)
    assert out.shape == (8, 8, 8)
    assert out.dtype == np.int16


def test_tiled_inference_is_deterministic_and_covers_all_voxels():
    m = _model(2)
    img = np.random.default_rng(2).standard_normal((16, 12, 8)).astype(np.float32)
    a = sliding_window_infer([m], img, 8, 0.5, "single")
    b = sliding_window_infer([m], img, 8, 0.5, "single")
    np.testing.assert_array_equal(a, b)
    assert a.shape == img.shape
    assert set(np.unique(a)) <= {0, 1}


def test_volume_smaller_than_window_is_padded_and_cropped():
    m = _model(3)
    img = np.random.default_rng(3).standard_normal((6, 8, 5)).astype(np.float32)
    out = sliding_window_infer([m], img, 8, 0.5, "single")
    assert out.shape == (6, 8, 5)


def test_constant_bias_network_predicts_one_class_everywhere():
    m = _model(4)
    # zero every weight and put all mass on class 1 through the head bias
    for name, p in m.parameters.items():
        p.data[...] = 0.0
    m.parameters["head.b"].data[...] = np.array([0.0, 5.0], np.float32)
    img = np.random.default_rng(4).standard_normal((12, 12, 12)).astype(np.float32)
    out = sliding_window_infer([m], img, 8, 0.5, "single")
    assert np.all(out == 1)


def test_ensemble_mode_runs_all_views():
    models = [_model(5, v) for v in standard_view_set(3)]
    img = np.random.default_rng(5).standard_normal((8, 8, 8)).astype(np.float32)
    out = sliding_window_infer(models, img, 8, 0.5, "ensemble", "mean")
    assert out.shape == (8, 8, 8)
    maj = sliding_window_infer(models, img, 8, 0.5, "ensemble", "majority")
    assert maj.shape == (8, 8, 8)


def test_single_mode_uses_first_model_only():
    good = _model(6)
    broken = _model(7)
    for p in broken.parameters.values():
        p.data[...] = np.nan  # would blow up if ever run
    img = np.random.default_rng(6).standard_normal((8, 8, 8)).astype(np.float32)
    out = sliding_window_infer([good, broken], img, 8, 0.5, "single")
    expected = sliding_window_infer([good], img, 8, 0.5, "single")
    np.testing.assert_array_equal(out, expected)


def test_infer_argument_validation():
    m = _model(8)
    img = np.zeros((8, 8, 8), np.float32)
    with pytest.raises(ValueError):
        sliding_window_infer([], img, 8)
    with pytest.raises(ValueError):
        sliding_window_infer([m], img, 8, mode="blend")
    with pytest.raises(ValueError):
        sliding_window_infer([m], img, 8, overlap=1.0)
    with pytest.raises(ValueError):
        sliding_window_infer([m], np.zeros((8, 8), np.float32), 8)
    with pytest.raises(ValueError):
        sliding_window_infer([m], img, 8, mode="ensemble")
