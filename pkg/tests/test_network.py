"""Model construction, forward contract, checkpointing, and the end-to-end
gradient check of a tiny network."""

import numpy as np
import pytest

from voxcot import ops
from voxcot.losses import dice_loss, one_hot
from voxcot.network import (ArchitectureDescriptor, ViewModel, parameter_count,
                            parameter_slots)
from voxcot.rng import RngStream
from voxcot.tensor import EngineError, Tensor, no_grad
from voxcot.views import all_transforms, identity, standard_view_set

TINY = ArchitectureDescriptor(base_channels=2, depth=1, stem_kernel=(3, 3, 3),
                              stem_stride=1, num_classes=2)


def tiny_model(seed=0, view=None, desc=TINY):
    return ViewModel.build(desc, view or identity(), RngStream(seed))


def test_forward_shape_and_channel_normalization():
    m = tiny_model()
    x = np.random.default_rng(0).standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
    with no_grad():
        out = m.forward(x, "eval")
    assert out.data.shape == (2, 2, 8, 8, 8)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-5)


def test_default_architecture_shape():
    desc = ArchitectureDescriptor()
    m = ViewModel.build(desc, identity(), RngStream(1))
    x = np.random.default_rng(1).standard_normal((1, 1, 32, 32, 32)).astype(np.float32)
    with no_grad():
        out = m.forward(x, "eval")
    assert out.data.shape == (1, 2, 32, 32, 32)


def test_forward_is_deterministic_in_eval():
    m = tiny_model(3)
    x = np.random.default_rng(3).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    with no_grad():
        a = m.forward(x, "eval").data
        b = m.forward(x, "eval").data
    np.testing.assert_array_equal(a, b)


def test_mc_mode_with_zero_dropout_equals_eval():
    desc = ArchitectureDescriptor(base_channels=2, depth=1, stem_kernel=(3, 3, 3),
                                  stem_stride=1, dropout_p=0.0)
    m = ViewModel.build(desc, identity(), RngStream(4))
    x = np.random.default_rng(4).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    with no_grad():
        ev = m.forward(x, "eval").data
        mc = m.forward(x, "mc_sample", RngStream(5)).data
    np.testing.assert_array_equal(ev, mc)


def test_train_mode_requires_rng_when_dropout_active():
    m = tiny_model(6)
    x = np.zeros((1, 1, 8, 8, 8), np.float32)
    with pytest.raises(EngineError):
        m.forward(x, "train", rng=None)


def test_divisibility_error_names_the_constraint():
    m = tiny_model(7)
    with pytest.raises(EngineError, match="divisible"):
        m.forward(np.zeros((1, 1, 7, 8, 8), np.float32), "eval")
    with pytest.raises(EngineError):
        m.forward(np.zeros((1, 2, 8, 8, 8), np.float32), "eval")
    with pytest.raises(EngineError):
        m.forward(np.zeros((1, 8, 8, 8), np.float32), "eval")


def test_parameter_counts_asymmetric_below_symmetric():
    asym = ArchitectureDescriptor(kernel_mode="asymmetric")
    sym = ArchitectureDescriptor(kernel_mode="symmetric")
    assert asym.body_kernel == (3, 3, 1)
    assert sym.body_kernel == (3, 3, 3)
    n_asym, n_sym = parameter_count(asym), parameter_count(sym)
    assert n_asym < n_sym
    # frozen values guard against silent architecture drift
    assert n_asym == 169_994
    assert n_sym == 462_602


def test_parameter_slots_cover_model_and_match_count():
    slots = parameter_slots(TINY)
    m = tiny_model(8)
    assert set(m.parameters) == set(slots)
    total = sum(int(np.prod(v.data.shape)) for v in m.parameters.values())
    assert total == parameter_count(TINY) == m.parameter_count()


def test_descriptor_validation():
    with pytest.raises(ValueError):
        ArchitectureDescriptor(depth=0)
    with pytest.raises(ValueError):
        ArchitectureDescriptor(num_classes=1)
    with pytest.raises(ValueError):
        ArchitectureDescriptor(dropout_p=1.0)
    with pytest.raises(ValueError):
        ArchitectureDescriptor(kernel_mode="banana")
    with pytest.raises(ValueError):
        ArchitectureDescriptor(dropout_sites=(5,))
    with pytest.raises(ValueError):
        ArchitectureDescriptor(stem_stride=3)


def test_descriptor_meta_round_trip():
    desc = ArchitectureDescriptor(base_channels=4, depth=2, dropout_sites=(1,),
                                  kernel_mode="symmetric", upsample="trilinear")
    assert ArchitectureDescriptor.from_meta(desc.to_meta()) == desc


def test_init_is_deterministic_per_seed_and_name():
    a = tiny_model(11)
    b = tiny_model(11)
    c = tiny_model(12)
    for name in a.parameters:
        np.testing.assert_array_equal(a.parameters[name].data,
                                      b.parameters[name].data)
    assert any(not np.array_equal(a.parameters[n].data, c.parameters[n].data)
               for n in a.parameters)


def test_checkpoint_round_trip(tmp_path):
    view = standard_view_set(3)[1]
    m = ViewModel.build(TINY, view, RngStream(13))
    p = tmp_path / "m.ckpt"
    m.save(p, {"stage": 1})
    r = ViewModel.load(p)
    assert r.descriptor == m.descriptor
    assert r.view == view
    for name in m.parameters:
        np.testing.assert_array_equal(r.parameters[name].data,
                                      m.parameters[name].data)
    x = np.random.default_rng(13).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    with no_grad():
        np.testing.assert_array_equal(m.forward(x).data, r.forward(x).data)


def test_build_from_file_and_2d_weight_unsqueeze(tmp_path):
    from voxcot.checkpoint import save_params
    m = ViewModel.build(TINY, identity(), RngStream(14))
    arrays = {k: v.data.copy() for k, v in m.parameters.items()}
    # store every thin (k,k,1) body kernel as a 2D (k,k) array; the loader
    # must add the trailing slice axis back
    squeezed = {}
    for k, v in arrays.items():
        if v.ndim == 5 and v.shape[-1] == 1:
            squeezed[k] = v[..., 0]
        else:
            squeezed[k] = v
    p = tmp_path / "w2d.ckpt"
    save_params(p, squeezed, {"descriptor": TINY.to_meta()})
    desc_asym = ArchitectureDescriptor(base_channels=2, depth=1,
                                       stem_kernel=(3, 3, 3), stem_stride=1)
    assert desc_asym.body_kernel == (3, 3, 1)
    r = ViewModel.build(desc_asym, identity(), RngStream(15),
                        init="from_file", init_path=p)
    for name, v in r.parameters.items():
        np.testing.assert_array_equal(v.data, arrays[name])


def test_build_from_file_reports_all_mismatches(tmp_path):
    from voxcot.checkpoint import save_params
    m = ViewModel.build(TINY, identity(), RngStream(16))
    arrays = {k: v.data for k, v in m.parameters.items()}
    del arrays["head.w"]
    arrays["stem.w"] = np.zeros((9, 9, 9), np.float32)
    arrays["zzz.extra"] = np.zeros(3, np.float32)
    p = tmp_path / "bad.ckpt"
    save_params(p, arrays, {})
    with pytest.raises(EngineError) as ei:
        ViewModel.build(TINY, identity(), RngStream(17), init="from_file",
                        init_path=p)
    msg = str(ei.value)
    assert "head.w" in msg and "stem.w" in msg and "zzz.extra" in msg


def test_predict_through_view_agrees_across_views_for_isotropic_weights():
    # with all conv kernels symmetric under the view's permutation and the
    # weights constant, every view computes the same canonical-frame output
    desc = ArchitectureDescriptor(base_channels=2, depth=1, stem_kernel=(3, 3, 3),
                                  body_kernel=(3, 3, 3), stem_stride=1,
                                  dropout_p=0.0)
    x = np.random.default_rng(18).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    outs = []
    for view in standard_view_set(3):
        m = ViewModel.build(desc, view, RngStream(19))
        for v in m.parameters.values():
            v.data[...] = 0.01
        with no_grad():
            outs.append(m.predict_through_view(x, "eval").data)
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-5)
    np.testing.assert_allclose(outs[0], outs[2], atol=1e-5)


def test_predict_through_view_equals_manual_transform_pipeline():
    view = all_transforms()[9]
    m = ViewModel.build(TINY, view, RngStream(20))
    x = np.random.default_rng(20).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    from voxcot.views import transform_array
    with no_grad():
        direct = m.predict_through_view(x, "eval").data
        xv = transform_array(x, view.perm, view.flips)
        inv = view.inverse()
        manual = transform_array(m.forward(xv, "eval").data, inv.perm, inv.flips)
    np.testing.assert_array_equal(direct, manual)


def test_mc_samples_deterministic_and_distinct():
    m = tiny_model(21)
    x = np.random.default_rng(21).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    s1 = m.mc_samples_through_view(x, 4, RngStream(22))
    s2 = m.mc_samples_through_view(x, 4, RngStream(22))
    np.testing.assert_array_equal(s1, s2)
    assert s1.shape == (4, 1, 2, 8, 8, 8)
    assert not np.array_equal(s1[0], s1[1])  # dropout resampled per pass
    with pytest.raises(ValueError):
        m.mc_samples_through_view(x, 1, RngStream(22))


def test_mc_encoder_caching_matches_full_passes():
    m = tiny_model(23)
    x = np.random.default_rng(23).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    stream = RngStream(24)
    cached = m.mc_samples_through_view(x, 3, stream)
    full = np.empty_like(cached)
    with no_grad():
        for j in range(3):
            full[j] = m.forward(x, "mc_sample", stream.child("mc", j)).data
    np.testing.assert_array_equal(cached, full)


def test_end_to_end_gradcheck_tiny_model():
    """Finite differences through conv/up/skip/softmax/dice, float64."""
    m = ViewModel.build(TINY, identity(), RngStream(25), dtype=np.float64)
    gen = np.random.default_rng(25)
    x = gen.standard_normal((1, 1, 8, 8, 8))
    labels = (gen.random((1, 8, 8, 8)) < 0.4).astype(np.int64)
    t = one_hot(labels, 2, dtype=np.float64)

    def loss_value():
        out = m.forward(x, "eval")
        return dice_loss(out, t).loss

    loss = loss_value()
    loss.backward()
    grads = {k: v.grad.copy() for k, v in m.parameters.items()}
    for v in m.parameters.values():
        v.zero_grad()

    eps = 1e-6
    gen2 = np.random.default_rng(26)
    worst = 0.0
    for name, p in m.parameters.items():
        flat = gen2.choice(p.data.size, size=min(2, p.data.size), replace=False)
        for f in flat:
            idx = np.unravel_index(f, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            hi = float(loss_value().data)
            p.data[idx] = orig - eps
            lo = float(loss_value().data)
            p.data[idx] = orig
            numeric = (hi - lo) / (2 * eps)
            analytic = float(grads[name][idx])
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
            assert err < 1e-4, f"{name}{idx}: {analytic} vs {numeric}"
    assert worst < 1e-4
