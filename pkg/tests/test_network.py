"""Architecture tests: tap shapes, Siamese weight sharing, RNN behavior,
state causality, deterministic initialization, and parameter round-trips."""

import numpy as np
import pytest

from cardiomotion import autodiff as ad
from cardiomotion import network as net
from cardiomotion.autodiff import Prng, Tape, Tensor
from cardiomotion.container import ContainerError

TINY = net.NetConfig(encoder_channels=(2, 3, 4, 4), fusion_channels=2,
                     hidden_channels=3, dtype="float64")


def frame(prng, n=1, h=64, w=64, dtype=np.float32):
    return Tensor(prng.uniform(0, 1, (n, 1, h, w)).astype(dtype))


class TestEncode:
    def test_tap_shapes(self, prng):
        m = net.init_model(0)
        taps = net.encode(frame(prng), m.encoder)
        assert [t.shape for t in taps] == [
            (1, 16, 64, 64), (1, 32, 32, 32), (1, 64, 16, 16), (1, 64, 8, 8)]

    def test_indivisible_dims_rejected(self, prng):
        m = net.init_model(0)
        with pytest.raises(ValueError, match="divisible"):
            net.encode(frame(prng, h=60, w=64), m.encoder)

    def test_identical_frames_identical_taps(self, prng):
        m = net.init_model(0, TINY)
        f = frame(prng, h=16, w=16, dtype=np.float64)
        a = net.encode(f, m.encoder)
        b = net.encode(Tensor(f.data.copy()), m.encoder)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.data, y.data)

    def test_zero_weights_zero_taps(self, prng):
        m = net.init_model(0, TINY)
        for _, t in m.named_parameters():
            t.data = np.zeros_like(t.data)
        taps = net.encode(frame(prng, h=16, w=16, dtype=np.float64), m.encoder)
        for t in taps:
            np.testing.assert_array_equal(t.data, 0.0)

    def test_single_stored_copy_of_encoder(self, prng):
        # perturbing one encoder weight changes both streams' taps
        m = net.init_model(0, TINY)
        f1, f2 = frame(prng, h=16, w=16, dtype=np.float64), frame(prng, h=16, w=16, dtype=np.float64)
        a1, a2 = net.encode(f1, m.encoder), net.encode(f2, m.encoder)
        m.encoder.convs[0].weight.data = m.encoder.convs[0].weight.data + 0.05
        b1, b2 = net.encode(f1, m.encoder), net.encode(f2, m.encoder)
        assert np.abs(b1[0].data - a1[0].data).max() > 0
        assert np.abs(b2[0].data - a2[0].data).max() > 0


class TestFusion:
    def test_fused_shape(self, prng):
        m = net.init_model(0)
        f1, f2 = frame(prng), frame(prng)
        fused = net.fuse_multiscale(net.encode(f1, m.encoder), net.encode(f2, m.encoder), m.motion)
        assert fused.shape == (1, 128, 64, 64)

    def test_stream_order_matters(self, prng):
        m = net.init_model(0, TINY)
        t1 = net.encode(frame(prng, h=16, w=16, dtype=np.float64), m.encoder)
        t2 = net.encode(frame(prng, h=16, w=16, dtype=np.float64), m.encoder)
        ab = net.fuse_multiscale(t1, t2, m.motion)
        ba = net.fuse_multiscale(t2, t1, m.motion)
        assert np.abs(ab.data - ba.data).max() > 1e-9

    def test_zero_fusion_weights_zero_map(self, prng):
        m = net.init_model(0, TINY)
        for cp in m.motion.fusion:
            cp.weight.data = np.zeros_like(cp.weight.data)
            cp.bias.data = np.zeros_like(cp.bias.data)
        t1 = net.encode(frame(prng, h=16, w=16, dtype=np.float64), m.encoder)
        fused = net.fuse_multiscale(t1, t1, m.motion)
        np.testing.assert_array_equal(fused.data, 0.0)


class TestRnnStep:
    def test_zero_weights_give_flow_bias(self, prng):
        m = net.init_model(0, TINY)
        for _, t in m.named_parameters():
            t.data = np.zeros_like(t.data)
        fused = Tensor(prng.normal((1, 8 * TINY.fusion_channels, 16, 16), 1.0, dtype=np.float64))
        state = net.RnnState.initial(1, TINY.hidden_channels, 16, 16, np.float64)
        state, flow = net.rnn_step(fused, state, m.motion)
        np.testing.assert_array_equal(state.hidden.data, 0.0)
        np.testing.assert_array_equal(flow.data, 0.0)

    def test_hidden_bounded_by_tanh(self, prng):
        m = net.init_model(3, TINY)
        state = net.RnnState.initial(1, TINY.hidden_channels, 16, 16, np.float64)
        for std in (1.0, 50.0):
            fused = Tensor(prng.normal((1, 8 * TINY.fusion_channels, 16, 16), std, dtype=np.float64))
            state, _ = net.rnn_step(fused, state, m.motion)
            # open interval up to float saturation of tanh
            assert np.abs(state.hidden.data).max() <= 1.0
        moderate = Tensor(prng.normal((1, 8 * TINY.fusion_channels, 16, 16), 0.5, dtype=np.float64))
        state, _ = net.rnn_step(moderate, net.RnnState.initial(1, TINY.hidden_channels, 16, 16, np.float64), m.motion)
        assert np.abs(state.hidden.data).max() < 1.0

    def test_state_evolution_changes_flow(self, prng):
        m = net.init_model(3, TINY)
        fused = Tensor(prng.normal((1, 8 * TINY.fusion_channels, 16, 16), 1.0, dtype=np.float64))
        state = net.RnnState.initial(1, TINY.hidden_channels, 16, 16, np.float64)
        state1, flow1 = net.rnn_step(fused, state, m.motion)
        state2, flow2 = net.rnn_step(fused, state1, m.motion)
        assert np.abs(flow2.data - flow1.data).max() > 1e-9
        zero_hidden = net.MotionHeadParameters(
            fusion=m.motion.fusion, rnn_in=m.motion.rnn_in,
            rnn_hidden=net.ConvParams(Tensor(np.zeros_like(m.motion.rnn_hidden.weight.data)), None),
            flow=m.motion.flow)
        s1, f1 = net.rnn_step(fused, net.RnnState.initial(1, TINY.hidden_channels, 16, 16, np.float64), zero_hidden)
        s2, f2 = net.rnn_step(fused, s1, zero_hidden)
        np.testing.assert_array_equal(f1.data, f2.data)

    def test_dimension_mismatch(self, prng):
        m = net.init_model(0, TINY)
        fused = Tensor(prng.normal((1, 8 * TINY.fusion_channels, 16, 16), 1.0, dtype=np.float64))
        state = net.RnnState.initial(1, TINY.hidden_channels, 8, 8, np.float64)
        with pytest.raises(ValueError):
            net.rnn_step(fused, state, m.motion)


class TestMotionForward:
    def test_output_count_and_shape(self, prng):
        m = net.init_model(1, TINY)
        tgt = frame(prng, h=16, w=16, dtype=np.float64)
        srcs = [frame(prng, h=16, w=16, dtype=np.float64) for _ in range(3)]
        flows = net.motion_forward(tgt, srcs, m.encoder, m.motion)
        assert len(flows) == 3
        assert all(f.shape == (1, 2, 16, 16) for f in flows)

    def test_t1_equals_manual_pipeline(self, prng):
        m = net.init_model(1, TINY)
        tgt = frame(prng, h=16, w=16, dtype=np.float64)
        src = frame(prng, h=16, w=16, dtype=np.float64)
        flow = net.motion_forward(tgt, [src], m.encoder, m.motion)[0]
        fused = net.fuse_multiscale(net.encode(tgt, m.encoder), net.encode(src, m.encoder), m.motion)
        _, manual = net.rnn_step(fused, net.RnnState.initial(1, TINY.hidden_channels, 16, 16, np.float64), m.motion)
        np.testing.assert_array_equal(flow.data, manual.data)

    def test_empty_sources_rejected(self, prng):
        m = net.init_model(1, TINY)
        with pytest.raises(ValueError):
            net.motion_forward(frame(prng, h=16, w=16), [], m.encoder, m.motion)

    def test_state_causality(self, prng):
        # flow k must not depend on source frames with index > k
        m = net.init_model(2, TINY)
        tgt = frame(prng, h=16, w=16, dtype=np.float64)
        srcs = [frame(prng, h=16, w=16, dtype=np.float64) for _ in range(3)]
        flows_a = net.motion_forward(tgt, srcs, m.encoder, m.motion)
        perturbed = srcs[:2] + [Tensor(srcs[2].data + 0.3)]
        flows_b = net.motion_forward(tgt, perturbed, m.encoder, m.motion)
        np.testing.assert_array_equal(flows_a[0].data, flows_b[0].data)
        np.testing.assert_array_equal(flows_a[1].data, flows_b[1].data)
        assert np.abs(flows_a[2].data - flows_b[2].data).max() > 0


class TestSegForward:
    def test_logit_shape(self, prng):
        m = net.init_model(0)
        logits = net.seg_forward(frame(prng), m.encoder, m.seg)
        assert logits.shape == (1, 4, 64, 64)

    def test_zero_head_uniform_softmax(self, prng):
        m = net.init_model(0, TINY)
        for cp in m.seg.fusion + [m.seg.classify]:
            cp.weight.data = np.zeros_like(cp.weight.data)
            cp.bias.data = np.zeros_like(cp.bias.data)
        logits = net.seg_forward(frame(prng, h=16, w=16, dtype=np.float64), m.encoder, m.seg)
        probs = ad.softmax(logits, 1)
        np.testing.assert_allclose(probs.data, 0.25, atol=1e-12)

    def test_encoder_shared_with_motion_branch(self, prng):
        m = net.init_model(4, TINY)
        f = frame(prng, h=16, w=16, dtype=np.float64)
        taps_a = net.encode(f, m.encoder)
        taps_b = net.encode(f, m.encoder)
        for a, b in zip(taps_a, taps_b):
            np.testing.assert_array_equal(a.data, b.data)

    def test_warped_variant_zero_flow(self, prng):
        m = net.init_model(4, TINY)
        f = frame(prng, h=16, w=16, dtype=np.float64)
        zero = Tensor(np.zeros((1, 2, 16, 16)))
        warped = net.seg_forward_warped(f, zero, m.encoder, m.seg)
        probs = ad.softmax(net.seg_forward(f, m.encoder, m.seg), 1)
        np.testing.assert_allclose(warped.data, probs.data, atol=1e-6)
        np.testing.assert_allclose(warped.data.sum(axis=1), 1.0, atol=1e-6)

    def test_warped_variant_gradients_reach_head_and_flow(self, prng):
        m = net.init_model(4, TINY)
        f = frame(prng, n=1, h=8, w=8, dtype=np.float64)
        flow = Tensor(prng.uniform(-0.6, 0.6, (1, 2, 8, 8)) + 0.13, requires_grad=True)
        weight = m.seg.classify.weight

        def fn(w_, fl):
            return net.seg_forward_warped(f, fl, m.encoder, m.seg)

        err = ad.grad_check(fn, [weight, flow])
        assert err <= 1e-4


class TestInitAndSerialization:
    def test_same_seed_same_parameters(self):
        a = net.init_model(11)
        b = net.init_model(11)
        for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_different_seed_differs(self):
        a, b = net.init_model(1), net.init_model(2)
        assert any(np.abs(x.data - y.data).max() > 0
                   for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()))

    def test_parameter_count_matches_declared_shapes(self):
        cfg = net.NetConfig()
        m = net.init_model(0, cfg)
        ec, fc, hc, k = cfg.encoder_channels, cfg.fusion_channels, cfg.hidden_channels, cfg.num_classes
        expected = 0
        io = [(ec[0], 1), (ec[0], ec[0]), (ec[1], ec[0]), (ec[1], ec[1]),
              (ec[2], ec[1]), (ec[2], ec[2]), (ec[3], ec[2]), (ec[3], ec[3])]
        for o, i in io:
            expected += o * i * 9 + o
        for c in ec:
            expected += 2 * (fc * c * 9 + fc)     # fusion convs of both heads
        expected += hc * 8 * fc * 1 + hc           # rnn input conv 1x1
        expected += hc * hc * 9                    # rnn hidden conv, no bias
        expected += 2 * hc * 9 + 2                 # flow conv
        expected += k * 4 * fc * 9 + k             # classifier conv
        assert m.count() == expected

    def test_roundtrip_bit_exact(self, tmp_path):
        m = net.init_model(7, TINY)
        p = tmp_path / "params.bin"
        net.save_params(m, p)
        loaded = net.load_params(p)
        for (na, ta), (nb, tb) in zip(m.named_parameters(), loaded.named_parameters()):
            assert na == nb and ta.data.tobytes() == tb.data.tobytes()
        p2 = tmp_path / "params2.bin"
        net.save_params(loaded, p2)
        assert p.read_bytes() == p2.read_bytes()

    def test_corrupt_file_detected(self, tmp_path):
        m = net.init_model(7, TINY)
        p = tmp_path / "params.bin"
        net.save_params(m, p)
        blob = bytearray(p.read_bytes())
        blob[-1] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(ContainerError, match="checksum"):
            net.load_params(p)

    def test_manifest_mismatch_detected(self, tmp_path):
        from cardiomotion import container
        m = net.init_model(7, TINY)
        entries = {n: t.data for n, t in m.named_parameters()}
        entries.pop("seg.classify.bias")
        cfg = m.config.to_json()
        container.write(tmp_path / "bad.bin", "model-params", entries,
                        {"config": cfg, "config_hash": net.config_hash(cfg),
                         "precision": "float64", "seed": 7})
        with pytest.raises(ContainerError, match="manifest"):
            net.load_params(tmp_path / "bad.bin")


class TestJointEncoderGradients:
    def test_sum_of_losses_gives_sum_of_gradients(self, prng):
        # linearity of the tape: grad of (L_a + L_b) w.r.t. shared encoder
        # weights equals the sum of individual gradients
        m = net.init_model(5, TINY)
        f = frame(prng, h=8, w=8, dtype=np.float64)
        w0 = m.encoder.convs[0].weight

        def loss_motion():
            flows = net.motion_forward(f, [Tensor(f.data + 0.01)], m.encoder, m.motion)
            return ad.reduce_mean(ad.square(flows[0]))

        def loss_seg():
            return ad.reduce_mean(ad.square(net.seg_forward(f, m.encoder, m.seg)))

        def grad_of(fn):
            ad.zero_grads([w0])
            with Tape():
                ad.backward(fn())
            return w0.grad.copy()

        ga = grad_of(loss_motion)
        gb = grad_of(loss_seg)
        gsum = grad_of(lambda: ad.add(loss_motion(), loss_seg()))
        err = np.abs(gsum - (ga + gb)).max() / max(np.abs(gsum).max(), 1e-12)
        assert err <= 1e-6
