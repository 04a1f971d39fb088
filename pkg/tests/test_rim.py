"""Solver architecture, iteration loop, editing hook, and space conversions."""

import numpy as np
import pytest
import torch

from invcomp.compositing import CANONICAL, NETWORK, MattingState, init_state
from invcomp.errors import ContractError, ShapeError
from invcomp.rim import (
    HiddenState,
    IterationConfig,
    RimNet,
    rim_step,
    run_inference,
    to_canonical_space,
    to_network_space,
    zero_hidden,
)


def make_inputs(rng, h, w):
    img = torch.from_numpy(rng.uniform(0, 1, (3, h, w)).astype(np.float32))
    alpha0 = torch.from_numpy(rng.uniform(0, 1, (1, h, w)).astype(np.float32))
    return img, init_state(img, None, alpha0)


class TestArchitecture:
    def test_parameter_count_is_published_value(self):
        assert RimNet(seed=0).parameter_count() == 1_155_680

    def test_component_counts(self):
        net = RimNet(seed=0)
        counts = {n: p.numel() for n, p in net.named_parameters()}
        assert counts["conv_in.weight"] + counts["conv_in.bias"] == 4_064
        gru1 = sum(v for k, v in counts.items() if k.startswith("gru1."))
        gru2 = sum(v for k, v in counts.items() if k.startswith("gru2."))
        assert gru1 == gru2 == 553_344
        assert counts["conv_up.weight"] == 36_864
        assert counts["conv_out.weight"] == 8_064

    @pytest.mark.parametrize("size", [32, 64, 96])
    def test_update_shape_matches_state(self, size):
        rng = np.random.default_rng(size)
        net = RimNet(seed=1)
        img, x0 = make_inputs(rng, size, size)
        x = to_network_space(x0)
        h = HiddenState.zeros(1, size, size)
        dx, h2 = rim_step(img, x, h, net, IterationConfig())
        assert dx.shape == x.x.shape
        assert h2.h1.shape == (1, 128, size // 2, size // 2)
        assert h2.h2.shape == (1, 128, size, size)

    def test_zero_output_layer_freezes_state(self):
        rng = np.random.default_rng(2)
        net = RimNet(seed=1)
        with torch.no_grad():
            net.conv_out.weight.zero_()
        img, x0 = make_inputs(rng, 16, 16)
        traj = run_inference(img, x0, net, IterationConfig(iterations=1))
        assert len(traj) == 2
        assert torch.equal(traj.network_states[0].x, traj.network_states[1].x)

    def test_odd_size_rejected_at_step_level(self):
        rng = np.random.default_rng(3)
        net = RimNet(seed=1)
        img, x0 = make_inputs(rng, 15, 16)
        with pytest.raises(ContractError, match="pad"):
            rim_step(img, to_network_space(x0), HiddenState.zeros(1, 15, 16), net,
                     IterationConfig())

    def test_odd_size_padded_by_run_inference(self):
        rng = np.random.default_rng(4)
        net = RimNet(seed=1)
        img, x0 = make_inputs(rng, 15, 17)
        traj = run_inference(img, x0, net, IterationConfig(iterations=2))
        assert traj.final().x.shape[-2:] == (15, 17)
        assert traj.hidden.h2.shape[-2:] == (15, 17)
        assert traj.hidden.h1.shape[-2:] == (8, 9)


class TestSpaces:
    def test_canonical_half_maps_to_zero(self):
        s = MattingState(torch.full((1, 7, 2, 2), 0.5), CANONICAL)
        assert torch.count_nonzero(to_network_space(s).x) == 0

    def test_round_trip_identity(self):
        rng = np.random.default_rng(5)
        s = MattingState(
            torch.from_numpy(rng.uniform(0, 1, (1, 7, 3, 3)).astype(np.float32)), CANONICAL
        )
        back = to_canonical_space(to_network_space(s))
        assert torch.allclose(back.x, s.x, atol=1e-7)

    def test_out_of_range_clamped(self):
        s = MattingState(torch.full((1, 7, 1, 1), -1.4), NETWORK)
        assert to_canonical_space(s).x.min().item() == 0.0

    def test_wrong_tag_rejected(self):
        s = MattingState(torch.zeros(1, 7, 2, 2), NETWORK)
        with pytest.raises(ContractError):
            to_network_space(s)


class TestRunInference:
    def test_deterministic_across_runs(self):
        rng = np.random.default_rng(6)
        net = RimNet(seed=7)
        img, x0 = make_inputs(rng, 32, 32)
        t1 = run_inference(img, x0, net, IterationConfig())
        t2 = run_inference(img, x0, net, IterationConfig())
        for a, b in zip(t1.network_states, t2.network_states):
            assert torch.equal(a.x, b.x)

    def test_trajectory_length(self):
        rng = np.random.default_rng(7)
        net = RimNet(seed=7)
        img, x0 = make_inputs(rng, 16, 16)
        traj = run_inference(img, x0, net, IterationConfig(iterations=3))
        assert len(traj) == 4

    def test_edit_hook_invoked_each_iteration(self):
        rng = np.random.default_rng(8)
        net = RimNet(seed=7)
        img, x0 = make_inputs(rng, 16, 16)
        seen = []

        def hook(t, state, hidden):
            seen.append(t)
            return None

        run_inference(img, x0, net, IterationConfig(iterations=4), edit_hook=hook)
        assert seen == [1, 2, 3, 4]

    def test_non_finite_update_aborts_with_iteration_index(self):
        rng = np.random.default_rng(11)
        net = RimNet(seed=7)
        with torch.no_grad():
            net.conv_out.weight.fill_(1e30)  # overflow to inf in the first update
        img, x0 = make_inputs(rng, 16, 16)
        from invcomp.errors import NonFiniteError

        with pytest.raises(NonFiniteError, match=r"iteration \d"):
            run_inference(img, x0, net, IterationConfig(iterations=3))

    def test_edit_hook_replacement_used(self):
        rng = np.random.default_rng(9)
        net = RimNet(seed=7)
        img, x0 = make_inputs(rng, 16, 16)

        def hook(t, state, hidden):
            if t == 1:
                return MattingState(torch.zeros_like(state.x), NETWORK), hidden
            return None

        traj = run_inference(img, x0, net, IterationConfig(iterations=2), edit_hook=hook)
        assert torch.count_nonzero(traj.network_states[1].x) == 0


class TestZeroHidden:
    def test_full_mask_zeroes_everything(self):
        h = HiddenState(torch.randn(1, 128, 4, 4), torch.randn(1, 128, 8, 8))
        out = zero_hidden(h, torch.ones(8, 8))
        assert torch.count_nonzero(out.h1) == 0
        assert torch.count_nonzero(out.h2) == 0

    def test_empty_mask_keeps_everything(self):
        h = HiddenState(torch.randn(1, 128, 4, 4), torch.randn(1, 128, 8, 8))
        out = zero_hidden(h, torch.zeros(8, 8))
        assert torch.equal(out.h1, h.h1)
        assert torch.equal(out.h2, h.h2)

    def test_single_pixel_footprint(self):
        h = HiddenState(torch.ones(1, 128, 4, 4), torch.ones(1, 128, 8, 8))
        mask = torch.zeros(8, 8)
        r, c = 5, 2
        mask[r, c] = 1.0
        out = zero_hidden(h, mask)
        zero2 = (out.h2[0, 0] == 0).nonzero()
        assert zero2.tolist() == [[r, c]]
        zero1 = (out.h1[0, 0] == 0).nonzero()
        assert zero1.tolist() == [[r // 2, c // 2]]

    def test_mask_shape_mismatch(self):
        h = HiddenState(torch.ones(1, 128, 4, 4), torch.ones(1, 128, 8, 8))
        with pytest.raises(ShapeError):
            zero_hidden(h, torch.zeros(6, 6))


class TestEditPropagation:
    def test_zeroed_region_behaves_like_fresh_state(self):
        # deep inside the zeroed mask the next step must match a fresh hidden state
        rng = np.random.default_rng(10)
        net = RimNet(seed=3)
        img, x0 = make_inputs(rng, 48, 48)
        config = IterationConfig(iterations=2)
        traj = run_inference(img, x0, net, config)
        x, h = traj.network_states[-1], traj.hidden

        mask = torch.zeros(48, 48)
        mask[8:40, 8:40] = 1.0
        dx_zeroed, _ = rim_step(img, x, zero_hidden(h, mask), net, config)
        dx_fresh, _ = rim_step(img, x, HiddenState.zeros(1, 48, 48), net, config)
        # one-step h-influence radius is <= 5 px; compare deeper inside than that
        inner = (slice(None), slice(None), slice(14, 34), slice(14, 34))
        assert torch.allclose(dx_zeroed[inner], dx_fresh[inner], atol=1e-6)
