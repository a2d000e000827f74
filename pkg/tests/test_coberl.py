import math

import pytest
import torch
import torch.nn.functional as F

from app.core.config import RunConfig
from app.core.errors import ConfigurationError, HarnessError, InputError
from app.models.coberl import AgentState, CoBERLCore, build_network, combine, dueling_q
from app.models.gates import GRUGate, gru_gate


@pytest.fixture
def core(float64):
    torch.manual_seed(0)
    return CoBERLCore(d_model=16, d_lstm=8)


class TestGate:
    """Tests for the GRU-type gate between Y and X"""

    def test_large_bias_is_identity(self, float64):
        """With b_g = 1e9 the gate passes Y through untouched"""
        gate = GRUGate(16, bias=1e9)
        y, x = torch.randn(3, 16), torch.randn(3, 16)

        assert torch.equal(gate(y, x), y)

    def test_zero_weights_zero_bias_halves(self, float64):
        """All-zero weights and b_g = 0 give 0.5 * Y"""
        gate = GRUGate(16, bias=0.0, zero_weights=True)
        y, x = torch.randn(3, 16), torch.randn(3, 16)

        assert torch.allclose(gate(y, x), 0.5 * y)

    def test_combine_at_initialization(self, core):
        """The core's gate starts at Z = (1 - sigmoid(-2)) * Y = 0.88080 * Y"""
        y = torch.randn(2, 5, 16)
        z = core.combine(y, torch.randn(2, 5, 16))

        expected = 1 - 1 / (1 + math.exp(2.0))
        assert expected == pytest.approx(0.88080, abs=1e-5)
        assert torch.allclose(z, expected * y)

    def test_output_between_y_and_candidate(self, float64):
        """Each coordinate of g lies between y and the candidate h = tanh(W_g x + U_g(r * y))"""
        torch.manual_seed(3)
        for _ in range(10):
            gate = GRUGate(4, bias=float(torch.empty(()).uniform_(-3, 3)))
            with torch.no_grad():
                gate.b_g.add_(torch.randn(4))
            y, x = 3 * torch.randn(10_000, 4), 3 * torch.randn(10_000, 4)

            with torch.no_grad():
                out = gate(y, x)
                p = gate.params
                r = torch.sigmoid(F.linear(x, p.W_r) + F.linear(y, p.U_r))
                h = torch.tanh(F.linear(x, p.W_g) + F.linear(r * y, p.U_g))

            assert (out >= torch.minimum(y, h) - 1e-12).all()
            assert (out <= torch.maximum(y, h) + 1e-12).all()

    def test_combine_is_position_wise(self, float64):
        """Permuting time steps permutes the combined sequence the same way"""
        torch.manual_seed(4)
        gate = GRUGate(16)
        y, x = torch.randn(1, 6, 16), torch.randn(1, 6, 16)
        order = torch.tensor([3, 0, 5, 1, 4, 2])

        permuted = combine(y[:, order], x[:, order], gate.params)

        assert torch.allclose(permuted, combine(y, x, gate.params)[:, order])

    def test_combine_length_mismatch(self, float64):
        """Y and X must have the same length"""
        gate = GRUGate(16)
        with pytest.raises(InputError):
            combine(torch.randn(1, 5, 16), torch.randn(1, 4, 16), gate.params)

    def test_gate_width_mismatch(self, float64):
        """Gate inputs must match the gate width"""
        gate = GRUGate(16)
        with pytest.raises(ConfigurationError):
            gru_gate(torch.randn(2, 8), torch.randn(2, 8), gate.params)


class TestCore:
    """Tests for the LSTM core and skip connection"""

    def test_split_unroll_matches_whole(self, core):
        """Two 3-step unrolls with carried state equal one 6-step unroll"""
        network_state = AgentState(torch.zeros(2, 8), torch.zeros(2, 8), None)
        y, x = torch.randn(2, 6, 16), torch.randn(2, 6, 16)

        whole, whole_state = core(y, x, network_state)
        first, mid_state = core(y[:, :3], x[:, :3], network_state)
        second, end_state = core(y[:, 3:], x[:, 3:], mid_state)

        assert torch.allclose(torch.cat([first, second], dim=1), whole, atol=1e-12)
        assert torch.allclose(end_state.lstm_hidden, whole_state.lstm_hidden, atol=1e-12)
        assert torch.allclose(end_state.lstm_cell, whole_state.lstm_cell, atol=1e-12)

    def test_output_carries_skip_connection(self, core):
        """The head input is [LSTM(Z) ∥ Y]"""
        y = torch.randn(1, 4, 16)
        output, _ = core(y, torch.randn(1, 4, 16), AgentState(torch.zeros(1, 8), torch.zeros(1, 8), None))

        assert output.shape == (1, 4, 24)
        assert torch.equal(output[..., 8:], y)

    def test_forget_bias(self, core):
        """The LSTM forget gate bias starts at one"""
        bias = core.lstm.bias_ih + core.lstm.bias_hh

        assert torch.equal(bias[8:16], torch.ones(8))
        assert torch.count_nonzero(bias[:8]) == 0

    def test_desk_output_width(self):
        """Desk sizes: 64 LSTM units plus the 64-wide skip connection"""
        assert CoBERLCore(d_model=64, d_lstm=64).output_width == 128

    @pytest.mark.parametrize(
        "gate,use_lstm,width",
        [("sum", True, 8), ("concat", True, 8), ("none", True, 8), ("gru", False, 16), ("concat", False, 32)],
    )
    def test_variant_widths(self, float64, gate, use_lstm, width):
        """Ablation variants change the recurrent width and skip connection"""
        core = CoBERLCore(d_model=16, d_lstm=8, gate=gate, use_lstm=use_lstm)
        skip = 0 if gate == "none" else 16
        assert core.output_width == width + skip

    def test_unknown_gate(self):
        """Unknown gate variants are configuration errors"""
        with pytest.raises(ConfigurationError):
            CoBERLCore(d_model=16, d_lstm=8, gate="mean")


class TestDuelingHead:
    """Tests for the value/advantage decomposition"""

    def test_known_values(self):
        """V = 1, A = [0, 2] gives Q = [0, 2]"""
        q = dueling_q(torch.tensor([1.0]), torch.tensor([0.0, 2.0]))
        assert q.tolist() == [0.0, 2.0]

    def test_advantage_shift_invariance(self, float64):
        """Adding a constant to every advantage leaves Q unchanged"""
        value, advantage = torch.randn(4, 1), torch.randn(4, 3)
        assert torch.allclose(dueling_q(value, advantage), dueling_q(value, advantage + 7.5))


class TestNetwork:
    """Tests for the assembled network"""

    def test_act_shapes(self, tiny_network):
        """act() maps a batch of observations to Q values and a new state"""
        state = tiny_network.initial_state(3)
        q, new_state = tiny_network.act(
            torch.rand(3, 3, 3, 3), torch.zeros(3, dtype=torch.long), torch.zeros(3), state
        )

        assert q.shape == (3, 2)
        assert new_state.batch_size == 3
        assert new_state.memory.valid[:, -1].all()

    def test_mask_token_forbidden_while_acting(self, tiny_network):
        """Masking inside the acting context raises HarnessError"""
        inputs = torch.randn(1, 8, 16)
        with tiny_network.acting():
            with pytest.raises(HarnessError):
                tiny_network.mask_inputs(inputs)
        assert tiny_network.mask_token_uses == 0

        tiny_network.mask_inputs(inputs)
        assert tiny_network.mask_token_uses == 1

    def test_state_stack_round_trip(self, tiny_network):
        """unstack() splits a batched state into equal batch-1 states"""
        states = [tiny_network.initial_state(1) for _ in range(3)]
        stacked = AgentState.stack(states)

        assert stacked.batch_size == 3
        assert all(a.equals(b) for a, b in zip(stacked.unstack(), states))

    def test_critic_only_with_contrastive(self, float64, tiny_config):
        """Disabling the auxiliary loss removes the critic"""
        config = tiny_config.override(contrastive={"enabled": False})
        network = build_network(config, n_actions=2)

        assert network.critic is None
        with pytest.raises(ConfigurationError):
            network.critic_embed(torch.randn(2, 16))

    def test_zero_mask_token(self, float64, tiny_config):
        """mask_token=zero registers a fixed zero buffer"""
        network = build_network(tiny_config.override(contrastive={"mask_token": "zero"}), n_actions=2)

        assert "mask_token" not in dict(network.named_parameters())
        assert torch.count_nonzero(network.mask_token) == 0

    def test_precision(self, tiny_config):
        """build_network honours numerics.dtype"""
        network = build_network(RunConfig.desk().override(env={"obs_shape": (3, 3, 3)}), n_actions=2)
        assert network.dtype == torch.float32
        assert build_network(tiny_config, n_actions=2).dtype == torch.float64
