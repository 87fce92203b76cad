"""Tests for shared/private token routing and quantization."""

import math

import numpy as np
import pytest

from h2dilr.autodiff import Graph, Parameter, Tensor, ops
from h2dilr.autodiff.gradcheck import numeric_gradient, relative_error
from h2dilr.core.errors import RoutingError, SubjectError
from h2dilr.models.config import H2DConfig, Paradigm
from h2dilr.networks.convnet import SubjectNetworks
from h2dilr.quantization.codebook import quantize
from h2dilr.quantization.h2d import H2DState, h2d_loss, h2d_quantize, h2d_step, n_shared, partition
from h2dilr.services.optim import AdamW


def make_state(rng):
    """One subject, a 3-code shared book and a 3-code private book with spread-out codes."""
    state = H2DState.create(H2DConfig(k_private=3, code_dim=4, nu=0.5), [0], seed=0)
    state.shared.codes.data = rng.normal(size=(3, 4))
    state.privates[0].codes.data = rng.normal(size=(3, 4))
    return state


@pytest.fixture
def state(rng):
    return make_state(rng)


def scalar_state(shared, private):
    """One-dimensional books with a single code each."""
    state = H2DState.create(H2DConfig(k_private=1, code_dim=1, nu=0.5), [0], seed=0)
    state.shared.codes.data = np.array([[shared]])
    state.privates[0].codes.data = np.array([[private]])
    return state


def full_sort_mask(z, codes, nu):
    """Reference routing: sort every token by distance and take the first n_shared."""
    distances = np.linalg.norm(z[:, None, :] - codes[None, :, :], axis=-1).min(axis=1)
    order = sorted(range(len(distances)), key=lambda j: (distances[j], j))
    mask = np.zeros(len(distances), dtype=bool)
    mask[order[: n_shared(nu, len(distances))]] = True
    return mask


def snapshot(networks, state):
    """Copies of every network tensor, codebook and shared EMA statistic."""
    arrays = [p.data.copy() for p in networks.parameters() + state.parameters()]
    return arrays + [state.shared.ema_cluster_size.copy(), state.shared.ema_embed_sum.copy()]


class TestNShared:
    """Tests for the shared-token count."""

    def test_reference_lengths(self):
        """Round half up at the default token count."""
        assert [n_shared(nu, 62) for nu in (0.0, 0.25, 0.5, 0.75, 1.0)] == [0, 16, 31, 47, 62]

    def test_all_lengths(self):
        """floor(nu * L + 0.5) for L in 1..64."""
        for length in range(1, 65):
            for nu in (0.0, 0.25, 0.5, 0.75, 1.0):
                assert n_shared(nu, length) == math.floor(nu * length + 0.5)

    def test_out_of_range(self):
        """nu outside [0, 1] is rejected."""
        with pytest.raises(ValueError):
            n_shared(1.5, 10)


class TestPartition:
    """Tests for rank-based routing."""

    def test_matches_full_sort(self, rng, state):
        """Routing agrees with a full sort for every length and nu."""
        codes = state.shared.codes.data
        for length in range(1, 65):
            z = rng.normal(size=(length, 4))
            for nu in (0.0, 0.25, 0.5, 0.75, 1.0):
                routing = partition(z, state.shared, nu)
                np.testing.assert_array_equal(routing.shared_mask, full_sort_mask(z, codes, nu))
                assert int(routing.shared_mask.sum()) == n_shared(nu, length)

    def test_worked_example(self):
        """Closest half of the tokens go to the shared book; rank is 1-based."""
        state = H2DState.create(H2DConfig(k_private=1, code_dim=1, nu=0.5), [0], seed=0)
        state.shared.codes.data = np.zeros((1, 1))
        routing = partition(np.array([[3.0], [1.0], [2.0], [0.0]]), state.shared, 0.5)
        assert routing.rank.tolist() == [4, 2, 3, 1]
        assert routing.shared_mask.tolist() == [False, True, False, True]
        assert routing.n_private == 2

    def test_distance_ties_keep_token_order(self):
        """Equal distances rank in token order."""
        state = H2DState.create(H2DConfig(k_private=1, code_dim=1, nu=0.5), [0], seed=0)
        state.shared.codes.data = np.zeros((1, 1))
        routing = partition(np.array([[1.0], [-1.0], [1.0], [-1.0]]), state.shared, 0.5)
        assert routing.shared_mask.tolist() == [True, True, False, False]

    def test_batch_rows_are_independent(self, rng, state):
        """Each sequence of a batch is ranked on its own."""
        z = rng.normal(size=(3, 7, 4))
        batched = partition(z, state.shared, 0.5)
        for i in range(3):
            single = partition(z[i], state.shared, 0.5)
            np.testing.assert_array_equal(batched.shared_mask[i], single.shared_mask)
            np.testing.assert_array_equal(batched.rank[i], single.rank)

    def test_no_shared_book(self, rng):
        """Without a shared book only nu = 0 routes."""
        z = rng.normal(size=(5, 4))
        assert partition(z, None, 0.0).n_private == 5
        with pytest.raises(RoutingError):
            partition(z, None, 0.5)


class TestQuantize:
    """Tests for h2d_quantize."""

    def test_membership(self, rng, state):
        """Shared tokens take shared codes, private tokens their nearest private code."""
        z = Tensor(rng.normal(size=(2, 6, 4)))
        quantized = h2d_quantize(z, partition(z.data, state.shared, 0.5), state, 0)
        routing = quantized.routing
        shared_codes, private_codes = state.shared.codes.data, state.privates[0].codes.data
        for i, j in zip(*np.nonzero(routing.shared_mask)):
            np.testing.assert_array_equal(quantized.z_hat.data[i, j], shared_codes[routing.shared_index[i, j]])
        for i, j in zip(*np.nonzero(routing.private_mask)):
            nearest = np.argmin(np.linalg.norm(private_codes - z.data[i, j], axis=1))
            assert routing.private_index[i, j] == nearest
            np.testing.assert_array_equal(quantized.z_hat.data[i, j], private_codes[nearest])
        np.testing.assert_array_equal(quantized.straight_through.data, quantized.z_hat.data)

    def test_usage_counts(self, rng, state):
        """Each book counts exactly the tokens routed to it."""
        z = Tensor(rng.normal(size=(2, 6, 4)))
        h2d_quantize(z, partition(z.data, state.shared, 0.5), state, 0)
        assert state.shared.usage_count.sum() == 6
        assert state.privates[0].usage_count.sum() == 6

    def test_all_shared_is_plain_quantize(self, rng, state):
        """nu = 1 quantizes exactly like the shared book on its own."""
        z = Tensor(rng.normal(size=(2, 6, 4)))
        quantized = h2d_quantize(z, partition(z.data, state.shared, 1.0), state, 0, count=False)
        expected = quantize(z.data, state.shared, count=False)
        np.testing.assert_array_equal(quantized.z_hat.data, expected.quantized)
        np.testing.assert_array_equal(quantized.routing.shared_index, expected.indices)
        assert quantized.routing.n_private == 0

    def test_all_private_is_plain_quantize(self, rng, state):
        """nu = 0 quantizes exactly like the subject's private book on its own."""
        z = Tensor(rng.normal(size=(2, 6, 4)))
        quantized = h2d_quantize(z, partition(z.data, state.shared, 0.0), state, 0, count=False)
        expected = quantize(z.data, state.privates[0], count=False)
        np.testing.assert_array_equal(quantized.z_hat.data, expected.quantized)
        np.testing.assert_array_equal(quantized.routing.private_index, expected.indices)

    def test_unknown_subject(self, rng, state):
        """Private tokens need the subject's private book."""
        z = Tensor(rng.normal(size=(6, 4)))
        with pytest.raises(SubjectError):
            h2d_quantize(z, partition(z.data, state.shared, 0.5), state, 9)

    def test_routing_shape_mismatch(self, rng, state):
        """Routing must cover the latents."""
        z = Tensor(rng.normal(size=(6, 4)))
        with pytest.raises(RoutingError):
            h2d_quantize(z, partition(z.data[:5], state.shared, 0.5), state, 0)


class TestLoss:
    """Tests for h2d_loss gradients."""

    @pytest.mark.parametrize("seed", range(100))
    def test_gradients_match_stop_gradient_surrogates(self, seed):
        """Each learnable input gets the finite-difference gradient of its own term."""
        rng = np.random.default_rng(seed)
        state = make_state(rng)
        z = Parameter(rng.normal(size=(2, 6, 4)))
        x, x_hat = Tensor(rng.normal(size=(2, 5, 3))), Parameter(rng.normal(size=(2, 5, 3)))
        codes = state.privates[0].codes
        with Graph():
            quantized = h2d_quantize(z, partition(z.data, state.shared, 0.5), state, 0, count=False)
            h2d_loss(x, x_hat, z, quantized.z_hat, quantized.routing, 0.25).total.backward()
        mask = quantized.routing.private_mask
        rows = quantized.routing.private_index[mask]
        frozen_z_hat, frozen_private = quantized.z_hat.data.copy(), z.data[mask].copy()

        numeric = numeric_gradient(lambda: ops.scale(ops.mse(z, Tensor(frozen_z_hat)), 0.25), z)
        assert relative_error(z.grad, numeric) < 1e-4
        numeric = numeric_gradient(lambda: ops.mse(Tensor(frozen_private), ops.take_rows(codes, rows)), codes)
        assert relative_error(codes.grad, numeric) < 1e-4
        numeric = numeric_gradient(lambda: ops.mse(x, x_hat), x_hat)
        assert relative_error(x_hat.grad, numeric) < 1e-4
        assert state.shared.codes.grad is None

    def test_hand_instance(self):
        """Two 1-D tokens, one per book, against hand-computed terms."""
        state = scalar_state(shared=0.0, private=2.0)
        z = Tensor(np.array([[0.5], [3.0]]))
        quantized = h2d_quantize(z, partition(z.data, state.shared, 0.5), state, 0, count=False)
        assert quantized.routing.shared_mask.tolist() == [True, False]
        np.testing.assert_array_equal(quantized.z_hat.data, [[0.0], [2.0]])
        x, x_hat = Tensor(np.array([1.0, 2.0])), Tensor(np.array([1.0, 4.0]))
        losses = h2d_loss(x, x_hat, z, quantized.z_hat, quantized.routing, 0.25)
        assert losses.rec.item() == pytest.approx(2.0, abs=1e-12)
        assert losses.pri.item() == pytest.approx(1.0, abs=1e-12)
        assert losses.commit.item() == pytest.approx(0.625, abs=1e-12)
        assert losses.total.item() == pytest.approx(3.15625, abs=1e-12)

    def test_total_is_linear_in_beta(self, rng, state):
        """total == rec + pri + beta * commit for every beta."""
        z = Tensor(rng.normal(size=(2, 6, 4)))
        x, x_hat = Tensor(rng.normal(size=(2, 5, 3))), Tensor(rng.normal(size=(2, 5, 3)))
        quantized = h2d_quantize(z, partition(z.data, state.shared, 0.5), state, 0, count=False)
        for beta in (0.0, 0.1, 0.25, 1.0, 3.0):
            losses = h2d_loss(x, x_hat, z, quantized.z_hat, quantized.routing, beta)
            expected = losses.rec.item() + losses.pri.item() + beta * losses.commit.item()
            assert losses.total.item() == pytest.approx(expected, abs=1e-12)

    def test_all_shared_has_no_private_term(self, rng, state):
        """nu = 1 leaves pri at zero."""
        z = Tensor(rng.normal(size=(6, 4)))
        x = Tensor(rng.normal(size=(2, 3)))
        quantized = h2d_quantize(z, partition(z.data, state.shared, 1.0), state, 0, count=False)
        losses = h2d_loss(x, x, z, quantized.z_hat, quantized.routing, 0.25)
        assert losses.pri.item() == 0.0
        assert losses.total.item() == pytest.approx(0.25 * losses.commit.item(), abs=1e-12)

    def test_straight_through_contract(self, rng, state):
        """Gradient through quantization equals the gradient with quantization removed."""
        z = Parameter(rng.normal(size=(2, 6, 4)))
        w = Tensor(rng.normal(size=(2, 6, 4)))
        with Graph():
            quantized = h2d_quantize(z, partition(z.data, state.shared, 0.5), state, 0, count=False)
            ops.sum(ops.mul(quantized.straight_through, w)).backward()
        through = z.grad.copy()
        with Graph():
            ops.sum(ops.mul(z, w)).backward()
        np.testing.assert_allclose(through, z.grad, rtol=0, atol=1e-10)

    def test_unfilled_private_indices(self, rng, state):
        """Loss needs the routing returned by h2d_quantize."""
        z = Tensor(rng.normal(size=(6, 4)))
        x = Tensor(np.zeros((2, 2)))
        with pytest.raises(RoutingError):
            h2d_loss(x, x, z, z, partition(z.data, state.shared, 0.5), 0.25)


class TestState:
    """Tests for codebook construction per paradigm."""

    def test_h2d_sizes(self):
        """Shared book holds m * K codes, each private book K."""
        state = H2DState.create(H2DConfig(k_private=4, code_dim=2), [0, 1, 2], seed=0)
        assert state.shared.size == 12
        assert sorted(state.privates) == [0, 1, 2]
        assert all(book.size == 4 for book in state.privates.values())
        assert state.total_codes == 24
        assert list(state.codebooks())[0] == "codebook.shared"

    def test_upant(self):
        """A single shared book of 2 * m * K codes and nu forced to 1."""
        state = H2DState.create(H2DConfig(k_private=4, code_dim=2, nu=0.3, paradigm=Paradigm.UPANT), [0, 1], seed=0)
        assert state.shared.size == 16
        assert state.privates == {}
        assert state.nu == 1.0

    def test_heterogeneous(self):
        """No shared book, private books of 2 * K codes and nu forced to 0."""
        config = H2DConfig(k_private=4, code_dim=2, paradigm=Paradigm.HETEROGENEOUS)
        state = H2DState.create(config, [0, 1], seed=0)
        assert state.shared is None
        assert all(book.size == 8 for book in state.privates.values())
        assert state.nu == 0.0

    def test_shared_init_independent_of_paradigm(self):
        """Equal-size shared books start identical under h2d and upant."""
        h2d = H2DState.create(H2DConfig(k_private=4, code_dim=2), [0, 1], seed=3)
        upant = H2DState.create(
            H2DConfig(k_private=4, code_dim=2, paradigm=Paradigm.UPANT, upant_codebook_size=8), [0, 1], seed=3
        )
        np.testing.assert_array_equal(h2d.shared.codes.data, upant.shared.codes.data)

    def test_unknown_private(self):
        """Asking for an unregistered subject fails."""
        state = H2DState.create(H2DConfig(), [0], seed=0)
        with pytest.raises(SubjectError):
            state.private(5)


class TestStep:
    """Tests for one stage-1 step."""

    @pytest.fixture
    def setup(self, tiny_config):
        networks = SubjectNetworks({0: tiny_config.encoder_config(4), 1: tiny_config.encoder_config(6)}, seed=0)
        state = H2DState.create(tiny_config.h2d, [0, 1], seed=0)
        return networks, state, AdamW()

    def test_step_touches_only_its_subject(self, setup, tiny_datasets):
        """Subject 0's step leaves subject 1's networks and private book untouched."""
        networks, state, optimizer = setup
        before_other = {p.name: p.data.copy() for p in networks.parameters(1)}
        before_private = state.privates[1].codes.data.copy()
        before_own = {p.name: p.data.copy() for p in networks.parameters(0)}
        before_shared = state.shared.codes.data.copy()

        metrics = h2d_step(tiny_datasets[0].samples[:4], state, networks, optimizer, lr=1e-3)

        assert all(np.isfinite([metrics.total, metrics.rec, metrics.pri, metrics.commit]))
        for p in networks.parameters(1):
            np.testing.assert_array_equal(p.data, before_other[p.name])
        np.testing.assert_array_equal(state.privates[1].codes.data, before_private)
        assert any(not np.array_equal(p.data, before_own[p.name]) for p in networks.parameters(0))
        assert not np.array_equal(state.shared.codes.data, before_shared)

    def test_nu_zero_never_touches_shared(self, setup, tiny_datasets):
        """With nu = 0 the shared book is neither used nor updated."""
        networks, state, optimizer = setup
        state.nu = 0.0
        before = state.shared.codes.data.copy()
        h2d_step(tiny_datasets[0].samples[:4], state, networks, optimizer, lr=1e-3)
        np.testing.assert_array_equal(state.shared.codes.data, before)
        assert state.shared.usage_count.sum() == 0

    def test_zero_lr_with_frozen_ema_changes_nothing(self, setup, tiny_datasets):
        """Two identical steps at lr = 0 without the EMA update leave every tensor alone."""
        networks, state, optimizer = setup
        batch = tiny_datasets[0].samples[:4]
        before = snapshot(networks, state)
        first = h2d_step(batch, state, networks, optimizer, lr=0.0, update_shared=False)
        second = h2d_step(batch, state, networks, optimizer, lr=0.0, update_shared=False)
        for a, b in zip(before, snapshot(networks, state)):
            np.testing.assert_array_equal(a, b)
        assert first.total == second.total

    @pytest.mark.parametrize("lr", [1e-6, 1e-5])
    def test_small_step_lowers_the_loss(self, setup, tiny_datasets, lr):
        """One small step on a fixed batch strictly decreases the total loss."""
        networks, state, optimizer = setup
        batch = tiny_datasets[0].samples[:4]
        before = h2d_step(batch, state, networks, optimizer, lr=lr, update_shared=False).total
        after = h2d_step(batch, state, networks, AdamW(), lr=0.0, update_shared=False).total
        assert after < before

    def test_reseed_uses_worst_fit_token_of_the_batch(self, setup, tiny_datasets):
        """A dead shared code moves onto the farthest latent, which routing sent to the private book."""
        networks, state, optimizer = setup
        state.reseed_after = 1
        state.shared.codes.data[-1] = 1e3
        batch = tiny_datasets[0].samples[:4]
        z = networks.encode(Tensor(np.stack([s.signal for s in batch])), 0).data
        routing = partition(z, state.shared, state.nu)
        used = set(routing.shared_index[routing.shared_mask].tolist())
        dead = [k for k in range(state.shared.size) if k not in used]
        worst = int(np.argmax(routing.shared_distance.reshape(-1)))
        assert not routing.shared_mask.reshape(-1)[worst]

        h2d_step(batch, state, networks, optimizer, lr=1e-3)

        np.testing.assert_array_equal(state.shared.codes.data[dead[0]], z.reshape(-1, z.shape[-1])[worst])
        assert state.shared.unused_steps[dead[0]] == 0

    def test_mixed_batch(self, setup, tiny_datasets):
        """Batches must come from one subject."""
        networks, state, optimizer = setup
        batch = [tiny_datasets[0].samples[0], tiny_datasets[1].samples[0]]
        with pytest.raises(SubjectError):
            h2d_step(batch, state, networks, optimizer, lr=1e-3)
