import numpy as np
import pytest

from pesimt import numerics as nx
from pesimt.corpus import collate, SentencePair
from pesimt.model import (
    EOS, IncrementalEncoder, Model, route_capsules, translation_degree,
)

from conftest import micro_config, small_config


def naive_routing(z, h, W, U, g, iters):
    """Loop-by-loop dynamic routing with materialised votes."""
    I, K = z.shape[0], W.shape[0]
    u = np.array([[W[j].T @ z[i] + U.T @ h for j in range(K)] for i in range(g)])
    b = np.zeros((g, K))
    trace = []
    for _ in range(iters):
        c = np.exp(b - b.max(1, keepdims=True))
        c /= c.sum(1, keepdims=True)
        trace.append(c.copy())
        s = np.einsum("ik,ikc->kc", c, u)
        n2 = (s ** 2).sum(1, keepdims=True)
        phi = n2 / (1 + n2) * s / np.sqrt(n2)
        b = b + np.einsum("kc,ikc->ik", phi, u)
    full = np.zeros((I, K))
    full[:g] = c
    return full, phi, trace


@pytest.mark.parametrize("g", [1, 3, 6])
def test_routing_matches_naive_oracle(g, rng):
    model = Model(micro_config(), seed=5)
    z = rng.normal(size=(6, 8))
    h = rng.normal(size=8)
    caps = route_capsules(model, z, h, g, record=True)
    c, phi, trace = naive_routing(z, h, model["caps.W"].data, model["caps.U"].data, g, 3)
    np.testing.assert_allclose(caps.c, c, atol=1e-12)
    np.testing.assert_allclose(caps.phi.data, phi, atol=1e-12)
    for got, want in zip(caps.history, trace):
        np.testing.assert_allclose(got[:g], want, atol=1e-12)
        assert np.all(got[g:] == 0.0)
    np.testing.assert_allclose(translation_degree(caps), c[:, :2].sum(1), atol=1e-12)


def test_route_capsules_rejects_bad_g(micro_model, rng):
    z = rng.normal(size=(4, 8))
    with pytest.raises(ValueError):
        route_capsules(micro_model, z, rng.normal(size=8), 0)
    with pytest.raises(ValueError):
        route_capsules(micro_model, z, rng.normal(size=8), 5)


def test_routing_batch_equals_single_steps(rng):
    model = Model(micro_config(), seed=2)
    z = rng.normal(size=(1, 5, 8))
    h = rng.normal(size=(1, 3, 8))
    g = np.array([[1, 3, 5]])
    caps = model.route(nx.Tensor(z), nx.Tensor(h), g)
    for t in range(3):
        one = model.route_step(z[0], h[0, t], int(g[0, t]))
        np.testing.assert_allclose(caps.c[0, t], one.c, atol=1e-12)


def test_incremental_encoder_is_bit_exact(small_model, rng):
    for _ in range(5):
        ids = list(rng.integers(4, 30, size=rng.integers(1, 15))) + [EOS]
        enc = IncrementalEncoder(small_model)
        for tok in ids:
            inc = enc.append(tok)
        full = small_model.encode(np.array([ids])).data[0]
        assert np.abs(inc - full).max() == 0.0


def test_incremental_encoder_contract(small_model):
    enc = IncrementalEncoder(small_model, limit=2)
    enc.append(5)
    enc.append(6)
    with pytest.raises(ValueError):
        enc.append(7)
    enc = IncrementalEncoder(small_model)
    enc.append(EOS)
    with pytest.raises(ValueError):
        enc.append(5)


def test_decoder_availability_is_respected(small_model, rng):
    src = np.array([[5, 6, 7, 8, EOS]])
    z = small_model.encode(src)
    h1 = small_model.decode(np.array([[1, 9]]), z, np.array([[2, 2]])).data
    # changing unseen source states must not move the decoder states
    z2 = z.data.copy()
    z2[0, 2:] += 10.0
    h2 = small_model.decode(np.array([[1, 9]]), nx.Tensor(z2), np.array([[2, 2]])).data
    np.testing.assert_allclose(h1, h2, atol=1e-12)
    with pytest.raises(ValueError):
        small_model.decode(np.array([[1]]), z, np.array([[0]]))
    with pytest.raises(ValueError):
        small_model.decode(np.array([[1]]), z, np.array([[6]]))


def test_decode_step_matches_batch_decode(small_model):
    src = np.array([[5, 6, 7, EOS]])
    z = small_model.encode(src)
    g = np.array([2, 3, 4])
    h = small_model.decode(np.array([[1, 9, 10]]), z, g[None]).data[0, -1]
    h_step, logits = small_model.decode_step([9, 10], z.data[0], g)
    np.testing.assert_allclose(h_step, h, atol=1e-10)
    assert logits.shape == (30,)


def test_checkpoint_round_trip(tmp_path, small_model):
    path = tmp_path / "m.npz"
    small_model.save(path)
    loaded = Model.load(path)
    assert loaded.config == small_model.config
    for k, v in small_model.params.items():
        assert np.array_equal(loaded.params[k].data, v.data)


def test_padding_gives_no_embedding_gradient():
    model = Model(micro_config(), seed=0)
    from pesimt.training import TrainConfig, batch_losses
    from pesimt.paths import full_path
    batch = collate([SentencePair([4, 5, 6], [4, 5, 6, 7]), SentencePair([7], [8])])
    paths = [full_path(int(I), int(M)) for I, M in zip(batch.src_len, batch.tgt_len)]
    loss = batch_losses(model, batch, paths, TrainConfig()).total.sum()
    loss.backward()
    assert np.all(model["src_embed"].grad[0] == 0.0)
    assert np.all(model["tgt_embed"].grad[0] == 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(d_model=10, heads=4)
    with pytest.raises(ValueError):
        micro_config(routing_iters=0)
