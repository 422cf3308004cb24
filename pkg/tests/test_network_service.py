import numpy as np
import pytest

from src.schemas.config import EncoderSpec, HeadKind
from src.services.network_service import (
    Encoder,
    MixingNet,
    apply_head,
    build_mixing,
    encoder_forward,
    init_encoder,
    load_checkpoint,
    mixing_forward,
    mixing_invert,
    predict,
    save_checkpoint,
)
from src.utils import diffgraph as dg
from src.utils.linalg import condition_number

SMALL = EncoderSpec(hidden=(2, 3, 2))


def test_cond_cap_one_gives_scaled_orthogonal(rng):
    g = build_mixing(6, 1.0, rng)
    for w in g.weights:
        gram = w.T @ w
        assert np.linalg.norm(gram - gram[0, 0] * np.eye(6)) < 1e-9


def test_condition_number_is_capped(rng):
    g = build_mixing(10, 6.0, rng)
    assert len(g.weights) == 3
    for w in g.weights:
        assert condition_number(w) <= 6.0 + 1e-9


def test_mixing_is_deterministic():
    a = build_mixing(5, 4.0, np.random.default_rng(11))
    b = build_mixing(5, 4.0, np.random.default_rng(11))
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)


def test_identity_mixing_on_nonnegative_inputs(rng):
    z = rng.random((50, 4))
    assert np.array_equal(mixing_forward(MixingNet.identity(4), z), z)


def test_mixing_round_trip(rng):
    g = build_mixing(10, 6.0, rng)
    z = rng.standard_normal((10_000, 10))
    x = mixing_forward(g, z)
    assert np.max(np.abs(mixing_invert(g, x) - z)) <= 1e-6
    assert np.array_equal(mixing_invert(g, mixing_forward(g, np.zeros((1, 10)))), np.zeros((1, 10)))


def test_mixing_is_injective_on_a_batch(rng):
    g = build_mixing(10, 6.0, rng)
    x = mixing_forward(g, rng.standard_normal((2000, 10)))
    sq = np.sum(x * x, axis=1)
    distances = sq[:, None] + sq[None, :] - 2 * x @ x.T
    np.fill_diagonal(distances, np.inf)
    assert distances.min() > 0


def test_mixing_with_biases_and_embedding(rng):
    g = build_mixing(4, 5.0, rng, out_dim=7, bias_scale=0.3)
    z = rng.standard_normal((300, 4))
    x = mixing_forward(g, z)
    assert x.shape == (300, 7)
    assert np.allclose(g.embedding.T @ g.embedding, np.eye(4), atol=1e-12)
    assert np.max(np.abs(mixing_invert(g, x) - z)) <= 1e-6


def test_build_mixing_rejects_bad_arguments(rng):
    with pytest.raises(ValueError):
        build_mixing(1, 6.0, rng)
    with pytest.raises(ValueError):
        build_mixing(4, 0.5, rng)
    with pytest.raises(ValueError):
        build_mixing(4, 6.0, rng, out_dim=3)


def test_encoder_default_widths(rng):
    f = init_encoder(10, 10, HeadKind.SPHERE_L2, rng)
    assert [w.shape for w in f.weights] == [
        (100, 10), (500, 100), (500, 500), (500, 500), (500, 500), (100, 500), (10, 100),
    ]
    assert f.magnitude[0, 0] == 1.0
    assert np.all(np.abs(f.weights[0]) <= 1 / np.sqrt(10))


@pytest.mark.parametrize("head, norm", [(HeadKind.SPHERE_L2, 2), (HeadKind.BOX_LINF, np.inf)])
def test_normalized_heads(head, norm, rng):
    f = init_encoder(5, 3, head, rng, SMALL)
    out = predict(f, rng.standard_normal((40, 5)))
    assert np.allclose(np.linalg.norm(out, ord=norm, axis=1), 1.0, atol=1e-9)


def test_magnitude_scales_the_head(rng):
    f = init_encoder(5, 3, HeadKind.SPHERE_L2, rng, SMALL)
    f.magnitude[0, 0] = 2.5
    out = predict(f, rng.standard_normal((10, 5)))
    assert np.allclose(np.linalg.norm(out, axis=1), 2.5)


def test_unbounded_head_has_no_magnitude_parameter(rng):
    f = init_encoder(5, 3, HeadKind.NONE, rng, SMALL)
    assert len(f.parameters()) == 2 * len(f.weights)
    g = init_encoder(5, 3, HeadKind.BOX_LINF, rng, SMALL)
    assert len(g.parameters()) == 2 * len(g.weights) + 1


@pytest.mark.parametrize("head", list(HeadKind))
def test_head_is_idempotent(head, rng):
    h = rng.standard_normal((20, 4))
    once = apply_head(head, h)
    assert np.allclose(apply_head(head, once), once)


def test_zero_row_under_sphere_head():
    f = Encoder([np.zeros((2, 3))], [np.zeros((1, 2))], HeadKind.SPHERE_L2)
    with pytest.raises(ValueError, match="normalization of zero vector"):
        predict(f, np.ones((1, 3)))


def test_encoder_input_width_is_checked(rng):
    f = init_encoder(5, 3, HeadKind.NONE, rng, SMALL)
    with pytest.raises(ValueError):
        predict(f, np.ones((2, 4)))


def test_magnitude_gradient_matches_finite_differences(rng):
    f = init_encoder(4, 3, HeadKind.SPHERE_L2, rng, SMALL)
    x = rng.standard_normal((8, 4))
    target = rng.standard_normal((8, 3))

    def fn(tape, nodes):
        out, _ = encoder_forward(f, x, tape, params=nodes)
        return dg.mean(dg.square(out - tape.constant(target)))

    params = f.parameters()
    report = dg.grad_check(fn, params, n_coords=1000)
    assert report.passed
    magnitude_index = len(params) - 1
    tape = dg.Tape()
    nodes = [tape.variable(p) for p in params]
    tape.backward(fn(tape, nodes))
    eps = 1e-5

    def value_at(m):
        moved = [p.copy() for p in params]
        moved[magnitude_index][0, 0] = m
        t = dg.Tape()
        return fn(t, [t.variable(p) for p in moved]).item()

    numeric = (value_at(1.0 + eps) - value_at(1.0 - eps)) / (2 * eps)
    assert nodes[magnitude_index].grad[0, 0] == pytest.approx(numeric, rel=1e-4)


def test_with_parameters_round_trip(rng):
    f = init_encoder(5, 3, HeadKind.BOX_LINF, rng, SMALL)
    g = f.with_parameters([2 * p for p in f.parameters()])
    assert g.magnitude[0, 0] == 2.0
    assert np.array_equal(g.weights[1], 2 * f.weights[1])
    with pytest.raises(ValueError):
        f.with_parameters(f.parameters()[:-1])


@pytest.mark.parametrize("head", list(HeadKind))
def test_encoder_checkpoint(head, rng, tmp_path):
    f = init_encoder(5, 3, head, rng, SMALL)
    path = tmp_path / "encoder.ckpt"
    save_checkpoint(path, f)
    loaded = load_checkpoint(path)
    assert isinstance(loaded, Encoder)
    assert loaded.head == head and loaded.slope == f.slope
    x = rng.standard_normal((6, 5))
    assert np.array_equal(predict(loaded, x), predict(f, x))


def test_mixing_checkpoint_with_embedding(rng, tmp_path):
    g = build_mixing(3, 4.0, rng, out_dim=5, bias_scale=0.1)
    path = tmp_path / "mixing.ckpt"
    save_checkpoint(path, g)
    loaded = load_checkpoint(path)
    assert isinstance(loaded, MixingNet)
    assert loaded.out_dim == 5
    z = rng.standard_normal((4, 3))
    assert np.array_equal(mixing_forward(loaded, z), mixing_forward(g, z))


def test_checkpoint_header_layout(rng, tmp_path):
    path = tmp_path / "mixing.ckpt"
    save_checkpoint(path, MixingNet.identity(2, n_layers=1))
    data = path.read_bytes()
    assert data[:8] == b"CLIDCKPT"
    # en-tete 32 octets, puis deux tableaux (2x2 et 2)
    assert len(data) == 32 + (4 + 8 + 32) + (4 + 4 + 16)


def test_corrupted_checkpoints(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(40))
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)
    path.write_bytes(b"CLID")
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)
