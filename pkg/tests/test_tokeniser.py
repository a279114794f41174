import numpy as np
import pytest
import torch

from helpers import (
    decoder_expected,
    directional_fd_check,
    encoder_expected,
    perturb_frame,
    time_stride,
    tiny_tok,
    unchanged_frames,
)
from phystok.data import ADVECTION_SCHEMA, FieldSchema
from phystok.ops import ScalePair, ShapeError
from phystok.tokeniser import (
    VALIDATION_CHOICE,
    FrameGroupNorm,
    Tokeniser,
    TokeniserConfig,
    check_choice,
    cumulative_scale,
    denormalise,
    latent_shape,
    rms_normalise,
    sample_compression,
    tokeniser_loss,
)


@pytest.fixture(scope="module")
def tok():
    torch.manual_seed(0)
    return Tokeniser(tiny_tok()).eval()


def test_sixteen_combinations():
    cfg = TokeniserConfig()
    choices = cfg.all_choices()
    assert len(choices) == 16
    assert all(c[0] == ScalePair(1, 2) for c in choices)


def test_latent_shape_validation_choice():
    assert cumulative_scale(VALIDATION_CHOICE) == ScalePair(4, 8)
    assert latent_shape((9, 64, 64), VALIDATION_CHOICE) == (3, 8, 8)
    with pytest.raises(ShapeError, match="s_t=4"):
        latent_shape((8, 64, 64), VALIDATION_CHOICE)


def test_sampling_modes():
    cfg = TokeniserConfig()
    assert sample_compression(cfg, "validate") == tuple(ScalePair(*c) for c in VALIDATION_CHOICE)
    rng = np.random.default_rng(0)
    seen = {sample_compression(cfg, "train", rng) for _ in range(400)}
    assert seen == set(cfg.all_choices())
    with pytest.raises(ValueError):
        sample_compression(cfg, "eval")


def test_check_choice_rejects_non_divisor():
    with pytest.raises(ValueError, match="depth 2"):
        check_choice(TokeniserConfig(), [(1, 2), (4, 2), (1, 2)])


def test_reference_channels():
    cfg = TokeniserConfig()
    assert cfg.channels == [16, 32, 64] and cfg.latent_channels == 18


def test_normaliser_per_field_rms():
    x = torch.randn(2, 3, 9, 8, 8, dtype=torch.float64) * torch.tensor([5.0, 0.1, 3.0]).view(1, 3, 1, 1, 1)
    xn, state = rms_normalise(x, ADVECTION_SCHEMA)
    assert state.scales.shape == (2, 2)
    tracer_rms = xn[:, 0].pow(2).mean(dim=(1, 2, 3)).sqrt()
    vel_rms = xn[:, 1:].pow(2).mean(dim=(1, 2, 3, 4)).sqrt()
    torch.testing.assert_close(tracer_rms, torch.ones(2, dtype=torch.float64))
    torch.testing.assert_close(vel_rms, torch.ones(2, dtype=torch.float64))
    torch.testing.assert_close(denormalise(xn, state), x)


def test_normaliser_zero_field_is_finite():
    x = torch.zeros(1, 1, 3, 4, 4)
    xn, _ = rms_normalise(x, FieldSchema.scalars(1))
    assert torch.isfinite(xn).all()


def test_loss_is_mse():
    a, b = torch.zeros(1, 1, 1, 2, 2), torch.full((1, 1, 1, 2, 2), 2.0)
    assert tokeniser_loss(a, b).item() == 4.0


@pytest.mark.parametrize("choice", TokeniserConfig().all_choices()[::3])
def test_round_trip_shape(tok, choice):
    x = torch.randn(1, 3, 9, 32, 32)
    z = tok.encode(x, choice)
    assert tuple(z.shape[2:]) == latent_shape((9, 32, 32), choice)
    assert z.shape[1] == 8
    assert tok(x, choice).shape == x.shape


def test_decode_shape_mismatch_raises(tok):
    z = tok.encode(torch.randn(1, 3, 9, 32, 32), VALIDATION_CHOICE)
    with pytest.raises(ShapeError, match="compression"):
        tok.decode(z, [(1, 2), (1, 2), (1, 2)], expected_shape=(9, 32, 32))


def test_field_subset(tok):
    x = torch.randn(1, 2, 9, 16, 16)
    assert tok(x, VALIDATION_CHOICE, active=[0, 2]).shape == x.shape
    with pytest.raises(ShapeError):
        tok.encode(x, VALIDATION_CHOICE, active=[0])


def test_frame_group_norm_is_per_frame():
    norm = FrameGroupNorm(2, 4)
    x = torch.randn(1, 4, 3, 5, 5)
    y = norm(x)
    y2 = norm(torch.cat([x[:, :, :1], 100 * x[:, :, 1:]], dim=2))
    assert torch.allclose(y[:, :, 0], y2[:, :, 0])


@pytest.mark.parametrize("choice", [TokeniserConfig().all_choices()[i] for i in (0, 5, 15)])
@pytest.mark.parametrize("f", [1, 4, 8])
def test_encoder_decoder_causal(tok, choice, f):
    s = time_stride(choice)
    x = torch.randn(1, 3, 9, 32, 32)
    with torch.no_grad():
        z, z2 = tok.encode(x, choice), tok.encode(perturb_frame(x, f), choice)
        assert unchanged_frames(z, z2) == encoder_expected(z.shape[2], s, f)
        g = min(f // s, z.shape[2] - 1)
        y, y2 = tok.decode(z, choice), tok.decode(perturb_frame(z, g), choice)
        assert unchanged_frames(y, y2) == decoder_expected(9, s, g)


def test_mse_gradient_finite_difference():
    torch.manual_seed(1)
    model = Tokeniser(tiny_tok()).double().eval()
    x = torch.randn(1, 3, 9, 16, 16, dtype=torch.float64)
    rel = directional_fd_check(list(model.parameters()), lambda: tokeniser_loss(x, model(x, VALIDATION_CHOICE)))
    assert rel <= 1e-3
