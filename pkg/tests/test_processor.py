import pytest
import torch

from helpers import directional_fd_check, perturb_frame, tiny_proc, tiny_tok, unchanged_frames
from phystok.ops import ShapeError
from phystok.processor import (
    REFERENCE_PROCESSOR,
    DropPath,
    Processor,
    ProcessorConfig,
    RMSGroupNorm,
    RolloutModel,
    TemporalAttention,
    apply_rope,
    axial_rope_tables,
    rollout_loss,
)
from phystok.tokeniser import VALIDATION_CHOICE, rms_normalise


def test_drop_path_schedule():
    rates = ProcessorConfig(**REFERENCE_PROCESSOR).drop_path_rates()
    assert rates == pytest.approx([0.0, 0.01, 0.02, 0.03, 0.04, 0.05])
    assert ProcessorConfig(blocks=1).drop_path_rates() == [0.0]


def test_config_validation():
    with pytest.raises(ValueError):
        ProcessorConfig(embed_dim=30, heads=4)
    with pytest.raises(ValueError):
        ProcessorConfig(embed_dim=24, heads=4)  # head dim 6


def test_rms_group_norm():
    norm = RMSGroupNorm(8, 2)
    y = norm(torch.randn(3, 8, dtype=torch.float64) * 7)
    rms = y.view(3, 2, 4).pow(2).mean(-1).sqrt()
    torch.testing.assert_close(rms, torch.ones(3, 2, dtype=torch.float64), atol=1e-6, rtol=0)


def test_drop_path_identity_in_eval():
    dp = DropPath(0.5).eval()
    x = torch.randn(4, 3)
    assert torch.equal(dp(x), x)


def test_rope_is_rotation_and_relative():
    cos, sin = axial_rope_tables(4, 4, 8, 1e4, torch.float64, "cpu")
    q = torch.randn(1, 16, 8, dtype=torch.float64)
    rq = apply_rope(q, cos, sin)
    torch.testing.assert_close(rq.norm(dim=-1), q.norm(dim=-1))
    # scores between identical vectors depend only on the offset
    v = torch.randn(8, dtype=torch.float64).expand(1, 16, 8)
    r = apply_rope(v, cos, sin)[0].view(4, 4, 8)
    s1 = (r[0, 0] * r[1, 2]).sum()
    s2 = (r[2, 1] * r[3, 3]).sum()
    torch.testing.assert_close(s1, s2)


def test_temporal_bias_clips_distance():
    att = TemporalAttention(8, 2, max_time=3)
    with torch.no_grad():
        att.rel_bias.copy_(torch.arange(6.0).view(2, 3))
    b = att.bias(5, torch.float32, "cpu")
    assert b[0, 4, 0] == 2.0 and b[0, 4, 1] == 2.0 and b[0, 4, 3] == 1.0 and b[1, 2, 2] == 3.0
    assert torch.isinf(b[:, 0, 1:]).all()


def test_processor_shape_and_limits():
    p = Processor(tiny_proc()).eval()
    x = torch.randn(2, 3, 4, 4, 32)
    assert p(x).shape == x.shape
    with pytest.raises(ShapeError):
        p(torch.randn(1, 17, 2, 2, 32))
    with pytest.raises(ShapeError):
        p(torch.randn(1, 3, 2, 2, 16))


@pytest.mark.parametrize("f", [0, 1, 2])
def test_processor_causal(f):
    p = Processor(tiny_proc()).eval()
    x = torch.randn(1, 3, 4, 4, 32)
    xp = x.clone()
    xp[:, f] += torch.randn(4, 4, 32)
    with torch.no_grad():
        a, b = p(x), p(xp)
    same = {j for j in range(3) if torch.equal(a[:, j], b[:, j])}
    assert same == set(range(f))


def test_rollout_model_predict():
    model = RolloutModel(tiny_tok(), tiny_proc()).eval()
    ctx = torch.randn(2, 3, 9, 16, 16)
    with torch.no_grad():
        out = model.predict_next_frame(ctx, VALIDATION_CHOICE)
    assert out.shape == (2, 3, 1, 16, 16)
    with pytest.raises(ShapeError, match="compression window"):
        model.predict_next_frame(ctx[:, :, :4], VALIDATION_CHOICE)


def test_latent_dim_mismatch():
    with pytest.raises(ValueError):
        RolloutModel(tiny_tok(), tiny_proc(latent_dim=4))


def test_pipeline_causal_one_choice():
    model = RolloutModel(tiny_tok(), tiny_proc()).eval()
    x = torch.randn(1, 3, 9, 16, 16)
    with torch.no_grad():
        a, b = model(x, VALIDATION_CHOICE), model(perturb_frame(x, 5), VALIDATION_CHOICE)
    # S = 4: frames j with 4 * ceil(j / 4) < 5 are 0..4
    assert unchanged_frames(a, b) == {0, 1, 2, 3, 4}


def test_mae_loss():
    assert rollout_loss(torch.zeros(3), torch.tensor([1.0, -2.0, 3.0])).item() == 2.0


def test_mae_gradient_finite_difference():
    torch.manual_seed(2)
    model = RolloutModel(tiny_tok(), tiny_proc()).double().eval()
    seq = torch.randn(1, 3, 10, 16, 16, dtype=torch.float64)
    xn, state = rms_normalise(seq[:, :, :9])
    target = seq[:, :, 9:10] / state.channel_scales()

    def loss():
        return rollout_loss(target, model(xn, VALIDATION_CHOICE)[:, :, -1:])

    assert directional_fd_check(list(model.parameters()), loss) <= 1e-3
