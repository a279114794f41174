import itertools
import math

import numpy as np
import pytest
import torch

from helpers import tiny_proc, tiny_tok
from phystok import checkpoint as ckpt
from phystok.data import ADVECTION_SCHEMA, advection_dataset, window_sequences
from phystok.processor import REFERENCE_PROCESSOR, ProcessorConfig, RolloutModel
from phystok.schedule import ROLLOUT_OPTIMISER, TOKENISER_OPTIMISER
from phystok.tokeniser import VALIDATION_CHOICE, Tokeniser, TokeniserConfig, rms_normalise, tokeniser_loss
from phystok.training import (
    LoopConfig,
    NonFiniteLossError,
    RunDirLocked,
    ShardLoader,
    Source,
    apply_freeze,
    freeze_mask,
    mixture_sample,
    pretrain_tokeniser,
    rollout_schedule,
    run_lock,
    train_rollout,
    trainable_fraction,
)

# ---------------------------------------------------------------------------
# loader


def toy_samples(n=200):
    return [np.full((1, 1, 1, 1), i, dtype=np.float32) for i in range(n)]


def test_unique_within_budget():
    loader = ShardLoader(toy_samples(), batch_size=7, unique_batches=20, seed=3)
    seen = np.concatenate([loader.next_indices() for _ in range(20)])
    assert len(seen) == 140 == len(set(seen.tolist()))


def test_budget_capped_by_dataset():
    loader = ShardLoader(toy_samples(), batch_size=8, unique_batches=1000, seed=0)
    assert loader.budget == 25
    passes = [np.concatenate([loader.next_indices() for _ in range(25)]) for _ in range(2)]
    # one pass covers every sample exactly once
    assert sorted(passes[0].tolist()) == list(range(200))
    assert sorted(passes[1].tolist()) == list(range(200))
    assert not np.array_equal(passes[0], passes[1])


def test_reseed_on_exhaustion_is_deterministic():
    a = ShardLoader(toy_samples(), 5, 4, seed=11)
    b = ShardLoader(toy_samples(), 5, 4, seed=11)
    seq_a = [a.next_indices().tolist() for _ in range(12)]
    seq_b = [b.next_indices().tolist() for _ in range(12)]
    assert seq_a == seq_b
    first, second = seq_a[:4], seq_a[4:8]
    assert first != second
    assert a.pass_index == 2
    # every pass is internally unique
    for chunk in (seq_a[:4], seq_a[4:8], seq_a[8:]):
        flat = list(itertools.chain(*chunk))
        assert len(flat) == len(set(flat))


def test_loader_state_round_trip():
    a = ShardLoader(toy_samples(), 5, 4, seed=1)
    for _ in range(6):
        a.next_indices()
    b = ShardLoader(toy_samples(), 5, 4, seed=1)
    b.load_state(a.state())
    assert [a.next_indices().tolist() for _ in range(5)] == [b.next_indices().tolist() for _ in range(5)]


@pytest.mark.parametrize("num_shards", [2, 3, 4, 7])
def test_shards_disjoint_and_covering(num_shards):
    samples = toy_samples()
    covered = []
    for shard in range(num_shards):
        loader = ShardLoader(samples, 1, 10_000, seed=0, shard_id=shard, num_shards=num_shards)
        got = {int(i) for _ in range(loader.budget * 3) for i in loader.next_indices()}
        assert all(i % num_shards == shard for i in got)
        covered.append(got)
    for a, b in itertools.combinations(covered, 2):
        assert not a & b
    assert set().union(*covered) == set(range(200))


def test_loader_rejects_bad_batch():
    with pytest.raises(ValueError):
        ShardLoader(toy_samples(4), 5, 1)


def test_mixture_uniform():
    rng = np.random.default_rng(0)
    names = ["a", "b", "c"]
    draws = [mixture_sample(names, rng) for _ in range(30_000)]
    for n in names:
        assert abs(draws.count(n) / len(draws) - 1 / 3) <= 0.02


# ---------------------------------------------------------------------------
# freezing and parameter counts


def walk_counts(module, prefix=""):
    """Parameter counts per dotted module path, by explicit recursion."""
    out = {}
    for name, p in module._parameters.items():
        if p is not None:
            out[f"{prefix}{name}"] = p.numel()
    for name, child in module._modules.items():
        out.update(walk_counts(child, f"{prefix}{name}."))
    return out


INTERFACE = ("tokeniser.encoder.head.", "tokeniser.encoder.bottleneck.", "tokeniser.decoder.bottleneck.",
             "tokeniser.decoder.head.")


def test_freeze_mask_modules():
    model = RolloutModel(tiny_tok(), tiny_proc())
    mask = freeze_mask(model, "mostly_frozen")
    for name, trainable in mask.items():
        expect = not name.startswith("tokeniser.") or name.startswith(INTERFACE)
        assert trainable == expect, name
    assert all(freeze_mask(model, "fully_trainable").values())
    with pytest.raises(ValueError):
        freeze_mask(model, "half")


def test_param_counts_match_tree_walk():
    model = RolloutModel(tiny_tok(), tiny_proc())
    counts = walk_counts(model)
    got = trainable_fraction(model, "mostly_frozen")
    tok = {k: v for k, v in counts.items() if k.startswith("tokeniser.")}
    assert got.total == sum(counts.values())
    assert got.tokeniser_total == sum(tok.values())
    assert got.tokeniser_trainable == sum(v for k, v in tok.items() if k.startswith(INTERFACE))
    assert got.trainable == got.total - got.tokeniser_total + got.tokeniser_trainable


def test_reference_trainable_fraction_small():
    model = RolloutModel(TokeniserConfig(), ProcessorConfig(**REFERENCE_PROCESSOR))
    counts = trainable_fraction(model, "mostly_frozen")
    assert counts.fraction <= 0.05
    tok_params = sum(walk_counts(model.tokeniser).values())
    assert counts.tokeniser_total == tok_params


# ---------------------------------------------------------------------------
# loops


@pytest.fixture(scope="module")
def source():
    trajs = advection_dataset(12, (32, 32), 10, seed=4)
    seqs = [w for t in trajs for w in window_sequences(t)]
    return Source("adv", seqs[:8], seqs[8:], ADVECTION_SCHEMA)


def small_loop(**kw):
    base = dict(steps=6, batch_size=2, unique_batches=4, val_every=3, val_sequences=2, seed=5)
    return LoopConfig(**{**base, **kw})


def state_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_pretrain_smoke(source, tmp_path):
    res = pretrain_tokeniser(tiny_tok(), [source], small_loop(), TOKENISER_OPTIMISER, run_dir=tmp_path)
    assert len(res.losses) == 6 and all(math.isfinite(v) for v in res.losses)
    assert (tmp_path / "checkpoints" / "step_6" / "tensors.pt").exists()
    assert res.logger.values("vrmse")


def test_pretrain_resume_bit_exact(source, tmp_path):
    full = pretrain_tokeniser(tiny_tok(), [source], small_loop(ckpt_every=3), TOKENISER_OPTIMISER,
                              run_dir=tmp_path / "a")
    resumed = pretrain_tokeniser(tiny_tok(), [source], small_loop(), TOKENISER_OPTIMISER, run_dir=tmp_path / "b",
                                 resume_from=tmp_path / "a" / "checkpoints" / "step_3")
    assert resumed.losses == full.losses[3:]
    assert state_equal(full.model, resumed.model)


def test_rollout_resume_bit_exact(source, tmp_path):
    kw = dict(freeze="fully_trainable", warmup_epochs=1, cooldown_epochs=1)
    full = train_rollout(tiny_tok(), tiny_proc(), [source], small_loop(ckpt_every=3), ROLLOUT_OPTIMISER,
                         run_dir=tmp_path / "a", **kw)
    resumed = train_rollout(tiny_tok(), tiny_proc(), [source], small_loop(), ROLLOUT_OPTIMISER,
                            run_dir=tmp_path / "b", resume_from=tmp_path / "a" / "checkpoints" / "step_3", **kw)
    assert resumed.losses == full.losses[3:]
    assert state_equal(full.model, resumed.model)


def test_frozen_params_unchanged_after_50_steps(source, tmp_path):
    init = tmp_path / "tok"
    torch.manual_seed(0)
    ckpt.save_checkpoint(init, Tokeniser(tiny_tok()), step=0, config={})
    before = ckpt.model_state(ckpt.load_checkpoint(init)[0])
    res = train_rollout(tiny_tok(), tiny_proc(), [source], small_loop(steps=50, val_every=0),
                        ROLLOUT_OPTIMISER, tokeniser_init=init, freeze="mostly_frozen")
    after = res.model.tokeniser.state_dict()
    moved = set()
    for name, t in before.items():
        if ("tokeniser." + name).startswith(INTERFACE):
            if not torch.equal(t, after[name]):
                moved.add(name)
        else:
            assert torch.equal(t, after[name]), name
    assert moved, "interface parameters should train"


def test_apply_freeze_sets_requires_grad():
    model = RolloutModel(tiny_tok(), tiny_proc())
    apply_freeze(model, "mostly_frozen")
    assert not model.tokeniser.encoder.stages[0][0].conv1.weight.requires_grad
    assert model.tokeniser.encoder.head.weight.requires_grad
    assert model.processor.blocks[0].mlp.gate.weight.requires_grad


def test_rollout_schedule_epochs():
    sched, per_epoch = rollout_schedule(LoopConfig(steps=29_400, unique_batches=2_100, accumulation=1), 5, 5, 5e-5)
    assert per_epoch == 2_100 and sched.epochs == 14


def test_non_finite_loss_aborts(source, tmp_path):
    bad = Source("bad", [s * np.float32("nan") for s in source.train], [], ADVECTION_SCHEMA)
    with pytest.raises(NonFiniteLossError):
        pretrain_tokeniser(tiny_tok(), [bad], small_loop(steps=2), TOKENISER_OPTIMISER, run_dir=tmp_path)
    assert list(tmp_path.glob("nonfinite_step_*.pt"))


def test_run_lock(tmp_path):
    with run_lock(tmp_path):
        with pytest.raises(RunDirLocked):
            with run_lock(tmp_path):
                pass
    with run_lock(tmp_path):
        pass


def test_incompatible_checkpoint(tmp_path):
    ckpt.save_checkpoint(tmp_path / "c", Tokeniser(tiny_tok()), step=0, config={})
    with pytest.raises(ckpt.IncompatibleCheckpointError, match="checkpoint"):
        ckpt.load_into(Tokeniser(tiny_tok(latent_channels=4)), ckpt.model_state(ckpt.load_checkpoint(tmp_path / "c")[0]))


def test_checkpoint_version(tmp_path):
    ckpt.save_checkpoint(tmp_path / "c", Tokeniser(tiny_tok()), step=0, config={})
    meta = tmp_path / "c" / "meta.json"
    meta.write_text(meta.read_text().replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(ckpt.CheckpointVersionError):
        ckpt.load_checkpoint(tmp_path / "c")


@torch.no_grad()
def recon_mse(model, x):
    model.eval()
    xn, _ = rms_normalise(x, ADVECTION_SCHEMA)
    return tokeniser_loss(xn, model(xn, VALIDATION_CHOICE)).item()


def test_pretrain_200_step_smoke():
    trajs = advection_dataset(40, (32, 32), 10, seed=21)
    seqs = [w for t in trajs for w in window_sequences(t)]
    src = Source("adv", seqs[:32], seqs[32:], ADVECTION_SCHEMA)
    # effective batch 16 through accumulation, as in the reference recipe
    loop = LoopConfig(steps=200, batch_size=4, accumulation=4, unique_batches=8, val_every=0, seed=0)
    val = torch.from_numpy(np.stack(src.val))[:, :, :9]
    torch.manual_seed(loop.seed)
    initial = recon_mse(Tokeniser(tiny_tok()), val)
    res = pretrain_tokeniser(tiny_tok(), [src], loop, TOKENISER_OPTIMISER)
    final = recon_mse(res.model, val)
    assert final < 0.5 * initial, (initial, final)
