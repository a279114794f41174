"""
Two-stage training at desk scale
================================

Stage one pretrains the tokeniser as an autoencoder with randomly drawn
compression. Stage two attaches a processor and trains next-frame
prediction, either with everything trainable or with only the interface
layers of the tokeniser unfrozen. A few hundred steps on synthetic
advection take a couple of minutes on CPU.
"""

import dataclasses
import tempfile
from pathlib import Path

import numpy as np

from phystok.data import ADVECTION_SCHEMA, advection_dataset, window_sequences
from phystok.processor import ProcessorConfig
from phystok.schedule import ROLLOUT_OPTIMISER, TOKENISER_OPTIMISER
from phystok.tokeniser import TokeniserConfig
from phystok.training import LoopConfig, Source, pretrain_tokeniser, train_rollout

trajs = advection_dataset(80, (32, 32), 10, seed=0)
seqs = [w for t in trajs for w in window_sequences(t)]
src = Source("advection", seqs[:64], seqs[64:], ADVECTION_SCHEMA)

tok_cfg = TokeniserConfig(channels=[8, 16, 16], latent_channels=8, residual_blocks=1)
proc_cfg = ProcessorConfig(blocks=2, embed_dim=32, heads=2, latent_dim=8)
loop = LoopConfig(steps=200, batch_size=4, unique_batches=16, val_every=50, val_sequences=16)

run = Path(tempfile.mkdtemp())
pre = pretrain_tokeniser(tok_cfg, [src], loop, TOKENISER_OPTIMISER, run_dir=run / "pretrain")
print("pretrain loss", np.mean(pre.losses[:10]).round(3), "->", np.mean(pre.losses[-10:]).round(3))
print("validation VRMSE", pre.logger.values("vrmse"))

###############################################################################
# Rollout training from the pretrained tokeniser, both freezing modes.

opt = dataclasses.replace(ROLLOUT_OPTIMISER, lr=1e-3)
rloop = dataclasses.replace(loop, compression="validate")
for freeze in ("fully_trainable", "mostly_frozen"):
    res = train_rollout(tok_cfg, proc_cfg, [src], rloop, opt, tokeniser_init=pre.checkpoint, freeze=freeze,
                        run_dir=run / freeze)
    print(freeze, "final VRMSE", res.logger.values("vrmse")[-1])

print("run directories under", run)
