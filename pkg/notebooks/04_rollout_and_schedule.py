"""
Autoregressive rollout and the learning-rate schedule
=====================================================

Rollouts start from 9 true frames and feed predictions back for 18
steps. On advection the exact-shift model has zero error; persistence
error grows with the horizon. The second half plots the rollout
learning-rate schedule: linear warmup, inverse square-root decay and a
square-root cooldown.
"""

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from phystok.data import advection_dataset
from phystok.metrics import rollout_evaluate
from phystok.schedule import ScheduleConfig, schedule_curve

trajs = [t.astype(np.float64) for t in advection_dataset(8, (32, 32), 27, seed=0, speeds=(1, 2))]


def shift_model(window):
    vx, vy = int(window[1, -1, 0, 0]), int(window[2, -1, 0, 0])
    nxt = window[:, -1].copy()
    nxt[0] = np.roll(window[0, -1], (vy, vx), axis=(0, 1))
    return nxt


for name, model in (("exact shift", shift_model), ("persistence", lambda w: w[:, -1])):
    rep = rollout_evaluate(model, trajs)
    print(name)
    for line in rep.lines():
        print("  ", line)

###############################################################################
# Schedule over 40 epochs with 5 warmup and 8 cooldown epochs.

cfg = ScheduleConfig(epochs=40, warmup=5, cooldown=8, lr_peak=5e-5)
epochs, lrs = zip(*schedule_curve(cfg))
fig, ax = plt.subplots(figsize=(5, 3))
ax.plot(epochs, lrs, marker=".")
ax.set_xlabel("epoch")
ax.set_ylabel("learning rate")
fig.tight_layout()
fig.savefig("schedule.png", dpi=100)
print("peak", max(lrs), "end of decay", lrs[40 - 8], "cooldown start", lrs[40 - 8 + 1])
