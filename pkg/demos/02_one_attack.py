"""Attack a handful of utterances against a briefly pretrained encoder.

Compares the embedding distortion of a BIM attack with white noise at the
same noise-to-signal ratio. Pretraining is cut to 150 steps so this runs in
well under a minute; the shipped config uses 1000.

Run: python demos/02_one_attack.py
"""
import numpy as np

from frozenadv.attack import AttackConfig, bim_attack, gaussian_control
from frozenadv.data import DataConfig, generate_dataset
from frozenadv.harness import compute_edr
from frozenadv.upstream import init_model, pretrain

ds = generate_dataset(DataConfig(n_train=160, n_val=40, n_test=40))
print({k: len(v) for k, v in ds.splits.items()}, "utterances")

model = pretrain(init_model("a"), ds, steps=150, seed=0)
lg = model.pretrain_log
print(f"held-out masked loss {lg['heldout_before']:.3f} -> {lg['heldout_after']:.3f}")

x = ds.waves("test")[:8].astype(np.float64)
cfg = AttackConfig(epsilon=0.1, n_iters=10)
res = bim_attack(model, x, cfg)
noise = [gaussian_control(xi, r.nsr, seed=1) for xi, r in zip(x, res)]

for name, adv in (("BIM", res), ("gaussian", noise)):
    e = compute_edr(model, [(xi, r.adversarial) for xi, r in zip(x, adv)])
    print(f"{name:9s} NSR {np.mean([r.nsr for r in adv]):.3f}  EDR {e.mean:.3f}")

# the budget holds exactly and the embedding distance grows with each step
print("max |x~ - x| =", max(r.linf for r in res), "<= eps =", cfg.epsilon)
print("distance trace of the first utterance:", np.round(res[0].loss_trace, 3))
