"""Show how TIE subtracts the text-only counterfactual from the factual score,
on anti-biased test texts where the two disagree."""

import numpy as np

from crab import corpus as cp
from crab import model as md
from crab.trainer import TrainConfig, train

train_set, _, test_anti = cp.gen_synthetic(cp.SyntheticSpec(seed=1))
fit, val = cp.split_train_val(train_set, 0.15, 1)
model, _ = train(TrainConfig(seed=1, dropout=0.0, patience=20), fit, val)
print(f"learned a = {model.a:.3f}\n")

fx = md.decompose_effects(model, cp.encode_batch(test_anti, model.vocab))
fact, tie = fx.y_fact.argmax(axis=1), fx.tie.argmax(axis=1)
shown = [i for i in np.flatnonzero(fact != tie)][:4]
print(f"factual and TIE disagree on {int(np.sum(fact != tie))} of {len(test_anti)} anti-biased texts\n")
np.set_printoptions(precision=2, suppress=True)
for i in shown:
    e = test_anti[i]
    print(f"[{e.target}] {e.text!r} (gold {e.stance})")
    print(f"  factual      {fx.y_fact[i]} -> {cp.LABELS[fact[i]]}")
    print(f"  text-only cf {fx.y_cf[i]}")
    print(f"  TIE          {fx.tie[i]} -> {cp.LABELS[tie[i]]}")
