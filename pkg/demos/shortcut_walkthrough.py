"""Train CRAB and a text-only baseline on a corpus where "#truth" rides
along with FAVOR, then score both on a test set where the cue is flipped."""

from crab import corpus as cp
from crab import evaluator as ev
from crab.trainer import TrainConfig, train

train_set, test_iid, test_anti = cp.gen_synthetic(cp.SyntheticSpec(bias_strength=0.9, seed=0))
fit, val = cp.split_train_val(train_set, 0.15, 0)

with_cue = [e for e in train_set if "#truth" in e.text]
favor = sum(e.stance == "FAVOR" for e in with_cue) / len(with_cue)
print(f"{len(with_cue)} of {len(train_set)} training texts carry #truth, {favor:.0%} of them FAVOR")

crab_model, history = train(TrainConfig(seed=0, dropout=0.0, patience=20), fit, val)
print(f"CRAB best epoch {history.best_epoch}, learned a = {crab_model.a:.3f}")
baseline, _ = train(TrainConfig(seed=0, dropout=0.0, patience=20, objective="text_only"), fit, val)

report = ev.evaluate_slices(crab_model, {"iid": test_iid, "anti": test_anti}, modes=("tie", "factual"))
base = ev.evaluate_slices(baseline, {"iid": test_iid, "anti": test_anti}, modes=("text_only",))
print()
print(f"{'':22}{'iid':>8}{'anti':>8}")
for label, rep, mode in (("text-only baseline", base, "text_only"), ("CRAB factual", report, "factual"),
                         ("CRAB TIE", report, "tie")):
    print(f"{label:22}{100 * rep.row('iid', mode).f_macro:8.1f}{100 * rep.row('anti', mode).f_macro:8.1f}")
