"""Labeling traces and training the decision network from scratch.

Builds a synthetic corpus of confidence traces with known outcomes, derives
oracle action labels (correct -> HALT; failures labeled by what fixed them,
or by confidence-shape heuristics), splits by problem, trains the Conv1D
controller, and round-trips the weights through the binary format.

Run: python demos/02_train_controller.py  (~30s)
"""

import numpy as np

from refinectl.confidence import ConfidenceTrace
from refinectl.controller import Action, forward, load_model, parameter_count, save_model
from refinectl.labeler import RawTrace, label_math, split
from refinectl.training import TrainConfig, train

rng = np.random.default_rng(7)


def synth_trace(kind: str, n: int) -> ConfidenceTrace:
    """Trace archetypes: 'good' holds steady and finishes high, 'slip' decays,
    'chaotic' swings wildly."""
    base = rng.normal(15.0, 0.4)
    if kind == "good":
        values = rng.normal(base, 0.5, n)
        values[-n // 5:] += 3.5
    elif kind == "slip":
        values = rng.normal(base, 0.5, n) - np.linspace(0, 5, n)
    else:
        values = rng.normal(base - 3, 0.4, n) + 9.0 * np.sin(np.arange(n) / 3.0)
    return ConfidenceTrace(values)


# --- raw traces with outcomes -------------------------------------------------
raw = []
for p in range(400):
    kind = ("good", "slip", "chaotic")[p % 3]
    correct = kind == "good"
    raw.append(RawTrace(
        problem_id=f"prob{p:03d}", iteration=0, source="parallel",
        trace=synth_trace(kind, int(rng.integers(80, 300))),
        answer="42" if correct else "13", correct=correct, ground_truth="42"))

labeled = label_math(raw)
counts = {a.name: sum(1 for item in labeled if item.label is a)
          for a in (Action.HALT, Action.RETHINK, Action.ALTERNATIVE)}
print("oracle label counts:", counts)

# --- problem-level split, then training ----------------------------------------
train_raw, val_raw, test_raw = split(raw, seed=0)
print(f"split sizes (traces): {len(train_raw)}/{len(val_raw)}/{len(test_raw)}")

index = {item.problem_id: item for item in labeled}
train_set = [index[item.problem_id] for item in train_raw]
val_set = [index[item.problem_id] for item in val_raw]

cfg = TrainConfig(learning_rate=1e-3, batch_size=32, epochs=12, rng_seed=0,
                  loss_kind="focal", halt_undersample_ratio=0.67)
model, report = train(train_set, cfg, val_dataset=val_set)
print(f"parameters: {parameter_count(model):,}")
print(f"val accuracy by epoch: {[round(a, 3) for a in report.val_accuracies]}")
print(f"best: {report.best_val_accuracy:.3f} at epoch {report.best_epoch}")

# --- inference + persistence ----------------------------------------------------
test_item = index[test_raw[0].problem_id]
decision = forward(model, test_item.feature)
print(f"\nsample decision: {decision.action.name} "
      f"probs={[round(p, 3) for p in decision.probs]} "
      f"success={decision.success_prob:.2f}")

save_model("/tmp/demo_controller.bin", model,
           metadata={"seed": cfg.rng_seed, "loss": cfg.loss_kind,
                     "val_accuracy": report.best_val_accuracy})
restored, metadata = load_model("/tmp/demo_controller.bin")
again = restored.decide(test_item.feature)
print(f"restored model agrees: {again.probs == decision.probs} (metadata: {metadata})")
