"""Baselines and reports on a scripted dataset.

Compares pass@1, parallel majority voting at K=5, and confidence-filtered
voting on a three-problem mock dataset where one problem only resolves
correctly under confident traces, then renders the markdown report with
token fold-change columns.

Run: python demos/05_benchmark_voting.py
"""

import json

from refinectl.backend import MockBackend, MockRecord
from refinectl.bench import Problem, RunSpec, emit_report, run_benchmark

K = 5
DATASET = [Problem(id=f"p{i}", statement=f"problem {i}", ground_truth="7")
           for i in range(3)]


def record(answer: str, conf: float) -> MockRecord:
    return MockRecord(text=f"... \\boxed{{{answer}}}", confidences=[conf] * 20)


def scripted_backend(k: int) -> MockBackend:
    """Per problem: good answers arrive with high confidence, bad ones with
    low, and problem p2 is noisy enough that a bare majority gets it wrong."""
    script = []
    for pid in range(3):
        votes = []
        if pid < 2:
            votes = [record("7", 15.0)] * max(1, k - 1) + [record("3", 8.0)]
        else:
            votes = [record("3", 8.0)] * (k // 2 + 1) + [record("7", 15.0)] * (k - k // 2 - 1)
        script.extend(votes[:k])
    return MockBackend(script)


rows = []
for method, extra in (
    ("pass1", {}),
    ("majority_parallel", {"k": K}),
    ("conf_filtered", {"k": K, "keep_fraction": 0.4}),
):
    spec = RunSpec(method=method, seeds=(0, 1, 2), **extra)
    rows.append(run_benchmark(DATASET, spec, backend=None,
                              backend_factory=lambda seed: scripted_backend(spec.k),
                              dataset_name="mock-math"))
    print(f"{method:18s} acc={rows[-1].accuracy_mean:5.1f}% "
          f"tokens={rows[-1].tokens_total}")

print("\n" + emit_report(rows, format="markdown").decode())

with open("/tmp/demo_report.json", "wb") as fh:
    fh.write(emit_report(rows, format="json"))
print("json report written to /tmp/demo_report.json")
print("rendered rows:", json.loads(emit_report(rows, format='json'))[0]["method"])
