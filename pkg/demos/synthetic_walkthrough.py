"""Walk through a full checker run on the synthetic benchmark.

The synthetic benchmark ships with scripted judges, so everything below runs
offline and deterministically.  We write the benchmark, label every step,
look at a few verdicts, then ablate stages and run the flag-everything trap.

    python demos/synthetic_walkthrough.py [output-dir]
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

from stepgap.cli import main
from stepgap.synthetic import synthetic_benchmark


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def judge_flags(paths: dict[str, Path]) -> list[str]:
    return ["--benchmark", str(paths["traces"]), "--gold", str(paths["gold"]),
            "--llm-backend", "scripted", "--llm-script", str(paths["llm_script"]),
            "--nli-backend", "scripted", "--nli-script", str(paths["nli_script"])]


def run() -> None:
    root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="stepgap-demo-"))
    paths = synthetic_benchmark(seed=0).write(root / "bench")
    print(f"benchmark written to {root / 'bench'}")

    # 1. Label every step with the full five-stage checker.
    out = root / "check"
    main(["check", *judge_flags(paths), "--out", str(out), "--cache-dir", str(root / "cache")])

    # Each verdict records the route it took through the tree.
    print("\nfirst verdicts, with the route each took:")
    for v in read_jsonl(out / "verdicts.jsonl")[:3]:
        print(f"  step {v['step_index']}: {v['gap_type']:<5} conf={v['confidence']:.3f}  {v['pipeline_path']}")

    # 2. Remove stages A and E.  The judge cache is shared, so only new
    #    requests reach the (scripted) judges.
    print()
    main(["ablate", *judge_flags(paths), "--out", str(root / "ablate"), "--cache-dir", str(root / "cache")])

    # 3. A checker that flags every step gets balanced accuracy 50 but a
    #    question-level F1 that grows with the wrong-answer rate w.
    trap = root / "trap"
    print()
    main(["trap", "--benchmark", str(paths["traces"]), "--out", str(trap)])


if __name__ == "__main__":
    run()
