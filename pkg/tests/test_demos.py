from __future__ import annotations

import subprocess
import sys
from pathlib import Path

DEMOS = Path(__file__).resolve().parents[1] / "demos"


def test_reward_walkthrough_runs():
    out = subprocess.run([sys.executable, str(DEMOS / "reward_walkthrough.py")], capture_output=True, text=True,
                         check=True).stdout
    assert "= 1.60" in out and "new_search_after_gap" in out


def test_synthetic_walkthrough_runs(tmp_path):
    out = subprocess.run([sys.executable, str(DEMOS / "synthetic_walkthrough.py"), str(tmp_path)],
                         capture_output=True, text=True, check=True).stdout
    assert "stageA:" in out and "0.9130" in out
