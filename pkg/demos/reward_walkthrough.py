"""From a raw generator trace to per-token advantages.

A four-step trace looks up a birthplace, a country and a capital, then
answers.  Suppose the checker labelled step 2 an IE gap (the retrieved
passage never says which country Y is in).  The model searched again at
step 3, which the shaping term rewards.

    python demos/reward_walkthrough.py
"""

from __future__ import annotations

from stepgap.reward import RewardConfig, RewardVariant, assign_dense_advantages, trajectory_return
from stepgap.trace import parse_trace

RAW = (
    "Looking up X. <search>X birthplace</search><information>X was born in Y.</information>"
    "Y next. <search>Y country</search><information>Y is a town.</information>"
    "Z now. <search>capital of Z</search><information>W is the capital of Z.</information>"
    "So W. <answer>W</answer>"
)
SPANS = [[0, 4], [4, 9], [9, 12], [12, 15]]


def rollout(rollout_id: str, gold: str):
    meta = {"question_id": "wx", "rollout_id": rollout_id, "question": "Capital of the country X was born in?",
            "gold_answer": gold, "token_spans": SPANS}
    return parse_trace(RAW, meta)


def main() -> None:
    trace = rollout("r0", gold="W")
    for step in trace.steps:
        print(f"step {step.index} [{step.step_kind().value}] query={step.query!r} answer={step.answer_text!r}")

    labels = ["NoGap", "IE", "NoGap", "NoGap"]
    breakdown = trajectory_return(labels, trace)
    print("\nper-step rewards:")
    for s in breakdown.per_step:
        print(f"  step {s.step_index}: {s.tau.value:<5} base={s.base:+.2f} shape={s.shape:+.2f} ({s.branch})")
    print(f"R = EM + lambda * sum = {breakdown.em} + {breakdown.total_return - breakdown.em:.2f}"
          f" = {breakdown.total_return:.2f}")

    # Outcome-only reward for comparison.
    search_only = trajectory_return(labels, trace, RewardConfig(variant=RewardVariant.SEARCH_ONLY))
    print(f"outcome-only return: {search_only.total_return:.2f}")

    # A second rollout of the same question with the wrong answer.  The
    # group mean and population standard deviation turn step returns into
    # per-token advantages.
    wrong = rollout("r1", gold="V")
    group = [breakdown, trajectory_return(labels, wrong)]
    advantages = assign_dense_advantages(group, [trace, wrong])
    print("\nper-token advantages:")
    for b, a in zip(group, advantages):
        print(f"  {b.rollout_id} (EM={b.em}): " + " ".join(f"{x:+.2f}" for x in a.per_token))


if __name__ == "__main__":
    main()
