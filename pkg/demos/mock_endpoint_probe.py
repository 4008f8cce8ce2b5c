"""Probe a simulated chat model that loses track of the middle of its list.

The fake endpoint (an httpx MockTransport, so nothing leaves the process)
reads the candidate list out of the prompt. It finds the right answer with a
probability that is high at the edges of the list and low in the middle.
When it misses, it answers with the first label. The demo sweeps the truth
position with the zero-shot and hierarchical prompt strategies and prints
the per-position accuracy and fluctuation of each.

    python demos/mock_endpoint_probe.py
"""

import json
import random
import re

import httpx

from posbias.probe import EndpointConfig, Strategy, run_probe
from posbias.prompts import PromptInstance

K, N = 10, 40


def recall(pos: int, length: int) -> float:
    mid = (length - 1) / 2
    return 0.35 + 0.6 * (abs(pos - mid) / mid) ** 2 if length > 1 else 1.0


def handler(request: httpx.Request) -> httpx.Response:
    prompt = json.loads(request.content)["messages"][0]["content"]
    labels = re.findall(r"Potential Product \[(\d+)\]\((\S+)\)", prompt)
    rng = random.Random(prompt)
    answer = "1"
    for pos, (label, text) in enumerate(labels):
        if text.startswith("gold") and rng.random() < recall(pos, len(labels)):
            answer = label
    body = {"choices": [{"message": {"role": "assistant",
                                     "content": f"My pick is Potential Product [{answer}]"}}]}
    return httpx.Response(200, json=body)


def instances():
    out = {}
    for c in range(1, K + 1):
        out[c] = [PromptInstance(tuple(("gold" if j == c else "item") + f"-{i}-{j}"
                                       for j in range(1, K + 1)),
                                 history=(f"purchase-{i}",), answer=c)
                  for i in range(N)]
    return out


if __name__ == "__main__":
    cfg = EndpointConfig(base_url="http://simulated/v1", model="middle-blind", max_in_flight=4)
    client = httpx.Client(transport=httpx.MockTransport(handler))
    for strategy in (Strategy("zero-shot"), Strategy("hierarchical", groups=5)):
        rep = run_probe(cfg, strategy, instances(), K, client=client)
        accs = " ".join(f"{a:.2f}" for a in rep.accuracy)
        print(f"{strategy.kind:12s} accs [{accs}]  mean {rep.mean_accuracy:.3f}  "
              f"fluctuation {rep.fluctuation:.1f}%")
    print("\nThe simulated model ignores the grouping instruction, so the two rows differ\n"
          "only by sampling noise. Both show the U-shaped profile of a middle-blind reader.")
