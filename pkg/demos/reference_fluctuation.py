"""Recompute fluctuation from per-position accuracy columns.

Fluctuation is the sample standard deviation of the per-position accuracies
divided by their mean, in percent. The rows below are accuracy columns of two
13B chat models on six probed positions of a 20-candidate list.

    python demos/reference_fluctuation.py
"""

from posbias import fluctuation

ROWS = [
    ("longchat, recommendation, no adapter", [0.329, 0.249, 0.211, 0.205, 0.171, 0.341], 27.78),
    ("vicuna, recommendation, no adapter", [0.855, 0.083, 0.211, 0.205, 0.171, 0.341], 89.76),
    ("longchat, link prediction, no adapter", [0.016, 0.112, 0.147, 0.168, 0.051, 0.022], 75.97),
    ("vicuna, link prediction, no adapter", [0.257, 0.208, 0.119, 0.166, 0.096, 0.104], 40.58),
    ("longchat, recommendation, prompt tuning", [0.832, 0.714, 0.708, 0.723, 0.715, 0.736], 6.38),
]

if __name__ == "__main__":
    print(f"{'setting':42s} {'reported':>9s} {'recomputed':>11s}")
    for name, accs, reported in ROWS:
        print(f"{name:42s} {reported:9.2f} {fluctuation(accs):11.2f}")
    print("\nA predictor that always answers slot 1 over 6 positions:",
          f"{fluctuation([1, 0, 0, 0, 0, 0]):.2f}%")
