"""Reference per-position accuracies (positions 1, 5, 9, 13, 17, 20 of K=20) with their
reported mean and fluctuation, for two 13B chat models on the recommendation (REC) and
link-prediction (LP) tasks."""

ROWS = [
    # (task, model, setting, accuracies, mean, fluctuation %)
    ("REC", "longchat", "original", [0.329, 0.249, 0.211, 0.205, 0.171, 0.341], 0.251, 27.78),
    ("REC", "longchat", "PT", [0.832, 0.714, 0.708, 0.723, 0.715, 0.736], 0.733, 6.38),
    ("REC", "longchat", "LE", [0.854, 0.731, 0.748, 0.745, 0.767, 0.752], 0.766, 5.82),
    ("REC", "longchat", "LowRank", [0.864, 0.816, 0.808, 0.823, 0.815, 0.836], 0.827, 2.47),
    ("REC", "vicuna", "original", [0.855, 0.083, 0.211, 0.205, 0.171, 0.341], 0.311, 89.76),
    ("REC", "vicuna", "PT", [0.881, 0.698, 0.701, 0.745, 0.767, 0.741], 0.756, 8.88),
    ("REC", "vicuna", "LE", [0.883, 0.746, 0.738, 0.798, 0.807, 0.765], 0.790, 6.77),
    ("REC", "vicuna", "LowRank", [0.855, 0.836, 0.818, 0.833, 0.825, 0.855], 0.837, 1.83),
    ("LP", "longchat", "original", [0.016, 0.112, 0.147, 0.168, 0.051, 0.022], 0.086, 75.97),
    ("LP", "longchat", "PT", [0.698, 0.708, 0.742, 0.760, 0.718, 0.742], 0.728, 3.26),
    ("LP", "longchat", "LE", [0.755, 0.754, 0.763, 0.781, 0.773, 0.763], 0.765, 1.37),
    ("LP", "longchat", "LowRank", [0.829, 0.810, 0.815, 0.809, 0.816, 0.825], 0.817, 0.99),
    ("LP", "vicuna", "original", [0.257, 0.208, 0.119, 0.166, 0.096, 0.104], 0.158, 40.58),
    ("LP", "vicuna", "PT", [0.757, 0.721, 0.709, 0.741, 0.761, 0.771], 0.743, 3.27),
    ("LP", "vicuna", "LE", [0.744, 0.774, 0.773, 0.769, 0.760, 0.783], 0.767, 1.77),
    ("LP", "vicuna", "LowRank", [0.824, 0.824, 0.823, 0.841, 0.843, 0.853], 0.835, 1.52),
]
