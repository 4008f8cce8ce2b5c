"""A minute-scale run of the whole toy pipeline, in process.

1. Pretrain a small transformer on retrieval lists where the answer sits in
   slot 1 half of the time (candidate counts 2..K mixed, as in the reference
   profile).
2. Sweep the truth position and report per-slot accuracy and fluctuation.
3. Freeze the base and fine-tune LE and PT adapters on cyclically permuted
   data, then sweep again and audit the frozen weights.

Expect the base to be near perfect on the first slots and weaker further
down. The adapters reshuffle which later slots are weak but do not close the
gap: the base never learned to read those slots reliably, and soft tokens in
front of a frozen model cannot teach it to.

The reference profile (configs/toy.ini) runs the same steps at full size
through the CLI; see the README.

    python demos/mini_pipeline.py
"""

import time

from posbias.adapters import AdapterSpec, count_tunable
from posbias.bias_eval import probe_positions
from posbias.model import ModelConfig, param_hash
from posbias.tasks import (TaskConfig, gen_curriculum, gen_dataset, permute_augment,
                           uniform_distribution)
from posbias.trainer import ModelPredictor, TrainConfig, finetune, pretrain

task = TaskConfig(K=5, doc_len=1, query_len=1, n_keys=8, n_features=2, n_filler=8)
model_cfg = ModelConfig.for_task(task, d_model=48, n_layers=2, n_heads=4, d_ff=96)


def show(tag, rep):
    accs = " ".join(f"{a:.2f}" for a in rep.accuracy)
    print(f"{tag:10s} [{accs}]  mean {rep.mean_accuracy:.3f}  fluctuation {rep.fluctuation:6.1f}%")


if __name__ == "__main__":
    t0 = time.time()
    data = gen_curriculum(task, 2, 0.5, 96000, seed=0)
    base = pretrain(model_cfg, task, data, TrainConfig(learning_rate=2e-3, warmup_steps=50,
                                                       epochs=1, batch_size=32))
    print(f"pretrained {base.step} steps in {time.time() - t0:.0f} s, "
          f"final loss {base.meta['final_loss']:.3f}")
    show("base", probe_positions(ModelPredictor(base, task), task, 100, seed=1))

    h0 = param_hash(base.params)
    aug = permute_augment(gen_dataset(task, uniform_distribution(task.K), 200, seed=2), task.K)
    for kind in ("LE", "PT"):
        spec = AdapterSpec(kind=kind, hidden_dim=32, output_dim=model_cfg.d_model)
        ad = finetune(base, spec, task, aug, TrainConfig(learning_rate=3e-3, epochs=3))
        show(kind, probe_positions(ModelPredictor(base, task, ad), task, 100, seed=1))
        print(f"{'':10s} base hash unchanged: {param_hash(base.params) == h0}, "
              f"updated {ad.meta['updated_scalars']} of {count_tunable(spec)} tunable scalars")
    print(f"total {time.time() - t0:.0f} s")
