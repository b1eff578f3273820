"""
A small comparison run
======================

Trains the fine-only baseline and posterior distillation with squared error
on a reduced corpus, then looks at how confident each model is on the
coarsely labeled documents. Takes under a minute on one core.
"""

import dataclasses

from mixedqa.data import GenConfig, generate
from mixedqa.evaluate import analyze_predictive, evaluate_fine
from mixedqa.objectives import Objective
from mixedqa.training import TrainConfig, train

# few fine labels, four times as many coarse ones
bundle = generate(GenConfig(vocab_size=1000, key_vocab_size=600, num_documents=300, signature_length=1,
                            question_noise_tokens=4, fine_frac=0.05, coarse_frac=0.20))
base = TrainConfig(d_emb=16, d_hid=32, max_steps=400, eval_every=100, patience=2)

for name, alpha in [("supervised", 0.0), ("pd-err2", 5.0)]:
    cfg = dataclasses.replace(base, objective=Objective.parse(name), alpha=alpha)
    record, params = train(cfg, bundle)
    stats = analyze_predictive(params, bundle.coarse_train)
    print(f"{name:10s} dev F1 {record.best_dev_f1:.3f} (step {record.best_step})  "
          f"test F1 {evaluate_fine(params, bundle.test_fine):.3f}  "
          f"entropy {stats.entropy:.2f}  passage MRR {stats.passage_mrr:.3f}")
