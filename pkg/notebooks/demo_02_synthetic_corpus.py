"""
The synthetic mixed-supervision corpus
======================================

Questions share a signature with the answer span. A fraction of documents
carry only the paragraph index of the answer; their span is kept aside for
the ceiling model and for analysis.
"""

import numpy as np

from mixedqa.data import GenConfig, check_invariants, exact_match_baseline, generate
from mixedqa.evaluate import token_f1

config = GenConfig(num_documents=100, signature_length=2)
bundle = generate(config)
check_invariants(bundle)

for name, split in bundle.splits().items():
    print(f"{name:13s} {len(split):4d} examples")

# one coarsely labeled example: the label names a paragraph, the hidden span is not for training
ex = bundle.coarse_train[0]
print("question tokens:", ex.question)
print("label:", ex.label, "hidden span:", ex.hidden_fine)
para = ex.document.paragraphs[ex.hidden_fine.a_p]
print("answer tokens:", para[ex.hidden_fine.a_start:ex.hidden_fine.a_end + 1])

# a string-matching baseline shows how hard the corpus is without learning
f1 = np.mean([token_f1(exact_match_baseline(e, config.signature_length), e.label) for e in bundle.test_fine])
print(f"exact-match baseline test F1: {f1:.3f}")
