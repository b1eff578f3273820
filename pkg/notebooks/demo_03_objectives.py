"""
Four ways to learn from a paragraph label
=========================================

On one coarsely labeled example we compare the multi-task paragraph loss,
the marginal likelihood of spans inside the paragraph, and posterior
distillation with cross-entropy and squared error. The teacher is the model's
own belief restricted to the labeled paragraph.
"""

import numpy as np

from mixedqa.data import GenConfig, generate
from mixedqa.model import ModelConfig, ModelParams, fine_belief
from mixedqa.objectives import coarse_nll, mml_loss, paragraph_marginal, pd_loss, project

bundle = generate(GenConfig(num_documents=40, seed=3))
params = ModelParams.init(ModelConfig(vocab_size=200, d_emb=8, d_hid=16), np.random.default_rng(1))
ex = bundle.coarse_train[0]
z = ex.label.a_p

belief = fine_belief(params, [ex])
print("paragraph marginal P(span in z):", float(paragraph_marginal(belief, [z], 10).value[0]))
print("MTL  paragraph NLL:", float(coarse_nll(params, [ex]).value))
print("MML  -log marginal:", float(mml_loss(params, [ex], 10).value))
print("PD   cross-entropy:", float(pd_loss(params, [ex], "cross_entropy").value))
print("PD   squared error:", float(pd_loss(params, [ex], "squared_error").value))

# the projection keeps the shape of the belief inside the paragraph
teacher = project(belief, [z])
n = ex.document.num_tokens
student = np.exp(belief.start_logprob.value[0, :n])
print("start mass inside the paragraph before:", student[teacher.start[0, :n] > 0].sum().round(3))
print("start mass inside the paragraph after: ", teacher.start[0, :n].sum().round(3))
