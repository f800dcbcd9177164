"""
Attention pooling on a bag of digits
====================================

A bag is a set of images with one label. The model embeds every image,
scores each embedding with a gated attention unit, and classifies the
attention-weighted mean. The weights sum to one and do not depend on the
order of the instances.
"""

import numpy as np
import torch

from distill_mil import build_model, predict_bag
from distill_mil.data import MnistBagsSpec, generate_mnist_bags, load_digit_pool

pool = load_digit_pool("mnist5k")
bag = next(b for b in generate_mnist_bags(MnistBagsSpec(20, 8, seed=1), pool) if b.label == 1)
print("bag size", len(bag), "instance labels", bag.instance_labels)

# an untrained model already gives a valid distribution over instances
model = build_model("lenet5", seed=0)
out = predict_bag(model, bag, with_instances=True)
print("attention", np.round(out.attention_weights, 4), "sum", out.attention_weights.sum())

# shuffling the bag permutes the weights and leaves the prediction alone
perm = np.random.default_rng(0).permutation(len(bag))
shuffled = type(bag)(bag.instances[perm], bag.label, bag.bag_id, bag.instance_labels[perm])
out2 = predict_bag(model, shuffled)
print("max |dP|", np.abs(out.bag_probs - out2.bag_probs).max())
print("weights follow the instances", np.allclose(out.attention_weights[perm], out2.attention_weights))

# the same pieces by hand: features, weights, pooled vector, classifier
with torch.no_grad():
    h = model.extractor(model.as_tensor(bag.instances))
    a = model.attention(h)
    logits = model.classifier(a @ h)
print("manual P(y=1)", torch.softmax(logits, -1)[1].item(), "api", out.positive_prob)
