#!/usr/bin/env python3
# coding: utf-8

# # Loss functions, checked by hand

# In[1]:

import math

import numpy as np

from sparsemt.losses import (binary_cross_entropy, cross_entropy, focal_heatmap, lovasz_per_class,
                             lovasz_softmax, multitask_total, softmax)


# Uniform logits over K classes cost ln K.

# In[2]:

print(cross_entropy(np.zeros((3, 22)), np.array([0, 5, 21]))[0], math.log(22))


# Binary cross-entropy at p = 0.5 and the focal term for one positive at p = 0.5.

# In[3]:

print(binary_cross_entropy(np.array([0.5]), np.array([1.0]))[0])
print(focal_heatmap(np.array([[0.5]]), np.array([[1.0]]))[0], 0.25 * math.log(2))


# Uncertainty weighting: each task pays L / (2 s) + ln(s) / 2.

# In[4]:

print(multitask_total([2.0, 2.0], [math.e, 1.0])[0])
print(multitask_total([1.0, 2.0, 3.0], [1, 1, 1])[0])


# # Lovasz on one-hot predictions is exactly 1 - IoU per class

# In[5]:

gt = np.array([0, 0, 1, 1, 2, 2, 2])
pred = np.array([0, 1, 1, 1, 2, 0, 2])
for c, (v, _) in lovasz_per_class(np.eye(3)[pred], gt).items():
    inter = np.sum((pred == c) & (gt == c))
    union = np.sum((pred == c) | (gt == c))
    print(c, round(v, 6), round(1 - inter / union, 6))


# With soft probabilities it is a piecewise-linear surrogate; the gradient is what training uses.

# In[6]:

probs = softmax(np.random.default_rng(0).normal(size=(7, 3)))
v, g = lovasz_softmax(probs, gt)
print(round(v, 4))
print(np.round(g, 3))
