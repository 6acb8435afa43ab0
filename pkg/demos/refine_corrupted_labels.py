"""Refinement on deliberately damaged labels.

Erode the true labels of a phantom and let sensitivity refinement grow them
back; dilate them and let specificity refinement trim them. The probability
maps come from smoothing the damaged labels, so doubt sits on the edges just
as it would for a real segmenter.
"""

import numpy as np

from sdcuda.metrics import dice
from sdcuda.phantom import PhantomConfig, corrupt_labels, generate, label_probabilities
from sdcuda.refinery import RefinementPolicy, refine


def mean_dice(a, b):
    return np.mean([dice(a, b, c) for c in range(1, b.num_classes)])


def main():
    pair = generate(PhantomConfig(seed=0))
    for x, truth in pair.target:
        for damage, mode in (("erode", "sensitivity"), ("dilate", "specificity")):
            noisy = corrupt_labels(truth, damage, radius=2)
            fixed, report = refine(x, noisy, label_probabilities(noisy, 1.0),
                                   RefinementPolicy.uniform(truth.num_classes, mode))
            changes = ", ".join(f"class {c}: +{r.added}/-{r.removed}" for c, r in report.classes.items())
            print(f"{damage:6s} -> {mode:11s}  Dice {mean_dice(noisy, truth):.3f} -> "
                  f"{mean_dice(fixed, truth):.3f}  ({changes})")


if __name__ == "__main__":
    main()
