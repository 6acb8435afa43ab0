"""Translate phantoms with and without attention across slices.

Trains two short cycle-consistent translators from the same seed, one with
the inter-slice block and one that sees each slice alone, then compares how
much the translated volumes jump between neighbouring slices.
Pass a step count as the first argument (default 300).
"""

import sys

import numpy as np

from sdcuda.metrics import inter_slice_smoothness
from sdcuda.phantom import PhantomConfig, generate
from sdcuda.translator import CycleTrainConfig, TranslatorConfig, train_cycle, translate_volume


def main(steps: int = 300):
    pair = generate(PhantomConfig(seed=0))
    source = [x for x, _ in pair.source]
    target = [x for x, _ in pair.target]
    print(f"source smoothness {np.mean([inter_slice_smoothness(x) for x in source]):.4f}")
    print(f"target smoothness {np.mean([inter_slice_smoothness(x) for x in target]):.4f}")
    for slice_attention in (True, False):
        cfg = CycleTrainConfig(steps=steps, model=TranslatorConfig(slice_attention=slice_attention))
        g, _, log = train_cycle(source, target, cfg)
        out = [translate_volume(g, x) for x in source]
        name = "intra + inter" if slice_attention else "intra only   "
        print(f"{name}: smoothness {np.mean([inter_slice_smoothness(v) for v in out]):.4f}, "
              f"final cycle loss {np.mean(log.cycle[-50:]):.4f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 300)
