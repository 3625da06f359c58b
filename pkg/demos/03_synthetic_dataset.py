"""The deceptive-pairs generator: classes that differ only by a whisker of hue.

Each pair shares one shape cycle, size range, and placement jitter; the two
members draw their hues from bands offset by less than the jitter-free
spacing between unrelated classes. Telling them apart requires color
precision, which is exactly what the forest-versus-softmax comparison
probes.
"""

import math
from collections import Counter
from pathlib import Path

import numpy as np

from fruitforest import SynthSpec, generate_synthetic, load_batch
from fruitforest.data import SampleRecord

OUT = Path("demo_out/synthetic")


def circular_mean_hue(images):
    """Mean hue over saturated pixels, handling the wrap at 1.0.

    Loaded images are already hue/saturation/value/gray stacks, so the hue
    plane is channel 0 and the white background drops out via channel 1.
    """
    angles = [2 * math.pi * image[..., 0][image[..., 1] > 0.5] for image in images]
    theta = np.concatenate(angles)
    return math.atan2(np.sin(theta).mean(), np.cos(theta).mean()) / (2 * math.pi) % 1.0


def main():
    spec = SynthSpec(n_classes=6, per_class=12, image_size=32, deceptive_pairs=2, seed=3)
    index = generate_synthetic(spec, str(OUT))

    print(f"wrote {OUT}: {index.n_classes} classes, provenance '{index.provenance}'")
    train_counts = Counter(index.classes[r.label] for r in index.training)
    for name in index.classes:
        print(f"  {name:<10} {train_counts[name]} train images")

    print(f"\ngroups.csv pairs up the look-alike classes:")
    print("  " + (OUT / "groups.csv").read_text().strip().replace("\n", "\n  "))

    # measure how close the pair hues actually are
    by_class: dict[int, list[SampleRecord]] = {}
    for record in index.training:
        by_class.setdefault(record.label, []).append(record)
    hue_a = circular_mean_hue(load_batch(by_class[0])[0])
    hue_b = circular_mean_hue(load_batch(by_class[1])[0])
    gap = abs(hue_a - hue_b)
    gap = min(gap, 1.0 - gap)
    print(f"\nmean hue of {index.classes[0]}: {hue_a:.4f}")
    print(f"mean hue of {index.classes[1]}: {hue_b:.4f}")
    print(f"circular gap {gap:.4f} (hue_delta setting: {spec.hue_delta:.4f})")


if __name__ == "__main__":
    main()
