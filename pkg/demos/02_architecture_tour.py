"""Shapes and parameter counts of the default network, stage by stage.

Four conv/pool stages feed three dense layers. Convolutions use same
padding so only pooling shrinks the map: 100 -> 50 -> 25 -> 12 -> 6.
"""

import numpy as np

from fruitforest import Cnn4Config, build_cnn4, count_parameters, forward_with_taps


def main():
    config = Cnn4Config()
    model = build_cnn4(config, seed=0)

    print(f"input {config.input_shape}, {config.num_classes} classes")
    h, w = config.input_shape[:2]
    for i, channels in enumerate(config.conv_channels, start=1):
        pooled_h, pooled_w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
        print(f"  conv{i} {config.kernel}x{config.kernel} -> {h}x{w}x{channels}, pool -> {pooled_h}x{pooled_w}x{channels}")
        h, w = pooled_h, pooled_w
    flat = h * w * config.conv_channels[-1]
    print(f"  flatten -> {flat}")
    for width in (*config.dense_sizes, config.num_classes):
        print(f"  dense -> {width}")

    rows, total = count_parameters(model)
    print("\nparameters:")
    for name, count in rows:
        print(f"  {name:<8}{count:>12,}")
    print(f"  {'total':<8}{total:>12,}")

    # a single forward pass, tapping the three feature layers
    rng = np.random.default_rng(0)
    image = rng.random(config.input_shape, dtype=np.float32)
    probs, taps = forward_with_taps(model, image, taps=("conv4_pooled", "dense1", "dense2"))
    print("\nfeature taps on one image:")
    for name, values in taps.items():
        print(f"  {name:<14}{values.size:>6} values")
    print(f"  class probabilities sum to {probs.sum():.6f}")


if __name__ == "__main__":
    main()
