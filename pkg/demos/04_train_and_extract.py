"""Train a small network on synthetic data and pull deep features out of it.

The training loop is plain mini-batch descent with the running-average
optimizer, a halve-on-plateau learning-rate schedule, and early stopping
that restores the best-validation-accuracy epoch. Everything is seeded,
so rerunning this script reproduces the numbers exactly.
"""

from pathlib import Path

import numpy as np

from fruitforest import (
    Cnn4Config,
    ImageDataset,
    LoadConfig,
    SplitSpec,
    SynthSpec,
    TrainConfig,
    build_cnn4,
    evaluate_model,
    extract_deep_features,
    generate_synthetic,
    make_validation_split,
    train_model,
)

OUT = Path("demo_out/train")


def main():
    spec = SynthSpec(n_classes=4, per_class=24, image_size=24, deceptive_pairs=1, seed=5)
    index = generate_synthetic(spec, str(OUT))
    train_records, val_records = make_validation_split(index, SplitSpec(fraction=0.15, seed=5))
    train_set = ImageDataset(train_records, LoadConfig())
    val_set = ImageDataset(val_records, LoadConfig())
    print(f"{len(train_records)} train / {len(val_records)} val images, {index.n_classes} classes")

    config = Cnn4Config(input_shape=(24, 24, 4), num_classes=index.n_classes)
    model = build_cnn4(config, seed=5)
    history = train_model(
        model,
        train_set,
        val_set,
        TrainConfig(batch_size=8, max_epochs=12, eta=0.003, seed=5),
    )

    print("epoch  train_loss  val_loss  val_acc  eta")
    for record in history:
        print(
            f"{record.epoch:>5}  {record.train_loss:>10.4f}  {record.val_loss:>8.4f}"
            f"  {record.val_accuracy:>7.3f}  {record.learning_rate:.5f}"
        )

    test_set = ImageDataset(index.test, LoadConfig())
    loss, accuracy = evaluate_model(model, test_set)
    print(f"\ntest loss {loss:.4f}, softmax accuracy {accuracy:.3f}")

    matrix, layout = extract_deep_features(model, test_set.take(np.arange(len(index.test)))[0])
    print(f"deep features: {matrix.shape[0]} rows x {matrix.shape[1]} columns")
    for name, offset, length in layout:
        print(f"  columns {offset:>5}..{offset + length - 1:<5} {name}")


if __name__ == "__main__":
    main()
