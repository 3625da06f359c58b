"""Image preparation: background removal, the four-channel stack, resizing.

The network does not eat raw RGB. Each image becomes hue, saturation,
value, and grayscale planes in [0, 1]; an optional flood fill from the
corners whites out the background first so hue statistics come from the
object alone.
"""

from pathlib import Path

import numpy as np

from fruitforest.imaging import (
    apply_background,
    flood_fill_background,
    make_4channel,
    resize_image,
    save_rgb8,
)

OUT = Path("demo_out/preprocessing")


def main():
    OUT.mkdir(parents=True, exist_ok=True)

    # a red disc on an off-white background with a little sensor noise
    rng = np.random.default_rng(6)
    image = np.full((40, 40, 3), 250, dtype=np.uint8)
    yy, xx = np.mgrid[0:40, 0:40]
    disc = (yy - 20) ** 2 + (xx - 23) ** 2 <= 11**2
    image[disc] = (200, 40, 30)
    image = np.clip(image.astype(np.int16) + rng.integers(-4, 5, size=image.shape), 0, 255).astype(np.uint8)
    save_rgb8(str(OUT / "input.png"), image)

    mask = flood_fill_background(image, threshold=12)
    print(f"flood fill marked {int(mask.sum())} of {mask.size} pixels as background")
    cleaned = apply_background(image, mask)
    save_rgb8(str(OUT / "cleaned.png"), cleaned)

    channels = make_4channel(cleaned)
    print("four-channel stack (hue, saturation, value, gray):")
    for i, name in enumerate(("hue", "saturation", "value", "gray")):
        plane = channels[..., i]
        print(f"  {name:<11} min {plane.min():.3f}  max {plane.max():.3f}  mean {plane.mean():.3f}")

    small = resize_image(cleaned, 16, 16)
    save_rgb8(str(OUT / "resized.png"), small)
    print(f"bilinear resize {cleaned.shape[:2]} -> {small.shape[:2]}, wrote {OUT}/")


if __name__ == "__main__":
    main()
