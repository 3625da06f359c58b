"""Tour of the layer kit: forward passes, and why we trust the backward ones.

Each layer implements an explicit backward function instead of relying on
autodiff, so the demo re-derives a few gradients with central finite
differences and shows the agreement.
"""

import numpy as np

from fruitforest import ops


def fd_then_compare(name, loss, analytic, x, h=1e-6):
    fd = np.zeros_like(x)
    flat, out = x.reshape(-1), fd.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = loss()
        flat[i] = keep - h
        lo = loss()
        flat[i] = keep
        out[i] = (hi - lo) / (2 * h)
    gap = np.max(np.abs(fd - analytic))
    print(f"  {name:<12} max |finite difference - analytic| = {gap:.3e}")


def main():
    rng = np.random.default_rng(1)

    print("conv2d: 5x5 kernel, same padding, so spatial size is preserved")
    image = rng.normal(size=(8, 8, 3))
    conv = ops.Conv2dLayer(kernel=rng.normal(size=(5, 5, 3, 4)) * 0.3, bias=rng.normal(size=4))
    out = ops.conv2d_forward(image, conv)
    print(f"  {image.shape} -> {out.shape}, {conv.parameter_count} parameters")

    upstream = rng.normal(size=out.shape)
    grad_image, grad_kernel, grad_bias = ops.conv2d_backward(image, conv, upstream)
    fd_then_compare(
        "conv input",
        lambda: float(np.sum(ops.conv2d_forward(image, conv) * upstream)),
        grad_image,
        image,
    )
    fd_then_compare(
        "conv kernel",
        lambda: float(np.sum(ops.conv2d_forward(image, conv) * upstream)),
        grad_kernel,
        conv.kernel,
    )

    print("maxpool 2x2/2: floor semantics, odd edges are dropped")
    tall = rng.permutation(7 * 7 * 2).reshape(7, 7, 2).astype(np.float64)
    pooled, switches = ops.maxpool2d_forward(tall, ops.MaxPoolSpec())
    print(f"  {tall.shape} -> {pooled.shape}")
    up = rng.normal(size=pooled.shape)
    grad = ops.maxpool2d_backward(switches, up, tall.shape)
    fd_then_compare(
        "maxpool",
        lambda: float(np.sum(ops.maxpool2d_forward(tall, ops.MaxPoolSpec())[0] * up)),
        grad,
        tall,
    )

    print("dense + relu: the gradient flows only through positive activations")
    x = rng.normal(size=6)
    dense = ops.DenseLayer(weights=rng.normal(size=(6, 3)), bias=rng.normal(size=3))
    logits = ops.relu(ops.dense_forward(x, dense))
    up = rng.normal(size=3)
    pre = ops.dense_forward(x, dense)
    grad_x = ops.dense_backward(x, dense, ops.relu_backward(pre, up))[0]
    fd_then_compare(
        "dense+relu",
        lambda: float(np.sum(ops.relu(ops.dense_forward(x, dense)) * up)),
        grad_x,
        x,
    )

    probs = ops.softmax(rng.normal(size=5))
    print(f"softmax output sums to one: {probs.sum():.6f}")


if __name__ == "__main__":
    main()
