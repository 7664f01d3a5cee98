"""Named layer stacks.

``mnist-desk`` and ``cifar-desk`` are the small nets used for the
laptop-scale experiments. ``mnist-paper`` and ``cifar-paper`` are the
full-size stacks; for MNIST only the three 64-filter convolutions are fixed,
and the kernel sizes and strides are our own choice.
"""

from __future__ import annotations

from .nn import LayerSpec, conv2d, dense, dropout, flatten, maxpool2d, relu, softmax


def mnist_desk(hidden: int = 128) -> tuple[list[LayerSpec], tuple]:
    spec = [
        conv2d(1, 16, 3, stride=2, padding=1), relu(),   # 14x14x16
        conv2d(16, 16, 3, stride=2, padding=1), relu(),  # 7x7x16
        flatten(),
        dense(7 * 7 * 16, hidden), relu(),
        dense(hidden, 10), softmax(),
    ]
    return spec, (28, 28, 1)


def mnist_paper() -> tuple[list[LayerSpec], tuple]:
    spec = [
        conv2d(1, 64, 8, stride=2, padding=3), relu(),   # 14x14
        conv2d(64, 64, 6, stride=2, padding=2), relu(),  # 7x7
        conv2d(64, 64, 5, stride=1, padding=0), relu(),  # 3x3
        flatten(),
        dense(3 * 3 * 64, 10), softmax(),
    ]
    return spec, (28, 28, 1)


def cifar_paper(keep_prob: float = 0.75, l2: float = 1e-4) -> tuple[list[LayerSpec], tuple]:
    spec = [
        conv2d(3, 64, 3, padding=1), relu(),
        conv2d(64, 64, 3, padding=1), relu(),
        maxpool2d(2), dropout(keep_prob),                 # 16x16
        conv2d(64, 128, 3, padding=1), relu(),
        conv2d(128, 128, 3, padding=1), relu(),
        maxpool2d(2), dropout(keep_prob),                 # 8x8
        flatten(),
        dense(8 * 8 * 128, 256, l2=l2), relu(), dropout(keep_prob),
        dense(256, 256, l2=l2), relu(), dropout(keep_prob),
        dense(256, 10), softmax(),
    ]
    return spec, (32, 32, 3)


def cifar_desk(hidden: int = 64) -> tuple[list[LayerSpec], tuple]:
    spec = [
        conv2d(3, 16, 3, stride=2, padding=1), relu(),   # 16x16x16
        conv2d(16, 32, 3, stride=2, padding=1), relu(),  # 8x8x32
        flatten(),
        dense(8 * 8 * 32, hidden), relu(),
        dense(hidden, 10), softmax(),
    ]
    return spec, (32, 32, 3)


def mlp(in_dim: int, num_classes: int, hidden: int = 32) -> tuple[list[LayerSpec], tuple]:
    spec = [dense(in_dim, hidden), relu(), dense(hidden, num_classes), softmax()]
    return spec, (in_dim,)


ARCHITECTURES = {
    "mnist-desk": mnist_desk,
    "mnist-paper": mnist_paper,
    "cifar-paper": cifar_paper,
    "cifar-desk": cifar_desk,
}


def get(name: str, **kwargs) -> tuple[list[LayerSpec], tuple]:
    try:
        return ARCHITECTURES[name](**kwargs)
    except KeyError:
        raise KeyError(f"unknown architecture {name!r}; known: {sorted(ARCHITECTURES)}") from None
