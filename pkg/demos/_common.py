"""Shared setup for the demo scripts: data loading and a trained target."""

import argparse
import logging
import time

import numpy as np

from muldef import architectures, data, defense, nn


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--n-train", type=int, default=12000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    return p


def load(args):
    """Desk-scale MNIST if the IDX files are on disk, otherwise synthetic blobs."""
    logging.basicConfig(level=logging.INFO, format="  %(message)s")
    try:
        train, test = data.load_desk_mnist(args.n_train, args.n_test, seed=0)
        print(f"MNIST subset: {len(train)} train / {len(test)} test")
    except FileNotFoundError:
        print("MNIST not found (set MULDEF_DATA_DIR); falling back to synthetic blobs")
        full = data.synth_blobs(10, (args.n_train + args.n_test) // 10, 784, 0.25,
                                seed=0, image_shape=(28, 28, 1))
        train = full.take(np.arange(args.n_train))
        test = full.take(np.arange(args.n_train, len(full)), split="test")
    return train, test


def train_target(train, args) -> nn.Network:
    spec, shape = architectures.mnist_desk()
    net = nn.Network.create(spec, shape, seed=defense.derive_seed(args.seed, 100), id="T")
    t0 = time.perf_counter()
    report = nn.train(net, train, nn.TrainConfig(batch_size=64, max_epochs=args.epochs,
                                                 rng_seed=args.seed))
    print(f"trained T for {report.epochs} epochs ({report.stop_reason}) "
          f"in {time.perf_counter() - t0:.0f}s, validation loss {report.val_loss:.4f}")
    return net


def show_matrix(matrix, rows, cols, title):
    print(title)
    print("            " + "".join(f"{c:>9}" for c in cols))
    for name, row in zip(rows, matrix):
        print(f"  {name:>9} " + "".join(f"{100 * v:8.1f}%" for v in row))
