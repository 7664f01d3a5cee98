"""A single network is easy to fool.

Train the target T, then craft FGSM and Carlini & Wagner L2 examples against
it. FGSM moves every pixel by eps in the direction that increases the loss;
C&W searches for the smallest L2 change that flips the decision.

    python demos/01_attack_a_single_model.py --cw-n 100
"""

import numpy as np

from _common import load, parser, train_target
from muldef import attacks, nn

p = parser(__doc__.splitlines()[0])
p.add_argument("--cw-n", type=int, default=100, help="test examples attacked with C&W")
args = p.parse_args()

train, test = load(args)
T = train_target(train, args)
print(f"clean test accuracy of T: {100 * nn.accuracy(T, test):.2f}%")

fgsm = attacks.fgsm(T, test, attacks.FgsmConfig(eps=0.3))
step = np.abs(fgsm.x - test.x)
print(f"FGSM eps=0.3: accuracy {100 * nn.accuracy(T, fgsm.x, fgsm.y):.2f}%, "
      f"max per-pixel change {step.max():.3f}")

# C&W is far slower, so it runs on a small slice of the test set.
sub = test.take(np.arange(args.cw_n))
cw = attacks.cw_l2(T, sub, attacks.CwConfig(confidence=0.01, max_iterations=300))
l2 = cw.meta["l2"][~cw.failed]
print(f"C&W kappa=0.01: accuracy {100 * nn.accuracy(T, cw.x, cw.y):.2f}% on {len(sub)} examples, "
      f"median L2 {np.median(l2):.3f}, {int(cw.failed.sum())} failures")

# The FGSM set from one model transfers only partly to a fresh model.
other = train_target(train, type(args)(**{**vars(args), "seed": args.seed + 1}))
print(f"FGSM examples from T against an independently trained model: "
      f"{100 * nn.accuracy(other, fgsm.x, fgsm.y):.2f}%")
